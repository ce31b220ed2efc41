use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use covgam::basis::PredictorSpec;
use covgam::data::Covariate;
use covgam::fit::{
    default_start, fit_assembled, fit_fixed_lambda, laml, log_likelihood, newton_map, NewtonResult,
};
use covgam::{assemble_design, Dataset, EffectSpec, FitOptions, ModelSpec};
use nalgebra::DVector;
use rand::Rng;

use crate::common::{dataset, ensure, normal, rel_err, rng, Check};

const RIDGE_TOL: f64 = 1e-8;
const QUADRATURE_TOL: f64 = 1e-4;
const GRID_REL_TOL: f64 = 0.10;

fn spec(d: usize, predictors: Vec<(usize, Vec<EffectSpec>)>) -> ModelSpec {
    ModelSpec {
        d,
        predictors: predictors
            .into_iter()
            .map(|(index, effects)| PredictorSpec {
                index,
                offset: 0.0,
                effects,
            })
            .collect(),
    }
}

fn monotone(fit: &NewtonResult) -> bool {
    fit.trajectory.windows(2).all(|w| w[1] >= w[0])
}

/// Unit variance is fixed by leaving the log-variance predictor empty, so the
/// penalised fit is a ridge regression.
fn ridge(trajectories: &mut Vec<(String, bool)>) -> Result<String, String> {
    let mut r = rng(31);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|v| vec![(2.0 * std::f64::consts::PI * v).sin() + normal(&mut r)])
        .collect();
    let data = dataset(y.clone(), vec![("x", x)]);
    let spec = spec(1, vec![(1, vec![EffectSpec::intercept(), EffectSpec::cr("x", 10)])]);
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    let lambda = [2.5];
    let opts = FitOptions::default();
    let start = default_start(&asm, &data).map_err(|e| e.to_string())?;
    let nm = newton_map(&start, &lambda, &asm, &data, &opts).map_err(|e| e.to_string())?;
    trajectories.push(("ridge".into(), monotone(&nm)));
    let state = fit_fixed_lambda(&asm, &data, &lambda, None, &opts).map_err(|e| e.to_string())?;

    let x = &asm.predictors[0].x;
    let s = asm.penalty_matrix(&lambda);
    let yv = DVector::from_iterator(n, y.iter().map(|v| v[0]));
    let a = x.transpose() * x + s;
    let v = a.clone().try_inverse().ok_or("singular ridge system")?;
    let beta = &v * (x.transpose() * yv);
    let eb = rel_err(&state.beta, beta.as_slice());
    ensure(eb < RIDGE_TOL, || format!("ridge coefficients rel. error {eb:e}"))?;
    let vb = state.posterior_covariance().map_err(|e| e.to_string())?;
    let ev = (&vb - &v).amax() / v.amax();
    ensure(ev < RIDGE_TOL, || format!("V_β rel. error {ev:e}"))?;
    Ok(format!("ridge β {eb:.1e}, V_β {ev:.1e}"))
}

/// One ridge-penalised coefficient: a single-level factor.
fn quadrature(trajectories: &mut Vec<(String, bool)>) -> Result<String, String> {
    let mut r = rng(32);
    let n = 25;
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let ts = (0..n).map(|i| t0 + Duration::minutes(30 * i as i64)).collect();
    let y: Vec<Vec<f64>> = (0..n).map(|_| vec![0.4 + normal(&mut r)]).collect();
    let mut covs = BTreeMap::new();
    covs.insert(
        "g".to_string(),
        Covariate::Categorical {
            levels: vec!["a".into()],
            codes: vec![0; n],
        },
    );
    let data = Dataset::new(ts, y, covs).map_err(|e| e.to_string())?;
    let spec = spec(1, vec![(1, vec![EffectSpec::factor("g", true)])]);
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    ensure(asm.p == 1 && asm.penalties.len() == 1, || format!("toy has p = {}", asm.p))?;
    let lambda = [3.0];
    let opts = FitOptions::default();
    let start = default_start(&asm, &data).map_err(|e| e.to_string())?;
    let nm = newton_map(&start, &lambda, &asm, &data, &opts).map_err(|e| e.to_string())?;
    trajectories.push(("quadrature toy".into(), monotone(&nm)));
    let approx = laml(&lambda, &asm, &data, &opts).map_err(|e| e.to_string())?;

    let prec = asm.penalty_matrix(&lambda)[(0, 0)];
    let log_post = |b: f64| log_likelihood(&[b], &asm, &data).unwrap() - 0.5 * prec * b * b;
    let centre = nm.beta[0];
    let sd = 1.0 / nm.neg_hess[(0, 0)].sqrt();
    let peak = log_post(centre);
    // composite Simpson over ±12 sd
    let m = 4000;
    let (lo, hi) = (centre - 12.0 * sd, centre + 12.0 * sd);
    let h = (hi - lo) / m as f64;
    let mut acc = 0.0;
    for k in 0..=m {
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * (log_post(lo + k as f64 * h) - peak).exp();
    }
    let integral = acc * h / 3.0;
    let exact = peak + integral.ln() + 0.5 * prec.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let gap = (approx - exact).abs();
    ensure(gap < QUADRATURE_TOL, || format!("LAML {approx} vs quadrature {exact}"))?;
    Ok(format!("LAML−quadrature {gap:.1e}"))
}

fn grid(trajectories: &mut Vec<(String, bool)>) -> Result<String, String> {
    let mut r = rng(33);
    let n = 500;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|v| vec![(std::f64::consts::PI * v).sin() + 0.5 * normal(&mut r)])
        .collect();
    let data = dataset(y, vec![("x", x)]);
    let spec = spec(
        1,
        vec![
            (1, vec![EffectSpec::intercept(), EffectSpec::cr("x", 10)]),
            (2, vec![EffectSpec::intercept()]),
        ],
    );
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    let opts = FitOptions::default();
    let state = fit_assembled(&asm, &data, &opts).map_err(|e| e.to_string())?;
    let fs = state.lambda[0];

    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..41 {
        let lam = 10f64.powf(-3.0 + 0.25 * k as f64);
        let start = default_start(&asm, &data).map_err(|e| e.to_string())?;
        let nm = newton_map(&start, &[lam], &asm, &data, &opts).map_err(|e| e.to_string())?;
        trajectories.push((format!("grid λ={lam:.2e}"), monotone(&nm)));
        let v = laml(&[lam], &asm, &data, &opts).map_err(|e| e.to_string())?;
        if v > best.0 {
            best = (v, lam);
        }
    }
    let (ln_fs, ln_grid) = (fs.ln(), best.1.ln());
    let rel = (ln_fs - ln_grid).abs() / ln_grid.abs();
    ensure(rel <= GRID_REL_TOL, || {
        format!("FS λ = {fs:.3e} vs grid maximiser {:.3e} (log rel. {rel:.3})", best.1)
    })?;
    Ok(format!("FS λ {fs:.3e} vs grid {:.3e} (log rel. {rel:.3})", best.1))
}

/// A d = 3 fit with smooth covariance effects.
fn covariance_fit(trajectories: &mut Vec<(String, bool)>) -> Result<String, String> {
    let mut r = rng(34);
    let n = 1500;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|v| {
            let s1 = (0.5 * v).exp();
            let e1 = s1 * normal(&mut r);
            let e2 = 0.8 * v * e1 + normal(&mut r);
            vec![e1, e2, 0.3 * e2 + normal(&mut r)]
        })
        .collect();
    let data = dataset(y, vec![("x", x)]);
    let mut spec = ModelSpec::intercepts(3);
    spec.predictor_mut(3).effects.push(EffectSpec::cr("x", 6));
    spec.predictor_mut(6).effects.push(EffectSpec::cr("x", 6));
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    let opts = FitOptions::default();
    let start = default_start(&asm, &data).map_err(|e| e.to_string())?;
    let nm = newton_map(&start, &vec![1.0; asm.penalties.len()], &asm, &data, &opts)
        .map_err(|e| e.to_string())?;
    trajectories.push(("d=3 covariance".into(), monotone(&nm)));
    let state = fit_assembled(&asm, &data, &opts).map_err(|e| e.to_string())?;
    Ok(format!("d=3 fit converged={}", state.converged))
}

pub fn run() -> Check {
    let mut traj = Vec::new();
    let a = ridge(&mut traj)?;
    let b = quadrature(&mut traj)?;
    let c = grid(&mut traj)?;
    let d = covariance_fit(&mut traj)?;
    let bad: Vec<&String> = traj.iter().filter(|(_, ok)| !ok).map(|(n, _)| n).collect();
    ensure(bad.is_empty(), || format!("non-monotone Newton ascent in {bad:?}"))?;
    Ok(format!("{a}; {b}; {c}; {d}; {} Newton runs monotone", traj.len()))
}
