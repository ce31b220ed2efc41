use covgam::ale::{ale_estimate, ale_gradients, AleOutput};
use covgam::basis::PredictorSpec;
use covgam::fit::state_at;
use covgam::mcd::eta_to_covariance;
use covgam::{assemble_design, EffectSpec, McdIndexTables, ModelSpec};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::common::{dataset, ensure, normal, rng, Check};

const N: usize = 10_000;
const BINS: usize = 40;
const SUP_TOL: f64 = 0.02;
const FD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

/// With `T₂₁ = −sinh(x/2)` and equal log-variances the correlation is
/// `tanh(x/2)` whatever `z` does.
pub fn run() -> Check {
    let mut r = rng(71);
    let x: Vec<f64> = (0..N).map(|_| 1.5 * normal(&mut r)).collect();
    let z: Vec<f64> = x.iter().map(|v| 0.6 * v + 0.8 * normal(&mut r)).collect();
    let placeholder = vec![vec![0.0, 0.0]; N];
    let data = dataset(placeholder, vec![("x", x.clone()), ("z", z)]);
    let spec = ModelSpec {
        d: 2,
        predictors: vec![
            PredictorSpec { index: 1, offset: 0.0, effects: vec![EffectSpec::intercept()] },
            PredictorSpec { index: 2, offset: 0.0, effects: vec![EffectSpec::intercept()] },
            PredictorSpec {
                index: 3,
                offset: 0.0,
                effects: vec![EffectSpec::intercept(), EffectSpec::linear("z")],
            },
            PredictorSpec {
                index: 4,
                offset: 0.0,
                effects: vec![EffectSpec::intercept(), EffectSpec::linear("z")],
            },
            PredictorSpec {
                index: 5,
                offset: 0.0,
                effects: vec![EffectSpec::intercept(), EffectSpec::cr("x", 20)],
            },
        ],
    };
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    let mut beta = vec![0.0; asm.p];
    for j in [2, 3] {
        let c = asm.predictor_cols(j);
        beta[c.start] = 0.2;
        beta[c.start + 1] = 0.3;
    }
    // least-squares projection of the target onto the T₂₁ basis
    let xt = &asm.predictors[4].x;
    let target = DVector::from_iterator(N, x.iter().map(|v| -(0.5 * v).sinh()));
    let coef = (xt.transpose() * xt)
        .cholesky()
        .ok_or("T basis is rank deficient")?
        .solve(&(xt.transpose() * target));
    let c = asm.predictor_cols(4);
    beta[c.clone()].copy_from_slice(coef.as_slice());

    // responses drawn from the constructed model
    let tables = McdIndexTables::new(2);
    let eta = asm.eta(&beta);
    let y: Vec<Vec<f64>> = (0..N)
        .map(|i| {
            let row: Vec<f64> = eta.row(i).iter().copied().collect();
            let f = eta_to_covariance(&row, &tables).expect("valid eta");
            let chol = f.sigma.cholesky().expect("SPD");
            let e = DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
            (chol.l() * e).iter().copied().collect()
        })
        .collect();
    let data = data.with_responses(y).map_err(|e| e.to_string())?;
    let asm = assemble_design(&spec, &data).map_err(|e| e.to_string())?;
    let state = state_at(&asm, &data, &beta, &vec![1.0; asm.penalties.len()]).map_err(|e| e.to_string())?;

    let output = AleOutput::Corr { l: 1, m: 0 };
    let curve = ale_estimate(&state, &data, "x", output, BINS).map_err(|e| e.to_string())?;
    ensure(curve.uncentred[0] == 0.0, || format!("uncentred base {}", curve.uncentred[0]))?;
    let truth: Vec<f64> = curve
        .edges
        .iter()
        .map(|e| (0.5 * e).tanh() - (0.5 * curve.edges[0]).tanh())
        .collect();
    let range = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - truth.iter().copied().fold(f64::INFINITY, f64::min);
    let sup = curve
        .uncentred
        .iter()
        .zip(&truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / range;
    ensure(sup <= SUP_TOL, || format!("sup-norm error {:.2}% of range", 100.0 * sup))?;

    let v = state.posterior_covariance().map_err(|e| e.to_string())?;
    let grads = ale_gradients(&state, &curve, &data).map_err(|e| e.to_string())?;
    let vnorm = v.amax();
    for (k, g) in grads.iter().enumerate() {
        let q = g.dot(&(&v * g));
        ensure(q >= -1e-12 * vnorm * g.norm_squared(), || format!("edge {k}: variance {q:e}"))?;
    }
    let mut worst = 0.0f64;
    for dir in 0..3 {
        let delta: Vec<f64> = (0..asm.p).map(|_| normal(&mut r)).collect();
        let shifted = |h: f64| {
            let mut s = state.clone();
            for (b, dl) in s.beta.iter_mut().zip(&delta) {
                *b += h * dl;
            }
            ale_estimate(&s, &data, "x", output, BINS).expect("shifted ALE").uncentred
        };
        let (up, down) = (shifted(FD_STEP), shifted(-FD_STEP));
        let dv = DVector::from_vec(delta.clone());
        let analytic: Vec<f64> = grads.iter().map(|g| g.dot(&dv)).collect();
        let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * FD_STEP)).collect();
        let e = crate::common::rel_err(&analytic, &fd);
        worst = worst.max(e);
        ensure(e < FD_TOL, || format!("direction {dir}: gradient rel. error {e:e}"))?;
    }
    Ok(format!(
        "sup-norm {:.2}% of range (n = {N}, B = {BINS}); base 0; variances ≥ 0; gradient FD rel. error {worst:.1e}",
        100.0 * sup
    ))
}
