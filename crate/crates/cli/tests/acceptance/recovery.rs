use covgam::fit::fit_model;
use covgam::mcd::eta_to_covariance;
use covgam::select::{boost_rank, residual_offsets, BoostConfig, Restriction};
use covgam::{FitOptions, McdIndexTables};

use crate::common::{ensure, pearson, Check};
use crate::selection::{planted, N_TRAIN, N_VALID};

const MIN_CORRELATION: f64 = 0.95;
const RESTRICTED_STEPS: usize = 150;

fn sigma_rows(eta: &[Vec<f64>], tables: &McdIndexTables) -> Result<Vec<Vec<f64>>, String> {
    eta.iter()
        .map(|row| {
            let s = eta_to_covariance(row, tables).map_err(|e| e.to_string())?.sigma;
            let mut v = Vec::new();
            for l in 0..tables.d {
                for m in 0..=l {
                    v.push(s[(l, m)]);
                }
            }
            Ok(v)
        })
        .collect()
}

pub fn run() -> Check {
    let p = planted()?;
    let tables = McdIndexTables::new(3);
    let state = fit_model(&p.choice.spec, &p.train, &FitOptions::default()).map_err(|e| e.to_string())?;
    let eta = state.predict_eta(&p.holdout).map_err(|e| e.to_string())?;
    let fitted: Vec<Vec<f64>> = (0..eta.nrows()).map(|i| eta.row(i).iter().copied().collect()).collect();
    let truth = p.synth.truth_eta[N_TRAIN + N_VALID..].to_vec();
    let fitted = sigma_rows(&fitted, &tables)?;
    let truth = sigma_rows(&truth, &tables)?;
    let mut cors = Vec::new();
    let mut k = 0;
    for l in 0..3 {
        for m in 0..=l {
            let a: Vec<f64> = fitted.iter().map(|r| r[k]).collect();
            let b: Vec<f64> = truth.iter().map(|r| r[k]).collect();
            let c = pearson(&a, &b);
            ensure(c > MIN_CORRELATION, || format!("Σ[{}{}] correlation {c:.4}", l + 1, m + 1))?;
            cors.push(c);
            k += 1;
        }
    }
    let min = cors.iter().copied().fold(f64::INFINITY, f64::min);

    let offsets = residual_offsets(&p.train, false).map_err(|e| e.to_string())?;
    let mut committed = 0;
    for restriction in [Restriction::Cal, Restriction::CalRen, Restriction::Diag] {
        let cfg = BoostConfig {
            m: RESTRICTED_STEPS,
            restriction,
            ..p.config.clone()
        };
        let allowed = cfg.candidate_map(3);
        let ranked = boost_rank(&p.train, &offsets, &cfg).map_err(|e| e.to_string())?;
        let inside = |j: usize, r: usize| allowed.get(&(j - 1)).is_some_and(|rs| rs.contains(&r));
        for c in &ranked.candidates {
            ensure(inside(c.j, c.r), || {
                format!("{}: candidate (j{}, r{}) outside the catalogue", restriction.as_str(), c.j, c.r)
            })?;
        }
        for s in &ranked.trace {
            ensure(inside(s.j, s.r), || {
                format!("{}: committed (j{}, r{}) outside the catalogue", restriction.as_str(), s.j, s.r)
            })?;
        }
        committed += ranked.trace.len();
    }
    Ok(format!(
        "min Σ entry correlation {min:.4} on {} held-out rows; {committed} restricted commits all in catalogue",
        eta.nrows()
    ))
}
