use covgam::mcd::{covariance_to_eta, eta_to_covariance, grad_eta, log_density};
use covgam::McdIndexTables;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::common::{ensure, normal, rng, Check};

const FUZZ: usize = 10_000;
const ROUNDTRIP_TOL: f64 = 1e-10;
const ORACLE_TOL: f64 = 1e-8;

/// Dense oracle: `Σ` inverted from `TᵀD⁻²T`, then a Cholesky log-density.
fn dense_log_density(y: &[f64], eta: &[f64], tables: &McdIndexTables) -> f64 {
    let d = tables.d;
    let mut t = DMatrix::<f64>::identity(d, d);
    for idx in 0..tables.n_t() {
        let (row, col) = tables.t_pos(idx);
        t[(row, col)] = eta[2 * d + idx];
    }
    let dinv = DMatrix::from_diagonal(&DVector::from_fn(d, |k, _| (-eta[d + k]).exp()));
    let precision = t.transpose() * dinv * &t;
    let sigma = precision.try_inverse().expect("invertible precision");
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let chol = sigma.cholesky().expect("oracle Σ is SPD");
    let r = DVector::from_fn(d, |k, _| y[k] - eta[k]);
    let z = chol.l().solve_lower_triangular(&r).expect("triangular solve");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + z.norm_squared())
}

fn round(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

pub fn run() -> Check {
    let mut r = rng(2);
    let mut worst_rt = 0.0f64;
    let mut worst_ld = 0.0f64;
    for case in 0..FUZZ {
        let d = r.random_range(1..=8usize);
        let tables = McdIndexTables::new(d);
        let eta: Vec<f64> = (0..tables.q).map(|_| normal(&mut r)).collect();
        let f = eta_to_covariance(&eta, &tables).map_err(|e| format!("case {case}: {e}"))?;
        ensure(f.sigma.clone().cholesky().is_some(), || {
            format!("case {case} (d={d}): Σ not positive definite")
        })?;
        let back = covariance_to_eta(&f.sigma).map_err(|e| format!("case {case}: {e}"))?;
        for (k, b) in back.iter().enumerate() {
            let e = (b - eta[d + k]).abs() / eta[d + k].abs().max(1.0);
            worst_rt = worst_rt.max(e);
        }
        ensure(worst_rt < ROUNDTRIP_TOL, || {
            format!("case {case} (d={d}): round-trip error {worst_rt:e}")
        })?;
        let y: Vec<f64> = (0..d).map(|_| 2.0 * normal(&mut r)).collect();
        let a = log_density(&y, &eta, &tables);
        let b = dense_log_density(&y, &eta, &tables);
        let e = (a - b).abs() / b.abs().max(1.0);
        worst_ld = worst_ld.max(e);
        ensure(e < ORACLE_TOL, || format!("case {case} (d={d}): log-density {a} vs oracle {b}"))?;
    }

    let tables = McdIndexTables::new(2);
    let eta = [0.0, 0.0, 0.0, 0.0, 0.5];
    let y = [1.0, 1.0];
    let sigma = eta_to_covariance(&eta, &tables).map_err(|e| e.to_string())?.sigma;
    let expected = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.25]);
    ensure((&sigma - &expected).amax() < 1e-15, || format!("worked Σ = {sigma}"))?;
    let l = log_density(&y, &eta, &tables);
    ensure(round(l, 7) == -3.4628771, || format!("worked log-density {l}"))?;
    let g = grad_eta(&y, &eta, &tables);
    let want = [1.75, 1.5, 0.0, 0.625, -1.5];
    ensure(g.iter().zip(&want).all(|(a, b)| round(*a, 7) == *b), || {
        format!("worked gradient {g:?}")
    })?;
    Ok(format!(
        "{FUZZ} fuzzed Σ SPD; max round-trip {worst_rt:.1e}; max oracle gap {worst_ld:.1e}; worked d=2 values exact"
    ))
}
