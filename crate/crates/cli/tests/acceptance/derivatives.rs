use covgam::mcd::{
    corr_jacobian, eta_to_covariance, grad_eta, hess_eta, log_density, sigma_jacobian,
};
use covgam::McdIndexTables;
use rand::Rng;

use crate::common::{ensure, normal, rel_err, rng, Check};

const CASES: usize = 100;
const GRAD_TOL: f64 = 1e-5;
const HESS_TOL: f64 = 1e-4;
const JAC_TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;

fn central<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += STEP;
            b[k] -= STEP;
            (f(&a) - f(&b)) / (2.0 * STEP)
        })
        .collect()
}

pub fn run() -> Check {
    let mut worst = [0.0f64; 3];
    for d in [1usize, 2, 3, 5] {
        let tables = McdIndexTables::new(d);
        let mut r = rng(100 + d as u64);
        for case in 0..CASES {
            let eta: Vec<f64> = (0..tables.q).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| 1.5 * normal(&mut r)).collect();

            let g = grad_eta(&y, &eta, &tables);
            let fd = central(|e| log_density(&y, e, &tables), &eta);
            let e = rel_err(&g, &fd);
            worst[0] = worst[0].max(e);
            ensure(e < GRAD_TOL, || format!("d={d} case {case}: gradient rel. error {e:e}"))?;

            let h = hess_eta(&y, &eta, &tables);
            for k in 0..tables.q {
                let fd = central(|e| grad_eta(&y, e, &tables)[k], &eta);
                let row: Vec<f64> = h.row(k).iter().copied().collect();
                let e = rel_err(&row, &fd);
                worst[1] = worst[1].max(e);
                ensure(e < HESS_TOL, || format!("d={d} case {case} row {k}: Hessian rel. error {e:e}"))?;
            }

            for l in 0..d {
                for m in 0..=l {
                    let js = sigma_jacobian(&eta, &tables, l, m).map_err(|e| e.to_string())?;
                    let fd = central(|e| eta_to_covariance(e, &tables).unwrap().sigma[(l, m)], &eta);
                    let e = rel_err(&js, &fd);
                    worst[2] = worst[2].max(e);
                    ensure(e < JAC_TOL, || format!("d={d} Σ[{l},{m}] Jacobian rel. error {e:e}"))?;
                    if l != m {
                        let jc = corr_jacobian(&eta, &tables, l, m).map_err(|e| e.to_string())?;
                        let fd = central(
                            |e| eta_to_covariance(e, &tables).unwrap().correlation()[(l, m)],
                            &eta,
                        );
                        let e = rel_err(&jc, &fd);
                        worst[2] = worst[2].max(e);
                        ensure(e < JAC_TOL, || format!("d={d} Γ[{l},{m}] Jacobian rel. error {e:e}"))?;
                    }
                }
            }
        }
    }
    Ok(format!(
        "max rel. errors: gradient {:.1e}, Hessian {:.1e}, Jacobians {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}
