use covgam::score::{
    block_bootstrap_diff, crps_gaussian, gaussian_log_score, score_series, transform_forecast,
    transform_observations, variogram_series, ForecastDistribution, TransformRow, TransformSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::common::{ensure, normal, rng, Check};

const CRPS_CASES: usize = 50;
const CRPS_SAMPLES: usize = 1_000_000;
const CRPS_SE: f64 = 3.0;
const TRANSFORM_TOL: f64 = 1e-10;
const VARIOGRAM_TOL: f64 = 1e-12;

fn crps() -> Result<String, String> {
    let mut r = rng(61);
    let mut worst = 0.0f64;
    for case in 0..CRPS_CASES {
        let mu = 2.0 * normal(&mut r);
        let sigma = r.random_range(0.2..3.0);
        let y = mu + 1.5 * sigma * normal(&mut r);
        let closed = crps_gaussian(mu, sigma, y).map_err(|e| e.to_string())?;
        // E|X − y| − ½E|X − X'| from independent pairs
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..CRPS_SAMPLES {
            let x = mu + sigma * normal(&mut r);
            let x2 = mu + sigma * normal(&mut r);
            let h = (x - y).abs() - 0.5 * (x - x2).abs();
            s += h;
            ss += h * h;
        }
        let n = CRPS_SAMPLES as f64;
        let mean = s / n;
        let se = ((ss / n - mean * mean) / (n - 1.0)).sqrt();
        let z = (closed - mean).abs() / se;
        worst = worst.max(z);
        ensure(z <= CRPS_SE, || format!("case {case}: closed {closed} vs MC {mean} ± {se}"))?;
    }
    Ok(format!("CRPS within {worst:.2} s.e. of Monte Carlo"))
}

fn variogram() -> Result<String, String> {
    let mut r = rng(62);
    let (d, n) = (5, 20);
    let mu: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut r)).collect()).collect();
    let y: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut r)).collect()).collect();
    let fc = ForecastDistribution::new("point", mu.clone(), vec![DMatrix::zeros(d, d); n])
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for p in [0.5, 1.0] {
        let got = variogram_series(&fc, &y, p, 500, 7).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mut oracle = 0.0;
            for j in 0..d {
                for k in (j + 1)..d {
                    let obs = (y[i][j] - y[i][k]).abs().powf(p);
                    let pred = (mu[i][j] - mu[i][k]).abs().powf(p);
                    oracle += (obs - pred).powi(2);
                }
            }
            let e = (got[i] - oracle).abs() / oracle.max(1.0);
            worst = worst.max(e);
            ensure(e <= VARIOGRAM_TOL, || format!("p={p} period {i}: {} vs oracle {oracle}", got[i]))?;
        }
    }
    Ok(format!("degenerate variogram matches pair oracle (max gap {worst:.0e})"))
}

fn dense_neg_log(mu: &DVector<f64>, s: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let lu = s.clone().lu();
    let r = y - mu;
    let z = lu.solve(&r).expect("non-singular");
    let k = mu.len() as f64;
    0.5 * (k * (2.0 * std::f64::consts::PI).ln() + lu.determinant().ln() + r.dot(&z))
}

fn transform() -> Result<String, String> {
    let mut r = rng(63);
    let (d, n) = (14, 12);
    let mut mu = Vec::new();
    let mut sig = Vec::new();
    for _ in 0..n {
        mu.push((0..d).map(|_| normal(&mut r)).collect::<Vec<f64>>());
        let b = DMatrix::from_fn(d, d, |_, _| normal(&mut r));
        sig.push(&b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.3);
    }
    let y: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 2.0 * normal(&mut r)).collect()).collect();
    let fc = ForecastDistribution::new("m", mu.clone(), sig.clone()).map_err(|e| e.to_string())?;
    let groups = [vec![1, 2, 3], vec![4, 5, 6], vec![7, 8], vec![9, 10, 11], vec![12, 13, 14]];
    let spec = TransformSpec {
        rows: groups
            .iter()
            .enumerate()
            .map(|(i, g)| TransformRow {
                name: format!("group {}", i + 1),
                regions: g.clone(),
                weights: Vec::new(),
            })
            .collect(),
    };
    let a = spec.matrix(d).map_err(|e| e.to_string())?;
    let tf = transform_forecast(&fc, &a).map_err(|e| e.to_string())?;
    let ty = transform_observations(&y, &a);
    let mut worst = 0.0f64;
    for i in 0..n {
        let got = gaussian_log_score(&tf.slice(i..i + 1), &ty[i..i + 1]).map_err(|e| e.to_string())?.0;
        let m = &a * DVector::from_column_slice(&mu[i]);
        let s = &a * &sig[i] * a.transpose();
        let yy = &a * DVector::from_column_slice(&y[i]);
        let oracle = dense_neg_log(&m, &s, &yy);
        let e = (got - oracle).abs();
        worst = worst.max(e);
        ensure(e < TRANSFORM_TOL, || format!("period {i}: {got} vs dense oracle {oracle}"))?;
    }
    Ok(format!("transformed log score vs dense oracle {worst:.0e}"))
}

fn bootstrap() -> Result<String, String> {
    let mut r = rng(64);
    let (d, n) = (3, 200);
    let mu: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut r)).collect()).collect();
    let y: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut r)).collect()).collect();
    let fc = ForecastDistribution::new("m", mu, vec![DMatrix::identity(d, d); n]).map_err(|e| e.to_string())?;
    let a = score_series(&fc, &y, 100, 5).map_err(|e| e.to_string())?;
    let b = score_series(&fc, &y, 100, 5).map_err(|e| e.to_string())?;
    let mut columns = 0;
    for (ca, cb) in a.columns.iter().zip(&b.columns) {
        let (Some(ca), Some(cb)) = (ca, cb) else { continue };
        let s = block_bootstrap_diff(ca, cb, 24, 500, 9).map_err(|e| e.to_string())?;
        ensure(
            s.observed == 0.0 && s.differences.iter().all(|v| *v == 0.0),
            || format!("column {columns}: non-zero bootstrap difference"),
        )?;
        columns += 1;
    }
    Ok(format!("bootstrap of identical series is zero in {columns} columns"))
}

pub fn run() -> Check {
    let parts = [crps()?, variogram()?, transform()?, bootstrap()?];
    Ok(parts.join("; "))
}
