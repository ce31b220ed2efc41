use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use covgam::data::Covariate;
use covgam::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Detail line on success, reason on failure.
pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `max|a - b| / max|b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Half-hourly timestamps from 2020-01-01.
pub fn dataset(responses: Vec<Vec<f64>>, covariates: Vec<(&str, Vec<f64>)>) -> Dataset {
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let ts = (0..responses.len()).map(|i| t0 + Duration::minutes(30 * i as i64)).collect();
    let covs: BTreeMap<String, Covariate> = covariates
        .into_iter()
        .map(|(k, v)| (k.to_string(), Covariate::Continuous(v)))
        .collect();
    Dataset::new(ts, responses, covs).expect("valid dataset")
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
