#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use covgam::data::Covariate;
use covgam::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Half-hourly rows from 2020-01-01 with continuous covariates.
pub fn dataset(responses: Vec<Vec<f64>>, covariates: Vec<(&str, Vec<f64>)>) -> Dataset {
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let ts = (0..responses.len()).map(|i| t0 + Duration::minutes(30 * i as i64)).collect();
    let covs: BTreeMap<String, Covariate> = covariates
        .into_iter()
        .map(|(k, v)| (k.to_string(), Covariate::Continuous(v)))
        .collect();
    Dataset::new(ts, responses, covs).unwrap()
}
