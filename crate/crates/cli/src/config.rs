//! Run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, NaiveTime, Utc};
use covgam::basis::{EffectSpec, Transform};
use covgam::data::BlockUnit;
use covgam::select::{BoostConfig, Restriction};
use covgam::{FitOptions, SyntheticScenario};
use serde::{Deserialize, Serialize};

const BUNDLED_SCENARIO: &str = include_str!("../data/scenario.json");

fn d_validation_days() -> i64 {
    7
}
fn d_test_fraction() -> f64 {
    0.3
}
fn d_block_len() -> usize {
    336
}
fn d_n_boot() -> usize {
    2000
}
fn d_samples() -> usize {
    covgam::score::VARIOGRAM_SAMPLES
}
fn d_bins() -> usize {
    20
}
fn d_seed() -> u64 {
    2018
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AleRequest {
    pub covariate: String,
    /// `sigma:l:m`, `corr:l:m`, `d:k` or `t:row:col` (one-based).
    pub output: String,
    #[serde(default = "d_bins")]
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    #[serde(default = "d_block_len")]
    pub block_len: usize,
    #[serde(default = "d_n_boot")]
    pub n_boot: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            block_len: d_block_len(),
            n_boot: d_n_boot(),
        }
    }
}

/// Everything a run depends on. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Synthetic scenario for `synth`; the bundled one when absent.
    #[serde(default)]
    pub scenario: Option<SyntheticScenario>,
    /// Input CSV; `<out>/data.csv` when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Schema sidecar; `<out>/schema.json` when absent.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Start of the first forecast block.
    #[serde(default)]
    pub test_start: Option<DateTime<Utc>>,
    /// Share of days held out for forecasting when `test_start` is absent.
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub block: Option<BlockUnit>,
    /// Trailing days of the pre-test data used for validation in `select`.
    #[serde(default = "d_validation_days")]
    pub validation_days: i64,
    /// Mean-model effects; `{g}` in covariate names becomes the region index.
    #[serde(default)]
    pub mean_effects: Option<Vec<EffectSpec>>,
    #[serde(default)]
    pub boost: BoostConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default = "d_samples")]
    pub variogram_samples: usize,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub ale: Vec<AleRequest>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialise")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<(Self, PathBuf)> {
        match path {
            None => Ok((Self::default(), PathBuf::from("."))),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| covgam::Error::InvalidInput(format!("config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok((cfg, base))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!(covgam::Error::InvalidInput("test_fraction must lie in (0, 1)".into()));
        }
        if self.validation_days < 1 {
            bail!(covgam::Error::InvalidInput("validation_days must be positive".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<SyntheticScenario> {
        let mut sc = match &self.scenario {
            Some(s) => s.clone(),
            None => serde_json::from_str(BUNDLED_SCENARIO).context("bundled scenario")?,
        };
        sc.seed = self.seed;
        Ok(sc)
    }

    pub fn restriction(&self) -> Restriction {
        self.boost.restriction
    }

    /// Mean effects for region `g` (one-based).
    pub fn mean_effects(&self, g: usize) -> Result<Vec<EffectSpec>> {
        let templates = match &self.mean_effects {
            Some(t) => t.clone(),
            None => default_mean_effects(),
        };
        let text = serde_json::to_string(&templates)?.replace("{g}", &g.to_string());
        Ok(serde_json::from_str(&text)?)
    }

    /// First forecast instant: configured, or the midnight leaving
    /// `test_fraction` of the days for testing.
    pub fn test_start(&self, first: DateTime<Utc>, last: DateTime<Utc>) -> DateTime<Utc> {
        if let Some(t) = self.test_start {
            return t;
        }
        let day0 = first.date_naive().and_time(NaiveTime::MIN).and_utc();
        let days = (last - day0).num_days() + 1;
        let train_days = ((days as f64) * (1.0 - self.test_fraction)).round().max(1.0) as i64;
        day0 + Duration::days(train_days)
    }

    /// Weekly blocks for data spanning under a year, monthly otherwise.
    pub fn block(&self, first: DateTime<Utc>, last: DateTime<Utc>) -> BlockUnit {
        self.block.unwrap_or(if (last - first).num_days() < 365 {
            BlockUnit::Week
        } else {
            BlockUnit::Month
        })
    }

    pub fn hash(&self) -> String {
        covgam::digest::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

pub fn default_mean_effects() -> Vec<EffectSpec> {
    vec![
        EffectSpec::intercept(),
        EffectSpec::trend("t"),
        EffectSpec::factor("dow", false),
        EffectSpec::cr("tod", 10),
        EffectSpec::cr("n2ex", 5),
        EffectSpec::cr("temp_{g}", 5),
        EffectSpec::cr("rain_{g}", 5).with_transform(Transform::Sqrt),
        EffectSpec::varying("wsp100_{g}", "wcap", 5),
        EffectSpec::cr("irr_{g}", 5),
    ]
}
