//! Multivariate Gaussian additive models whose mean vector and
//! modified-Cholesky-parametrised covariance matrix depend on covariates
//! through penalised additive predictors.

#![allow(clippy::needless_range_loop)]

pub mod ale;
pub mod basis;
pub mod baseline;
pub mod data;
pub mod digest;
pub mod error;
pub mod fit;
pub mod mcd;
pub mod score;
pub mod select;

pub use ale::{ale_estimate, ale_variance, AleCurve, AleOutput};
pub use baseline::{copula_forecast, fit_copula_baseline, CopulaModel};
pub use basis::{assemble_design, DesignAssembly, EffectSpec, ModelRecipe, ModelSpec, PredictorSpec};
pub use data::{Dataset, Schema, SyntheticScenario};
pub use error::{Error, Result};
pub use fit::{fit_model, FitOptions, FitState};
pub use mcd::McdIndexTables;
pub use score::{ForecastDistribution, ScoreTable};
pub use select::{BoostConfig, RankedEffects, Restriction};
