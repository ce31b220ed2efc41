//! Gaussian location-scale margins joined by a static Gaussian copula.

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{ModelSpec, PredictorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{fit_model, predict_means, residual_dataset, FitOptions, FitState};
use crate::score::ForecastDistribution;

/// Bounds applied to probability integral transforms.
pub const PIT_CLAMP: f64 = 1e-12;
/// Eigenvalue floor for the copula correlation.
pub const RHO_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub mean_states: Vec<FitState>,
    /// `d = 1` models of each region's residuals (mean fixed at zero).
    pub scale_states: Vec<FitState>,
    /// Row-major `d×d` correlation of the normal scores.
    pub rho: Vec<f64>,
    pub clamped: usize,
}

impl CopulaModel {
    pub fn d(&self) -> usize {
        self.scale_states.len()
    }

    pub fn rho_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d(), self.d(), &self.rho)
    }

    /// Marginal standard deviations (`n×d`).
    pub fn marginal_sd(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let d = self.d();
        let mut out = DMatrix::zeros(data.n(), d);
        for j in 0..d {
            let eta = self.scale_states[j].predict_eta(&data.single_response(j))?;
            for i in 0..data.n() {
                out[(i, j)] = (0.5 * eta[(i, 1)]).exp();
            }
        }
        Ok(out)
    }
}

/// `d = 1` scale spec of region `j` (zero-based) taken from the `D` rows of `scale`.
pub fn marginal_spec(scale: &ModelSpec, j: usize) -> Result<ModelSpec> {
    if j >= scale.d {
        return Err(Error::InvalidInput(format!("region {j} outside d = {}", scale.d)));
    }
    let src = scale.predictor(scale.d + j);
    Ok(ModelSpec {
        d: 1,
        predictors: vec![PredictorSpec {
            index: 2,
            offset: src.map_or(0.0, |p| p.offset),
            effects: src.map_or_else(Vec::new, |p| p.effects.clone()),
        }],
    })
}

/// Symmetric, unit-diagonal correlation with eigenvalues floored at [`RHO_FLOOR`].
pub fn floor_correlation(r: &DMatrix<f64>) -> DMatrix<f64> {
    let d = r.nrows();
    let sym = (r + r.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(RHO_FLOOR));
    let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let s: Vec<f64> = (0..d).map(|i| m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(d, d, |i, k| if i == k { 1.0 } else { m[(i, k)] / (s[i] * s[k]) })
}

/// Normal scores of the residuals under the fitted margins, with the clamp count.
pub fn normal_scores(residuals: &Dataset, scale_states: &[FitState]) -> Result<(DMatrix<f64>, usize)> {
    let n = residuals.n();
    let std = Normal::new(0.0, 1.0).expect("valid standard normal");
    let mut z = DMatrix::zeros(n, scale_states.len());
    let mut clamped = 0;
    for (j, st) in scale_states.iter().enumerate() {
        let eta = st.predict_eta(&residuals.single_response(j))?;
        for i in 0..n {
            let mu = eta[(i, 0)];
            let sd = (0.5 * eta[(i, 1)]).exp();
            let u = std.cdf((residuals.response(i)[j] - mu) / sd);
            let uc = u.clamp(PIT_CLAMP, 1.0 - PIT_CLAMP);
            if uc != u {
                clamped += 1;
            }
            z[(i, j)] = std.inverse_cdf(uc);
        }
    }
    Ok((z, clamped))
}

fn empirical_correlation(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows() as f64;
    let d = z.ncols();
    let means: Vec<f64> = (0..d).map(|j| z.column(j).sum() / n).collect();
    let mut c = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..z.nrows())
                .map(|i| (z[(i, a)] - means[a]) * (z[(i, b)] - means[b]))
                .sum();
            c[(a, b)] = s;
            c[(b, a)] = s;
        }
    }
    DMatrix::from_fn(d, d, |a, b| c[(a, b)] / (c[(a, a)] * c[(b, b)]).sqrt())
}

/// Fits scale margins on the training residuals and the copula correlation.
pub fn fit_copula_baseline(
    train: &Dataset,
    mean_states: &[FitState],
    scale: &ModelSpec,
    opts: &FitOptions,
) -> Result<CopulaModel> {
    let d = train.d();
    if mean_states.len() != d || scale.d != d {
        return Err(Error::InvalidInput(format!(
            "need {d} mean states and a d = {d} scale spec"
        )));
    }
    let residuals = residual_dataset(mean_states, train)?;
    let scale_states: Vec<FitState> = (0..d)
        .into_par_iter()
        .map(|j| fit_model(&marginal_spec(scale, j)?, &residuals.single_response(j), opts))
        .collect::<Result<_>>()?;
    let (z, clamped) = normal_scores(&residuals, &scale_states)?;
    if clamped > 0 {
        info!("{clamped} probability integral transforms clamped");
    }
    let rho = floor_correlation(&empirical_correlation(&z));
    Ok(CopulaModel {
        mean_states: mean_states.to_vec(),
        scale_states,
        rho: rho.transpose().as_slice().to_vec(),
        clamped,
    })
}

/// `N(μ, SρS)` per period.
pub fn copula_forecast(model: &CopulaModel, data: &Dataset) -> Result<ForecastDistribution> {
    let mu = predict_means(&model.mean_states, data)?;
    let sd = model.marginal_sd(data)?;
    let rho = model.rho_matrix();
    let d = model.d();
    let sigma: Vec<DMatrix<f64>> = (0..data.n())
        .map(|i| DMatrix::from_fn(d, d, |a, b| sd[(i, a)] * rho[(a, b)] * sd[(i, b)]))
        .collect();
    let mu = (0..data.n()).map(|i| mu.row(i).iter().copied().collect()).collect();
    ForecastDistribution::new("gaulss+cop", mu, sigma)
}
