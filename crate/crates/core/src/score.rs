//! Joint and marginal scoring of Gaussian forecasts, linear aggregation of
//! forecasts and block-bootstrap comparison of loss series.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{predict_means, FitState};
use crate::mcd::{self, LN_2PI};

/// Quantile levels of the two pinball columns.
pub const PINBALL_LEVELS: [f64; 2] = [0.001, 0.999];
/// Default Monte Carlo size for variogram expectations.
pub const VARIOGRAM_SAMPLES: usize = 500;
/// Column names of [`ScoreTable`].
pub const SCORE_COLUMNS: [&str; 7] = ["Log", "Log Ind", "CRPS", "Pin 001", "Pin 999", "Var 0.5", "Var 1.0"];

/// Gaussian predictive distributions, one per test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub model: String,
    #[serde(default)]
    pub train_end: Option<String>,
    pub d: usize,
    pub mu: Vec<Vec<f64>>,
    /// Row-major `d×d` covariance per period.
    pub sigma: Vec<Vec<f64>>,
    /// Set when produced by a rank-deficient transform.
    #[serde(default)]
    pub singular: bool,
}

impl ForecastDistribution {
    /// Validates shapes and symmetrises every covariance.
    pub fn new(model: &str, mu: Vec<Vec<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidInput("mean and covariance counts differ".into()));
        }
        let d = mu.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(sigma.len());
        for (m, s) in mu.iter().zip(&sigma) {
            if m.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::InvalidInput("inconsistent forecast dimensions".into()));
            }
            let s = (s + s.transpose()) * 0.5;
            let norm = s.norm();
            let min = s.clone().symmetric_eigen().eigenvalues.min();
            if min < -1e-10 * norm {
                return Err(Error::NotPositiveDefinite(format!(
                    "forecast covariance has eigenvalue {min:e}"
                )));
            }
            flat.push(s.transpose().as_slice().to_vec());
        }
        Ok(Self {
            model: model.to_string(),
            train_end: None,
            d,
            mu,
            sigma: flat,
            singular: false,
        })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn cov(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.sigma[i])
    }

    /// Periods `range` of this forecast.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            model: self.model.clone(),
            train_end: self.train_end.clone(),
            d: self.d,
            mu: self.mu[range.clone()].to_vec(),
            sigma: self.sigma[range].to_vec(),
            singular: self.singular,
        }
    }

    /// Concatenates forecasts of the same model and dimension.
    pub fn concat(parts: &[ForecastDistribution]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("no forecasts to concatenate".into()))?;
        let mut out = first.clone();
        out.train_end = None;
        for p in &parts[1..] {
            if p.d != first.d {
                return Err(Error::InvalidInput("forecast dimensions differ".into()));
            }
            out.mu.extend(p.mu.iter().cloned());
            out.sigma.extend(p.sigma.iter().cloned());
            out.singular |= p.singular;
        }
        Ok(out)
    }
}

/// Forecast from frozen mean models and a covariance model fitted to residuals.
pub fn forecast_from_states(
    model: &str,
    mean_states: &[FitState],
    cov_state: &FitState,
    data: &Dataset,
) -> Result<ForecastDistribution> {
    let mu = predict_means(mean_states, data)?;
    let eta = cov_state.predict_eta(data)?;
    let tables = cov_state.tables();
    let sigma: Vec<DMatrix<f64>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = eta.row(i).iter().copied().collect();
            Ok(mcd::eta_to_covariance(&row, &tables)?.sigma)
        })
        .collect::<Result<_>>()?;
    let mu: Vec<Vec<f64>> = (0..data.n()).map(|i| mu.row(i).iter().copied().collect()).collect();
    ForecastDistribution::new(model, mu, sigma)
}

fn check_obs(fc: &ForecastDistribution, y: &[Vec<f64>]) -> Result<()> {
    if y.len() != fc.n() || y.iter().any(|r| r.len() != fc.d) {
        return Err(Error::InvalidInput(format!(
            "observations ({} rows) do not match forecast ({} periods, d = {})",
            y.len(),
            fc.n(),
            fc.d
        )));
    }
    Ok(())
}

fn mvn_neg_log(mu: &[f64], sigma: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    let d = mu.len();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("forecast covariance is not positive definite".into()))?;
    let r = DVector::from_iterator(d, y.iter().zip(mu).map(|(a, b)| a - b));
    let z = chol.l().solve_lower_triangular(&r).expect("non-singular factor");
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * (d as f64 * LN_2PI + logdet + z.norm_squared()))
}

fn univariate_neg_log(mu: f64, var: f64, y: f64) -> Result<f64> {
    if var <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!("marginal variance {var:e}")));
    }
    Ok(0.5 * (LN_2PI + var.ln() + (y - mu).powi(2) / var))
}

/// Per-period joint and independent log scores.
pub fn log_score_series(fc: &ForecastDistribution, y: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_obs(fc, y)?;
    if fc.singular {
        return Err(Error::InvalidInput(
            "log score of a rank-deficient transform is undefined".into(),
        ));
    }
    let pairs: Vec<(f64, f64)> = (0..fc.n())
        .into_par_iter()
        .map(|i| {
            let s = fc.cov(i);
            let joint = mvn_neg_log(&fc.mu[i], &s, &y[i])?;
            let mut ind = 0.0;
            for j in 0..fc.d {
                ind += univariate_neg_log(fc.mu[i][j], s[(j, j)], y[i][j])?;
            }
            Ok((joint, ind))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Negative log-likelihood totals: joint and under independence.
pub fn gaussian_log_score(fc: &ForecastDistribution, y: &[Vec<f64>]) -> Result<(f64, f64)> {
    let (a, b) = log_score_series(fc, y)?;
    Ok((a.iter().sum(), b.iter().sum()))
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("standard deviation {sigma} must be positive")));
    }
    let n = std_normal();
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// `Φ⁻¹(F_j(y_j))` per period and component; with Gaussian margins this is
/// the standardised marginal error.
pub fn quantile_residuals(fc: &ForecastDistribution, y: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_obs(fc, y)?;
    (0..fc.n())
        .map(|i| {
            let s = fc.cov(i);
            (0..fc.d)
                .map(|j| {
                    let var = s[(j, j)];
                    if var <= 0.0 {
                        return Err(Error::InvalidInput(format!("marginal variance {var:e} must be positive")));
                    }
                    Ok((y[i][j] - fc.mu[i][j]) / var.sqrt())
                })
                .collect()
        })
        .collect()
}

/// Check-function loss of quantile `q` at level `tau`.
pub fn pinball(y: f64, q: f64, tau: f64) -> f64 {
    if y >= q {
        tau * (y - q)
    } else {
        (1.0 - tau) * (q - y)
    }
}

/// Gaussian quantile at level `tau`.
pub fn gaussian_quantile(mu: f64, sigma: f64, tau: f64) -> f64 {
    mu + sigma * std_normal().inverse_cdf(tau)
}

/// Marginal score totals; `*_period` are summed over regions, per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalScores {
    pub crps_period: Vec<f64>,
    /// One per-period series per quantile level.
    pub pinball_period: Vec<Vec<f64>>,
    pub crps_total: f64,
    pub pinball_total: Vec<f64>,
}

pub fn marginal_scores(fc: &ForecastDistribution, y: &[Vec<f64>], levels: &[f64]) -> Result<MarginalScores> {
    check_obs(fc, y)?;
    if levels.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::InvalidInput("quantile levels must lie in (0, 1)".into()));
    }
    let rows: Vec<(f64, Vec<f64>)> = (0..fc.n())
        .into_par_iter()
        .map(|i| {
            let s = fc.cov(i);
            let mut crps = 0.0;
            let mut pin = vec![0.0; levels.len()];
            for j in 0..fc.d {
                let var = s[(j, j)];
                if var <= 0.0 {
                    return Err(Error::InvalidInput(format!("marginal variance {var:e} must be positive")));
                }
                let sd = var.sqrt();
                crps += crps_gaussian(fc.mu[i][j], sd, y[i][j])?;
                for (k, &tau) in levels.iter().enumerate() {
                    pin[k] += pinball(y[i][j], gaussian_quantile(fc.mu[i][j], sd, tau), tau);
                }
            }
            Ok((crps, pin))
        })
        .collect::<Result<_>>()?;
    let (crps_period, pins): (Vec<f64>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    let pinball_period: Vec<Vec<f64>> = (0..levels.len())
        .map(|k| pins.iter().map(|p| p[k]).collect())
        .collect();
    Ok(MarginalScores {
        crps_total: crps_period.iter().sum(),
        pinball_total: pinball_period.iter().map(|s| s.iter().sum()).collect(),
        crps_period,
        pinball_period,
    })
}

fn sample_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = s.clone().cholesky() {
        return c.l();
    }
    let eig = s.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// Variogram score of one period given forecast samples.
pub fn variogram_from_samples(y: &[f64], samples: &[Vec<f64>], p: f64) -> f64 {
    let d = y.len();
    let m = samples.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        for k in (j + 1)..d {
            let expect = samples.iter().map(|x| (x[j] - x[k]).abs().powf(p)).sum::<f64>() / m;
            total += ((y[j] - y[k]).abs().powf(p) - expect).powi(2);
        }
    }
    total
}

/// Per-period variogram scores. Period `i` draws from stream `i` of a
/// generator seeded with `seed`.
pub fn variogram_series(
    fc: &ForecastDistribution,
    y: &[Vec<f64>],
    p: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_obs(fc, y)?;
    if p <= 0.0 || n_samples == 0 {
        return Err(Error::InvalidInput("variogram needs p > 0 and at least one sample".into()));
    }
    Ok((0..fc.n())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let l = sample_factor(&fc.cov(i));
            let mu = DVector::from_column_slice(&fc.mu[i]);
            let samples: Vec<Vec<f64>> = (0..n_samples)
                .map(|_| {
                    let z = DVector::from_iterator(fc.d, (0..fc.d).map(|_| rng.sample::<f64, _>(StandardNormal)));
                    (&mu + &l * z).iter().copied().collect()
                })
                .collect();
            variogram_from_samples(&y[i], &samples, p)
        })
        .collect())
}

pub fn variogram_score(fc: &ForecastDistribution, y: &[Vec<f64>], p: f64, n_samples: usize, seed: u64) -> Result<f64> {
    Ok(variogram_series(fc, y, p, n_samples, seed)?.iter().sum())
}

/// Named row of an aggregation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRow {
    pub name: String,
    /// One-based regions summed with unit weight.
    #[serde(default)]
    pub regions: Vec<usize>,
    /// Signed `(region, weight)` terms added to the row.
    #[serde(default)]
    pub weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub rows: Vec<TransformRow>,
}

impl TransformSpec {
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn names(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.name.clone()).collect()
    }

    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        let mut a = DMatrix::zeros(self.rows.len(), d);
        for (i, row) in self.rows.iter().enumerate() {
            let terms = row.regions.iter().map(|&g| (g, 1.0)).chain(row.weights.iter().copied());
            for (g, w) in terms {
                if g == 0 || g > d {
                    return Err(Error::InvalidInput(format!(
                        "transform row '{}' refers to region {g} outside 1..={d}",
                        row.name
                    )));
                }
                a[(i, g - 1)] += w;
            }
        }
        Ok(a)
    }
}

/// `(Aμ, AΣAᵀ)` per period; rank deficiency of `A` marks the result singular.
pub fn transform_forecast(fc: &ForecastDistribution, a: &DMatrix<f64>) -> Result<ForecastDistribution> {
    if a.ncols() != fc.d || a.nrows() == 0 {
        return Err(Error::InvalidInput(format!(
            "transform has shape {}×{}, forecast d = {}",
            a.nrows(),
            a.ncols(),
            fc.d
        )));
    }
    let m = a.nrows();
    let rank = a.clone().svd(false, false).rank(1e-10 * a.norm().max(1.0));
    let mut mu = Vec::with_capacity(fc.n());
    let mut sigma = Vec::with_capacity(fc.n());
    for i in 0..fc.n() {
        mu.push((a * DVector::from_column_slice(&fc.mu[i])).iter().copied().collect());
        let s = a * fc.cov(i) * a.transpose();
        let s = (&s + s.transpose()) * 0.5;
        sigma.push(s.transpose().as_slice().to_vec());
    }
    Ok(ForecastDistribution {
        model: fc.model.clone(),
        train_end: fc.train_end.clone(),
        d: m,
        mu,
        sigma,
        singular: fc.singular || rank < m,
    })
}

/// Applies `a` to observation rows.
pub fn transform_observations(y: &[Vec<f64>], a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    y.iter()
        .map(|r| (a * DVector::from_column_slice(r)).iter().copied().collect())
        .collect()
}

/// Per-period losses behind every column of a [`ScoreTable`] row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub model: String,
    /// Columns in [`SCORE_COLUMNS`] order; `None` when undefined.
    pub columns: Vec<Option<Vec<f64>>>,
}

/// One model's averages per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub n: usize,
    /// Means per period in [`SCORE_COLUMNS`] order; `None` when undefined.
    pub means: Vec<Option<f64>>,
    /// Totals over periods in [`SCORE_COLUMNS`] order.
    pub totals: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub regions: Vec<String>,
    pub variogram_samples: usize,
    pub variogram_seed: u64,
    pub variogram_weights: String,
    pub marginal_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub meta: ScoreMeta,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(regions: Vec<String>, n_samples: usize, seed: u64) -> Self {
        Self {
            meta: ScoreMeta {
                regions,
                variogram_samples: n_samples,
                variogram_seed: seed,
                variogram_weights: "unit weights, unordered pairs".into(),
                marginal_convention: "per-period sum over regions, averaged over periods".into(),
            },
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in SCORE_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.model);
            for v in &r.means {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:?}"));
                } else {
                    out.push_str("NA");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Every score column per period; log scores are skipped for singular forecasts.
pub fn score_series(fc: &ForecastDistribution, y: &[Vec<f64>], n_samples: usize, seed: u64) -> Result<ScoreSeries> {
    check_obs(fc, y)?;
    let (log, log_ind) = if fc.singular {
        (None, None)
    } else {
        let (a, b) = log_score_series(fc, y)?;
        (Some(a), Some(b))
    };
    let m = marginal_scores(fc, y, &PINBALL_LEVELS)?;
    let v05 = variogram_series(fc, y, 0.5, n_samples, seed)?;
    let v10 = variogram_series(fc, y, 1.0, n_samples, seed)?;
    let mut pins = m.pinball_period.into_iter();
    Ok(ScoreSeries {
        model: fc.model.clone(),
        columns: vec![
            log,
            log_ind,
            Some(m.crps_period),
            pins.next(),
            pins.next(),
            Some(v05),
            Some(v10),
        ],
    })
}

impl ScoreSeries {
    pub fn row(&self) -> ScoreRow {
        let n = self
            .columns
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        let totals: Vec<Option<f64>> = self
            .columns
            .iter()
            .map(|c| c.as_ref().map(|s| s.iter().sum()))
            .collect();
        ScoreRow {
            model: self.model.clone(),
            n,
            means: totals.iter().map(|t| t.map(|v| v / n as f64)).collect(),
            totals,
        }
    }
}

/// Summary of bootstrapped mean differences `mean(a − b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub block_len: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub observed: f64,
    pub differences: Vec<f64>,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= s.len() {
        s[s.len() - 1]
    } else {
        s[lo] + frac * (s[lo + 1] - s[lo])
    }
}

/// Moving-block bootstrap of the mean loss difference. Replicate `b` draws
/// from stream `b` of a generator seeded with `seed`.
pub fn block_bootstrap_diff(
    a: &[f64],
    b: &[f64],
    block_len: usize,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::InvalidInput("loss series lengths differ".into()));
    }
    if block_len == 0 || block_len > n {
        return Err(Error::InvalidInput(format!(
            "block length {block_len} must lie in 1..={n}"
        )));
    }
    if n_boot == 0 {
        return Err(Error::InvalidInput("need at least one bootstrap replicate".into()));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diff.iter().sum::<f64>() / n as f64;
    let n_start = n - block_len + 1;
    let differences: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut sum = 0.0;
            let mut taken = 0;
            while taken < n {
                let start = rng.random_range(0..n_start);
                let len = block_len.min(n - taken);
                sum += diff[start..start + len].iter().sum::<f64>();
                taken += len;
            }
            sum / n as f64
        })
        .collect();
    let mut sorted = differences.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite losses"));
    Ok(BootstrapSummary {
        block_len,
        n_boot,
        seed,
        observed,
        q025: quantile_sorted(&sorted, 0.025),
        q500: quantile_sorted(&sorted, 0.5),
        q975: quantile_sorted(&sorted, 0.975),
        differences,
    })
}
