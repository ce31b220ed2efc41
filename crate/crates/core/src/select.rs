//! Component-wise gradient boosting over candidate effect–predictor pairs for
//! the covariance predictors, with the stopping iteration and the number of
//! retained effects chosen on validation data.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    build_effect, calibrate_edf, edf, EffectBlock, EffectRecipe, EffectSpec, ModelSpec, PredictorSpec,
    Transform,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fit::{fit_model, FitOptions, FitState};
use crate::mcd::{self, covariance_to_eta, McdIndexTables, PredictorRole, LN_2PI};

/// Candidate pools corresponding to the model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Restriction {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "cal")]
    Cal,
    #[serde(rename = "cal+ren")]
    CalRen,
    /// `cal+ren` candidates on the diagonal of `D` only.
    #[serde(rename = "diag")]
    Diag,
}

impl Restriction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "cal" => Ok(Self::Cal),
            "cal+ren" => Ok(Self::CalRen),
            "diag" => Ok(Self::Diag),
            other => Err(Error::InvalidInput(format!(
                "unknown restriction '{other}' (expected full, cal, cal+ren or diag)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Cal => "cal",
            Self::CalRen => "cal+ren",
            Self::Diag => "diag",
        }
    }

    /// Model label used in score tables.
    pub fn model_name(&self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::Cal => "Cal",
            Self::CalRen => "Cal+Ren",
            Self::Diag => "Cal+Ren Diag",
        }
    }

    /// Highest one-based catalogue index allowed.
    pub fn max_effect(&self) -> usize {
        match self {
            Self::Full => 9,
            Self::Cal => 4,
            Self::CalRen | Self::Diag => 6,
        }
    }
}

/// Catalogue indices whose effect reads a weather covariate.
pub const WEATHER_EFFECTS: [usize; 4] = [5, 6, 7, 8];

fn d_m() -> usize {
    3000
}
fn d_nu() -> f64 {
    0.1
}
fn d_edf() -> f64 {
    4.0
}
fn d_k_cal() -> usize {
    10
}
fn d_k_w() -> usize {
    5
}
fn d_grid() -> Vec<usize> {
    (0..=20).map(|i| 5 * i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default = "d_edf")]
    pub target_edf: f64,
    #[serde(default)]
    pub restriction: Restriction,
    /// Hold every `T` predictor at zero and model only `D` (marginal scale selection).
    #[serde(default)]
    pub zero_t: bool,
    /// Basis dimension of the day-of-year and time-of-day candidates.
    #[serde(default = "d_k_cal")]
    pub k_calendar: usize,
    /// Basis dimension of the weather and price candidates.
    #[serde(default = "d_k_w")]
    pub k_weather: usize,
    /// Candidate values of the number of retained effects.
    #[serde(default = "d_grid")]
    pub l_grid: Vec<usize>,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            m: d_m(),
            nu: d_nu(),
            target_edf: d_edf(),
            restriction: Restriction::Full,
            zero_t: false,
            k_calendar: d_k_cal(),
            k_weather: d_k_w(),
            l_grid: d_grid(),
        }
    }
}

impl BoostConfig {
    fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidInput(format!("learning rate {} outside (0, 1]", self.nu)));
        }
        if self.l_grid.first() != Some(&0) || self.l_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("L grid must be ascending and start at 0".into()));
        }
        Ok(())
    }

    /// Zero-based predictors open to boosting.
    pub fn active_predictors(&self, d: usize) -> Vec<usize> {
        let q = mcd::n_predictors(d);
        let diag_only = self.zero_t || self.restriction == Restriction::Diag;
        (d..q).filter(|&j| !diag_only || j < 2 * d).collect()
    }

    /// Candidate effect for zero-based predictor `j` and one-based catalogue index `r`.
    pub fn candidate_spec(&self, tables: &McdIndexTables, j: usize, r: usize) -> EffectSpec {
        let g = tables.role(j).region() + 1;
        let kc = self.k_calendar;
        let kw = self.k_weather;
        match r {
            1 => EffectSpec::trend("t"),
            2 => EffectSpec::factor("dow", true),
            3 => EffectSpec::cr("doy", kc),
            4 => EffectSpec::cr("tod", kc),
            5 => EffectSpec::varying(&format!("wsp100_{g}"), "wcap", kw),
            6 => EffectSpec::cr(&format!("irr_{g}"), kw),
            7 => EffectSpec::cr(&format!("temp_{g}"), kw),
            8 => EffectSpec::cr(&format!("rain_{g}"), kw).with_transform(Transform::Sqrt),
            9 => EffectSpec::cr("n2ex", kw),
            _ => panic!("catalogue index {r} outside 1..=9"),
        }
    }

    /// `𝓡_j` for every active predictor (zero-based keys, one-based indices).
    pub fn candidate_map(&self, d: usize) -> BTreeMap<usize, Vec<usize>> {
        self.active_predictors(d)
            .into_iter()
            .map(|j| (j, (1..=self.restriction.max_effect()).collect()))
            .collect()
    }
}

/// Calibrated candidate effect–predictor pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    /// One-based predictor index.
    pub j: usize,
    pub r: usize,
    pub label: String,
    pub p: usize,
    /// Penalty multiplier (zero for unpenalised fits).
    pub zeta: f64,
    pub edf: f64,
}

/// One committed boosting update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStep {
    pub iteration: usize,
    /// One-based predictor index.
    pub j: usize,
    pub r: usize,
    pub delta: f64,
    /// Coefficients of the fitted gradient, before scaling by `nu`.
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub j: usize,
    pub r: usize,
    pub label: String,
    pub gain: f64,
}

/// Boosting output: metadata, trace and the gain ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEffects {
    pub d: usize,
    pub nu: f64,
    pub target_edf: f64,
    pub m: usize,
    pub restriction: Restriction,
    pub zero_t: bool,
    /// Fixed offsets `η̄` for all `q` predictors.
    pub offsets: Vec<f64>,
    pub candidates: Vec<CandidateInfo>,
    pub recipes: Vec<EffectRecipe>,
    pub trace: Vec<BoostStep>,
    /// Iteration at which no candidate improved the fit, if any.
    pub early_stop: Option<usize>,
    pub m_star: Option<usize>,
    pub validation_loglik: Vec<f64>,
    pub ranking: Vec<RankedPair>,
}

impl RankedEffects {
    fn candidate_index(&self, j: usize, r: usize) -> usize {
        self.candidates
            .iter()
            .position(|c| c.j == j && c.r == r)
            .expect("trace refers to a known candidate")
    }

    /// Pairs ordered by cumulative gain over the first `steps` iterations.
    pub fn rank(&self, steps: usize) -> Vec<RankedPair> {
        let mut gains: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for s in self.trace.iter().take(steps) {
            *gains.entry((s.j, s.r)).or_default() += s.delta;
        }
        let mut out: Vec<RankedPair> = gains
            .into_iter()
            .map(|((j, r), gain)| RankedPair {
                j,
                r,
                label: self.candidates[self.candidate_index(j, r)].label.clone(),
                gain,
            })
            .collect();
        out.sort_by(|a, b| {
            b.gain
                .partial_cmp(&a.gain)
                .expect("finite gains")
                .then(a.j.cmp(&b.j))
                .then(a.r.cmp(&b.r))
        });
        out
    }

    /// Trace as CSV (`iteration,j,r,delta,cumulative`).
    pub fn trace_csv(&self) -> String {
        let mut cum: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut out = String::from("iteration,j,r,delta,cumulative\n");
        for s in &self.trace {
            let c = cum.entry((s.j, s.r)).or_default();
            *c += s.delta;
            out.push_str(&format!("{},{},{},{:?},{:?}\n", s.iteration, s.j, s.r, s.delta, c));
        }
        out
    }

    /// Model spec with the top-`l` ranked pairs on top of intercepts and offsets.
    pub fn spec_with(&self, l: usize) -> ModelSpec {
        let d = self.d;
        let tables = McdIndexTables::new(d);
        let mut spec = ModelSpec { d, predictors: Vec::new() };
        for j in d..tables.q {
            let fixed_zero = self.zero_t && matches!(tables.role(j), PredictorRole::T { .. });
            if fixed_zero {
                continue;
            }
            spec.predictors.push(PredictorSpec {
                index: j + 1,
                offset: self.offsets[j],
                effects: vec![EffectSpec::intercept()],
            });
        }
        for pair in self.ranking.iter().take(l) {
            let c = self.candidate_index(pair.j, pair.r);
            spec.predictor_mut(pair.j - 1).effects.push(self.recipes[c].spec.clone());
        }
        spec
    }
}

/// `η̄`: MCD of the empirical residual covariance (zero `T` in `zero_t` mode).
pub fn residual_offsets(residuals: &Dataset, zero_t: bool) -> Result<Vec<f64>> {
    let d = residuals.d();
    let n = residuals.n() as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..residuals.n() {
        let r = DVector::from_column_slice(residuals.response(i));
        cov += &r * r.transpose();
    }
    cov /= n;
    if zero_t {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    let mut eta = vec![0.0; d];
    eta.extend(covariance_to_eta(&cov)?);
    Ok(eta)
}

struct Prepared {
    info: CandidateInfo,
    block: EffectBlock,
    // (XᵀX + ζS)⁻¹
    solve: DMatrix<f64>,
    pred: usize,
}

fn prepare(config: &BoostConfig, data: &Dataset) -> Result<Vec<Prepared>> {
    let d = data.d();
    let tables = McdIndexTables::new(d);
    let mut cache: BTreeMap<String, Option<(EffectBlock, f64, f64)>> = BTreeMap::new();
    let mut out = Vec::new();
    for (j, rs) in config.candidate_map(d) {
        for r in rs {
            let spec = config.candidate_spec(&tables, j, r);
            let key = spec.label();
            if !cache.contains_key(&key) {
                let entry = match build_effect(&spec, data) {
                    Ok(block) => {
                        let p = block.p() as f64;
                        let zeta = if block.rank > 0 && p > config.target_edf {
                            calibrate_edf(&block, config.target_edf)?
                        } else {
                            0.0
                        };
                        let e = if block.rank > 0 { edf(&block, zeta)? } else { p };
                        Some((block, zeta, e))
                    }
                    Err(Error::Basis(msg)) => {
                        warn!("candidate {key} dropped: {msg}");
                        None
                    }
                    Err(e) => return Err(e),
                };
                cache.insert(key.clone(), entry);
            }
            let Some((block, zeta, e)) = cache[&key].clone() else {
                continue;
            };
            let x = &block.design;
            let mut a = x.transpose() * x;
            if zeta > 0.0 {
                a += block.total_penalty() * zeta;
            }
            let chol = crate::fit::ridged_cholesky(&a, 1e-10)?.0;
            out.push(Prepared {
                info: CandidateInfo {
                    j: j + 1,
                    r,
                    label: key,
                    p: block.p(),
                    zeta,
                    edf: e,
                },
                solve: chol.inverse(),
                block,
                pred: j,
            });
        }
    }
    Ok(out)
}

/// Per-observation MCD terms for predictors that only move `D` or `T`: the
/// residuals `r = y − μ`, `e = T r` and `log D²`, all `n×d` row-major.
struct McdTerms {
    d: usize,
    r: Vec<f64>,
    e: Vec<f64>,
    logd2: Vec<f64>,
}

impl McdTerms {
    fn new(data: &Dataset, offsets: &[f64], tables: &McdIndexTables) -> Self {
        let d = tables.d;
        let n = data.n();
        let t = mcd::t_matrix(offsets, tables);
        let mut r = Vec::with_capacity(n * d);
        let mut e = Vec::with_capacity(n * d);
        let mut logd2 = Vec::with_capacity(n * d);
        for i in 0..n {
            let y = data.response(i);
            let ri: Vec<f64> = (0..d).map(|k| y[k] - offsets[k]).collect();
            for a in 0..d {
                e.push((0..=a).map(|b| t[(a, b)] * ri[b]).sum());
                logd2.push(offsets[d + a]);
            }
            r.extend(ri);
        }
        Self { d, r, e, logd2 }
    }

    fn n(&self) -> usize {
        self.r.len() / self.d
    }

    fn term(e: f64, logd2: f64) -> f64 {
        -0.5 * (LN_2PI + logd2 + e * e * (-logd2).exp())
    }

    fn loglik(&self, i: usize) -> f64 {
        let d = self.d;
        (0..d).map(|k| Self::term(self.e[i * d + k], self.logd2[i * d + k])).sum()
    }

    fn total(&self) -> f64 {
        (0..self.n()).map(|i| self.loglik(i)).sum()
    }

    /// `∂ℓ_i/∂η_j` for covariance predictor `j`.
    fn gradient(&self, role: PredictorRole) -> DVector<f64> {
        let d = self.d;
        match role {
            PredictorRole::LogD2(k) => DVector::from_iterator(
                self.n(),
                (0..self.n()).map(|i| {
                    let e = self.e[i * d + k];
                    -0.5 * (1.0 - e * e * (-self.logd2[i * d + k]).exp())
                }),
            ),
            PredictorRole::T { row, col } => DVector::from_iterator(
                self.n(),
                (0..self.n()).map(|i| {
                    -self.e[i * d + row] * self.r[i * d + col] * (-self.logd2[i * d + row]).exp()
                }),
            ),
            PredictorRole::Mean(_) => unreachable!("mean predictors are frozen"),
        }
    }

    /// Log-likelihood change from adding `step` to predictor `role`.
    fn delta(&self, role: PredictorRole, step: &DVector<f64>) -> f64 {
        let d = self.d;
        let mut out = 0.0;
        match role {
            PredictorRole::LogD2(k) => {
                for i in 0..self.n() {
                    let e = self.e[i * d + k];
                    let l = self.logd2[i * d + k];
                    out += Self::term(e, l + step[i]) - Self::term(e, l);
                }
            }
            PredictorRole::T { row, col } => {
                for i in 0..self.n() {
                    let e = self.e[i * d + row];
                    let e2 = e + step[i] * self.r[i * d + col];
                    out -= 0.5 * (e2 * e2 - e * e) * (-self.logd2[i * d + row]).exp();
                }
            }
            PredictorRole::Mean(_) => unreachable!("mean predictors are frozen"),
        }
        out
    }

    fn apply(&mut self, role: PredictorRole, step: &DVector<f64>) {
        let d = self.d;
        match role {
            PredictorRole::LogD2(k) => {
                for i in 0..self.n() {
                    self.logd2[i * d + k] += step[i];
                }
            }
            PredictorRole::T { row, col } => {
                for i in 0..self.n() {
                    self.e[i * d + row] += step[i] * self.r[i * d + col];
                }
            }
            PredictorRole::Mean(_) => unreachable!("mean predictors are frozen"),
        }
    }
}

/// Runs `config.m` boosting iterations on residuals with mean predictors frozen
/// at their offsets and covariance predictors starting from `offsets`.
pub fn boost_rank(residuals: &Dataset, offsets: &[f64], config: &BoostConfig) -> Result<RankedEffects> {
    config.validate()?;
    let d = residuals.d();
    let tables = McdIndexTables::new(d);
    let q = tables.q;
    if offsets.len() != q || offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("need {q} finite offsets, got {}", offsets.len())));
    }
    let prepared = prepare(config, residuals)?;
    let mut terms = McdTerms::new(residuals, offsets, &tables);
    let mut trace = Vec::new();
    let mut early_stop = None;
    for it in 0..config.m {
        let grads: BTreeMap<usize, DVector<f64>> = config
            .active_predictors(d)
            .into_iter()
            .map(|j| (j, terms.gradient(tables.role(j))))
            .collect();
        let evals: Vec<(f64, DVector<f64>, DVector<f64>)> = prepared
            .par_iter()
            .map(|c| {
                let x = &c.block.design;
                let coef = &c.solve * x.tr_mul(&grads[&c.pred]);
                let step = (x * &coef) * config.nu;
                (terms.delta(tables.role(c.pred), &step), coef, step)
            })
            .collect();
        let mut best: Option<usize> = None;
        for (k, (delta, _, _)) in evals.iter().enumerate() {
            if delta.is_finite() && best.is_none_or(|b| *delta > evals[b].0) {
                best = Some(k);
            }
        }
        let Some(b) = best.filter(|&b| evals[b].0 > 0.0) else {
            early_stop = Some(it);
            break;
        };
        let c = &prepared[b];
        let (delta, coef, step) = &evals[b];
        terms.apply(tables.role(c.pred), step);
        trace.push(BoostStep {
            iteration: it + 1,
            j: c.info.j,
            r: c.info.r,
            delta: *delta,
            coef: coef.iter().copied().collect(),
        });
    }
    let mut ranked = RankedEffects {
        d,
        nu: config.nu,
        target_edf: config.target_edf,
        m: config.m,
        restriction: config.restriction,
        zero_t: config.zero_t,
        offsets: offsets.to_vec(),
        candidates: prepared.iter().map(|c| c.info.clone()).collect(),
        recipes: prepared.iter().map(|c| c.block.recipe.clone()).collect(),
        trace,
        early_stop,
        m_star: None,
        validation_loglik: Vec::new(),
        ranking: Vec::new(),
    };
    ranked.ranking = ranked.rank(ranked.trace.len());
    Ok(ranked)
}

/// Replays the trace on validation residuals and returns the iteration with
/// the highest validation log-likelihood (smallest on ties) and the path.
pub fn choose_m_star(ranked: &RankedEffects, valid: &Dataset) -> Result<(usize, Vec<f64>)> {
    let d = ranked.d;
    if valid.d() != d {
        return Err(Error::InvalidInput("validation data dimension mismatch".into()));
    }
    let tables = McdIndexTables::new(d);
    let designs: Vec<DMatrix<f64>> = ranked
        .recipes
        .iter()
        .map(|r| r.design(valid))
        .collect::<Result<_>>()?;
    let mut terms = McdTerms::new(valid, &ranked.offsets, &tables);
    let mut path = vec![terms.total()];
    for step in &ranked.trace {
        let c = ranked.candidate_index(step.j, step.r);
        let upd = (&designs[c] * DVector::from_column_slice(&step.coef)) * ranked.nu;
        terms.apply(tables.role(step.j - 1), &upd);
        path.push(terms.total());
    }
    let mut best = 0;
    for (t, v) in path.iter().enumerate() {
        if *v > path[best] {
            best = t;
        }
    }
    Ok((best, path))
}

/// Records `M*` and re-ranks by the gains accumulated up to it.
pub fn apply_m_star(ranked: &mut RankedEffects, valid: &Dataset) -> Result<usize> {
    let (m_star, path) = choose_m_star(ranked, valid)?;
    ranked.m_star = Some(m_star);
    ranked.validation_loglik = path;
    ranked.ranking = ranked.rank(m_star);
    Ok(m_star)
}

/// Validation score of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub l: usize,
    pub validation_loglik: Option<f64>,
    pub error: Option<String>,
}

/// Outcome of [`choose_l`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LChoice {
    pub l: usize,
    pub spec: ModelSpec,
    pub grid: Vec<GridPoint>,
}

/// Validation log-likelihood of a fitted covariance model on residuals.
pub fn validation_loglik(state: &FitState, valid: &Dataset) -> Result<f64> {
    let eta = state.predict_eta(valid)?;
    let tables = state.tables();
    let mut total = 0.0;
    for i in 0..valid.n() {
        let row: Vec<f64> = eta.row(i).iter().copied().collect();
        total += mcd::log_density(valid.response(i), &row, &tables);
    }
    Ok(total)
}

/// Fits the model with the top-`L` pairs for each `L` in the grid on the
/// training residuals and keeps the one with the best validation log-likelihood.
pub fn choose_l(
    ranked: &RankedEffects,
    train: &Dataset,
    valid: &Dataset,
    grid: &[usize],
    opts: &FitOptions,
) -> Result<LChoice> {
    if grid.first() != Some(&0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("L grid must be ascending and start at 0".into()));
    }
    let available = ranked.ranking.len();
    let mut ls: Vec<usize> = grid.iter().map(|&l| l.min(available)).collect();
    ls.dedup();
    let points: Vec<GridPoint> = ls
        .par_iter()
        .map(|&l| {
            let spec = ranked.spec_with(l);
            match fit_model(&spec, train, opts).and_then(|st| validation_loglik(&st, valid)) {
                Ok(v) => GridPoint {
                    l,
                    validation_loglik: Some(v),
                    error: None,
                },
                Err(e) => {
                    warn!("L = {l} skipped: {e}");
                    GridPoint {
                        l,
                        validation_loglik: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for p in &points {
        if let Some(v) = p.validation_loglik {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((p.l, v));
            }
        }
    }
    let (l, _) = best.ok_or(Error::NonConvergence {
        iterations: 0,
        grad_norm: f64::NAN,
    })?;
    Ok(LChoice {
        l,
        spec: ranked.spec_with(l),
        grid: points,
    })
}
