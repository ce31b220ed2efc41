//! Design-matrix columns and quadratic penalties for additive effects.
//!
//! Every effect is built in two steps: [`EffectRecipe::from_data`] fixes all
//! data-dependent choices (standardisation, knots, factor levels, centring
//! constraint) and [`EffectRecipe::design`] evaluates the columns for any
//! dataset. Building at training time and predicting later go through the same
//! evaluation path.

mod design;
pub mod splines;

pub use design::{
    assemble_design, DesignAssembly, EffectSlot, ModelRecipe, ModelSpec, PenaltyBlock,
    PenaltyGroup, PredictorDesign, PredictorSpec,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectKind {
    Intercept,
    /// Polynomial in one standardised covariate, degree `k[0]` (default 1), unpenalised.
    Linear,
    Factor,
    SmoothCr,
    SmoothBs,
    FactorSmooth,
    Tensor,
    VaryingCoefficient,
}

impl EffectKind {
    pub fn is_smooth(&self) -> bool {
        matches!(
            self,
            EffectKind::SmoothCr
                | EffectKind::SmoothBs
                | EffectKind::FactorSmooth
                | EffectKind::Tensor
                | EffectKind::VaryingCoefficient
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    Sqrt,
}

impl Transform {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Sqrt => v.max(0.0).sqrt(),
        }
    }
}

fn default_order() -> usize {
    2
}

fn default_true() -> bool {
    true
}

/// Declarative description of one additive effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub kind: EffectKind,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Basis dimension per margin (polynomial degree for `linear`).
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default = "default_order")]
    pub penalty_order: usize,
    /// Covariate multiplying the smooth for `varying-coefficient`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<String>,
    /// Factors: ridge-penalised with all levels when true, unpenalised with
    /// the first level dropped when false.
    #[serde(default = "default_true")]
    pub penalized: bool,
    #[serde(default)]
    pub transform: Transform,
}

impl EffectSpec {
    fn base(kind: EffectKind, covariates: &[&str], k: Vec<usize>) -> Self {
        Self {
            kind,
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            k,
            penalty_order: 2,
            multiplier: None,
            penalized: true,
            transform: Transform::Identity,
        }
    }

    pub fn intercept() -> Self {
        Self::base(EffectKind::Intercept, &[], vec![])
    }

    pub fn linear(cov: &str) -> Self {
        Self::base(EffectKind::Linear, &[cov], vec![1])
    }

    /// Linear and quadratic terms of one covariate as a single effect.
    pub fn trend(cov: &str) -> Self {
        Self::base(EffectKind::Linear, &[cov], vec![2])
    }

    pub fn factor(cov: &str, penalized: bool) -> Self {
        Self {
            penalized,
            ..Self::base(EffectKind::Factor, &[cov], vec![])
        }
    }

    pub fn cr(cov: &str, k: usize) -> Self {
        Self::base(EffectKind::SmoothCr, &[cov], vec![k])
    }

    pub fn bs(cov: &str, k: usize) -> Self {
        Self::base(EffectKind::SmoothBs, &[cov], vec![k])
    }

    pub fn factor_smooth(cov: &str, factor: &str, k: usize) -> Self {
        Self::base(EffectKind::FactorSmooth, &[cov, factor], vec![k])
    }

    pub fn tensor(a: &str, b: &str, ka: usize, kb: usize) -> Self {
        Self::base(EffectKind::Tensor, &[a, b], vec![ka, kb])
    }

    pub fn varying(cov: &str, multiplier: &str, k: usize) -> Self {
        Self {
            multiplier: Some(multiplier.to_string()),
            ..Self::base(EffectKind::VaryingCoefficient, &[cov], vec![k])
        }
    }

    pub fn with_transform(mut self, t: Transform) -> Self {
        self.transform = t;
        self
    }

    /// Covariates the effect reads, including the multiplier.
    pub fn all_covariates(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.covariates.iter().map(String::as_str).collect();
        if let Some(m) = &self.multiplier {
            v.push(m);
        }
        v
    }

    /// Short human-readable label, e.g. `cr(tod,10)`.
    pub fn label(&self) -> String {
        let kind = match self.kind {
            EffectKind::Intercept => return "(Intercept)".into(),
            EffectKind::Linear => "lin",
            EffectKind::Factor => "fac",
            EffectKind::SmoothCr => "cr",
            EffectKind::SmoothBs => "bs",
            EffectKind::FactorSmooth => "fs",
            EffectKind::Tensor => "te",
            EffectKind::VaryingCoefficient => "vc",
        };
        let mut args: Vec<String> = self
            .covariates
            .iter()
            .map(|c| match self.transform {
                Transform::Sqrt => format!("sqrt({c})"),
                Transform::Identity => c.clone(),
            })
            .collect();
        args.extend(self.k.iter().map(|k| k.to_string()));
        let s = format!("{kind}({})", args.join(","));
        match &self.multiplier {
            Some(m) => format!("{m}*{s}"),
            None => s,
        }
    }

    fn k_at(&self, i: usize, default: usize) -> usize {
        self.k.get(i).copied().unwrap_or(default)
    }

    fn validate(&self) -> Result<()> {
        let need = match self.kind {
            EffectKind::Intercept => 0,
            EffectKind::FactorSmooth | EffectKind::Tensor => 2,
            _ => 1,
        };
        if self.covariates.len() != need {
            return Err(Error::Spec(format!(
                "{} needs {need} covariate(s), got {}",
                self.label(),
                self.covariates.len()
            )));
        }
        if self.kind.is_smooth() {
            let margins = if self.kind == EffectKind::Tensor { 2 } else { 1 };
            if self.k.len() != margins || self.k.iter().any(|&k| k < 3) {
                return Err(Error::Spec(format!(
                    "{} needs {margins} basis dimension(s), each >= 3",
                    self.label()
                )));
            }
        }
        if self.kind == EffectKind::VaryingCoefficient && self.multiplier.is_none() {
            return Err(Error::Spec("varying-coefficient effect needs a multiplier".into()));
        }
        Ok(())
    }
}

/// Zero-mean, unit-variance transform fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardiser {
    pub mean: f64,
    pub sd: f64,
}

impl Standardiser {
    fn fit(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            sd: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Margin {
    Cr { knots: Vec<f64> },
    Bs { knots: Vec<f64> },
}

impl Margin {
    fn dim(&self) -> usize {
        match self {
            Margin::Cr { knots } => knots.len(),
            Margin::Bs { knots } => knots.len() - 4,
        }
    }

    fn basis(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            Margin::Cr { knots } => splines::cr_basis(z, knots),
            Margin::Bs { knots } => Ok(splines::bs_basis(z, knots)),
        }
    }

    fn penalty(&self, order: usize) -> Result<DMatrix<f64>> {
        match self {
            Margin::Cr { knots } => {
                if order != 2 {
                    return Err(Error::Basis(format!(
                        "cubic regression splines use a second-order penalty, got order {order}"
                    )));
                }
                splines::cr_penalty(knots)
            }
            Margin::Bs { knots } => splines::difference_penalty(knots.len() - 4, order),
        }
    }
}

/// Orthogonal complement `Z` (k×(k-1)) of a single linear constraint `cᵀβ = 0`.
fn constraint_nullspace(c: &[f64]) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = DVector::from_column_slice(c);
    if norm == 0.0 {
        return DMatrix::identity(k, k).columns(1, k - 1).into_owned();
    }
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, k - 1).into_owned()
}

/// Data-dependent choices needed to evaluate an effect's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecipe {
    pub spec: EffectSpec,
    standardisers: Vec<Standardiser>,
    margins: Vec<Margin>,
    #[serde(default)]
    multiplier_scale: Option<f64>,
    #[serde(default)]
    levels: Option<Vec<String>>,
    /// Column-major centring map(s): one for the whole block, or one per level
    /// for factor-smooths.
    #[serde(default)]
    constraints: Vec<(usize, usize, Vec<f64>)>,
}

/// Columns and penalties of one effect evaluated on a dataset.
#[derive(Debug, Clone)]
pub struct EffectBlock {
    pub design: DMatrix<f64>,
    /// Penalty matrices acting on this block's coefficients (empty when unpenalised).
    pub penalties: Vec<DMatrix<f64>>,
    /// Rank of each entry of `penalties`.
    pub ranks: Vec<usize>,
    /// Rank of the summed penalty.
    pub rank: usize,
    pub centred: bool,
    pub recipe: EffectRecipe,
}

impl EffectBlock {
    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    /// Sum of the block's penalty matrices (zero when unpenalised).
    pub fn total_penalty(&self) -> DMatrix<f64> {
        let p = self.p();
        self.penalties
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, s| acc + s)
    }
}

/// Numerical rank of a symmetric PSD matrix.
pub fn psd_rank(s: &DMatrix<f64>) -> usize {
    if s.nrows() == 0 {
        return 0;
    }
    let eig = s.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 {
        return 0;
    }
    eig.iter().filter(|v| **v > max * 1e-9).count()
}

fn transformed(data: &Dataset, name: &str, t: Transform) -> Result<Vec<f64>> {
    Ok(data.numeric(name)?.iter().map(|v| t.apply(*v)).collect())
}

fn level_codes(data: &Dataset, name: &str, levels: &[String]) -> Result<Vec<usize>> {
    let (own, codes) = data.categorical(name)?;
    let map: Vec<Result<usize>> = own
        .iter()
        .map(|l| {
            levels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Prediction(format!("unknown level '{l}' of factor '{name}'")))
        })
        .collect();
    let mut out = Vec::with_capacity(codes.len());
    for &c in codes {
        match &map[c] {
            Ok(v) => out.push(*v),
            Err(e) => return Err(Error::Prediction(e.to_string())),
        }
    }
    Ok(out)
}

/// Levels that occur in `data`, in level-list order.
fn observed_levels(data: &Dataset, name: &str) -> Result<Vec<String>> {
    let (levels, codes) = data.categorical(name)?;
    let mut seen = vec![false; levels.len()];
    for &c in codes {
        seen[c] = true;
    }
    Ok(levels
        .iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(l, _)| l.clone())
        .collect())
}

fn row_kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, ka, kb) = (a.nrows(), a.ncols(), b.ncols());
    DMatrix::from_fn(n, ka * kb, |i, c| a[(i, c / kb)] * b[(i, c % kb)])
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca, rb, cb) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

impl EffectRecipe {
    /// Fixes standardisation, knots, levels and the centring constraint from `data`.
    pub fn from_data(spec: &EffectSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        let mut recipe = EffectRecipe {
            spec: spec.clone(),
            standardisers: Vec::new(),
            margins: Vec::new(),
            multiplier_scale: None,
            levels: None,
            constraints: Vec::new(),
        };
        let cov = |i: usize| -> Result<Vec<f64>> { transformed(data, &spec.covariates[i], spec.transform) };
        match spec.kind {
            EffectKind::Intercept => {}
            EffectKind::Linear => {
                recipe.standardisers.push(Standardiser::fit(&cov(0)?));
            }
            EffectKind::Factor => {
                let levels = observed_levels(data, &spec.covariates[0])?;
                if levels.len() < 2 && !spec.penalized {
                    return Err(Error::Basis(format!(
                        "factor '{}' has a single level",
                        spec.covariates[0]
                    )));
                }
                recipe.levels = Some(levels);
            }
            EffectKind::SmoothCr | EffectKind::SmoothBs | EffectKind::VaryingCoefficient | EffectKind::FactorSmooth => {
                let x = cov(0)?;
                let st = Standardiser::fit(&x);
                let z: Vec<f64> = x.iter().map(|v| st.apply(*v)).collect();
                recipe.standardisers.push(st);
                let k = spec.k_at(0, 10);
                let margin = if spec.kind == EffectKind::SmoothBs {
                    distinct_at_least(&z, k)?;
                    let (lo, hi) = min_max(&z);
                    Margin::Bs {
                        knots: splines::bs_knots(lo, hi, k)?,
                    }
                } else {
                    Margin::Cr {
                        knots: splines::quantile_knots(&z, k)?,
                    }
                };
                recipe.margins.push(margin);
                if let Some(m) = &spec.multiplier {
                    let mv = data.numeric(m)?;
                    recipe.multiplier_scale = Some(Standardiser::fit(mv).sd);
                }
                if spec.kind == EffectKind::FactorSmooth {
                    recipe.levels = Some(observed_levels(data, &spec.covariates[1])?);
                }
            }
            EffectKind::Tensor => {
                for i in 0..2 {
                    let x = cov(i)?;
                    let st = Standardiser::fit(&x);
                    let z: Vec<f64> = x.iter().map(|v| st.apply(*v)).collect();
                    recipe.standardisers.push(st);
                    recipe.margins.push(Margin::Cr {
                        knots: splines::quantile_knots(&z, spec.k[i])?,
                    });
                }
            }
        }
        if spec.kind.is_smooth() && spec.kind != EffectKind::VaryingCoefficient {
            let raw = recipe.raw_design(data)?;
            if spec.kind == EffectKind::FactorSmooth {
                let levels = recipe.levels.clone().unwrap_or_default();
                let codes = level_codes(data, &spec.covariates[1], &levels)?;
                let k = recipe.margins[0].dim();
                for lev in 0..levels.len() {
                    let mut c = vec![0.0; k];
                    for (i, &code) in codes.iter().enumerate() {
                        if code == lev {
                            for (j, cj) in c.iter_mut().enumerate() {
                                *cj += raw[(i, lev * k + j)];
                            }
                        }
                    }
                    let z = constraint_nullspace(&c);
                    recipe.constraints.push((z.nrows(), z.ncols(), z.as_slice().to_vec()));
                }
            } else {
                let c: Vec<f64> = (0..raw.ncols()).map(|j| raw.column(j).sum()).collect();
                let z = constraint_nullspace(&c);
                recipe.constraints.push((z.nrows(), z.ncols(), z.as_slice().to_vec()));
            }
        }
        Ok(recipe)
    }

    fn constraint_matrix(&self) -> Option<DMatrix<f64>> {
        if self.constraints.is_empty() {
            return None;
        }
        let rows: usize = self.constraints.iter().map(|c| c.0).sum();
        let cols: usize = self.constraints.iter().map(|c| c.1).sum();
        let mut z = DMatrix::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for (r, c, v) in &self.constraints {
            z.view_mut((r0, c0), (*r, *c))
                .copy_from(&DMatrix::from_column_slice(*r, *c, v));
            r0 += r;
            c0 += c;
        }
        Some(z)
    }

    fn standardised(&self, data: &Dataset, i: usize) -> Result<Vec<f64>> {
        let st = self.standardisers[i];
        Ok(transformed(data, &self.spec.covariates[i], self.spec.transform)?
            .into_iter()
            .map(|v| st.apply(v))
            .collect())
    }

    /// Columns before the centring constraint is absorbed.
    fn raw_design(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let n = data.n();
        let spec = &self.spec;
        Ok(match spec.kind {
            EffectKind::Intercept => DMatrix::from_element(n, 1, 1.0),
            EffectKind::Linear => {
                let z = self.standardised(data, 0)?;
                let deg = spec.k_at(0, 1).max(1);
                DMatrix::from_fn(n, deg, |i, j| z[i].powi(j as i32 + 1))
            }
            EffectKind::Factor => {
                let levels = self.levels.as_ref().expect("factor levels");
                let codes = level_codes(data, &spec.covariates[0], levels)?;
                let skip = usize::from(!spec.penalized);
                DMatrix::from_fn(n, levels.len() - skip, |i, j| {
                    if codes[i] == j + skip {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            EffectKind::SmoothCr | EffectKind::SmoothBs => {
                self.margins[0].basis(&self.standardised(data, 0)?)?
            }
            EffectKind::VaryingCoefficient => {
                let mut b = self.margins[0].basis(&self.standardised(data, 0)?)?;
                let m = data.numeric(spec.multiplier.as_deref().expect("validated"))?;
                let scale = self.multiplier_scale.unwrap_or(1.0);
                for i in 0..n {
                    let f = m[i] / scale;
                    b.row_mut(i).scale_mut(f);
                }
                b
            }
            EffectKind::FactorSmooth => {
                let b = self.margins[0].basis(&self.standardised(data, 0)?)?;
                let levels = self.levels.as_ref().expect("factor levels");
                let codes = level_codes(data, &spec.covariates[1], levels)?;
                let k = b.ncols();
                DMatrix::from_fn(n, k * levels.len(), |i, c| {
                    if codes[i] == c / k {
                        b[(i, c % k)]
                    } else {
                        0.0
                    }
                })
            }
            EffectKind::Tensor => {
                let a = self.margins[0].basis(&self.standardised(data, 0)?)?;
                let b = self.margins[1].basis(&self.standardised(data, 1)?)?;
                row_kron(&a, &b)
            }
        })
    }

    fn raw_penalties(&self) -> Result<Vec<DMatrix<f64>>> {
        let spec = &self.spec;
        Ok(match spec.kind {
            EffectKind::Intercept | EffectKind::Linear => vec![],
            EffectKind::Factor => {
                if spec.penalized {
                    let l = self.levels.as_ref().map_or(0, Vec::len);
                    vec![DMatrix::identity(l, l)]
                } else {
                    vec![]
                }
            }
            EffectKind::SmoothCr | EffectKind::SmoothBs | EffectKind::VaryingCoefficient => {
                vec![self.margins[0].penalty(spec.penalty_order)?]
            }
            EffectKind::FactorSmooth => {
                let s = self.margins[0].penalty(spec.penalty_order)?;
                let l = self.levels.as_ref().map_or(0, Vec::len);
                vec![kron(&DMatrix::identity(l, l), &s)]
            }
            EffectKind::Tensor => {
                let s1 = self.margins[0].penalty(2)?;
                let s2 = self.margins[1].penalty(2)?;
                let i1 = DMatrix::identity(s1.nrows(), s1.nrows());
                let i2 = DMatrix::identity(s2.nrows(), s2.nrows());
                vec![kron(&s1, &i2), kron(&i1, &s2)]
            }
        })
    }

    /// Design columns for `data` under the stored transforms.
    pub fn design(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let raw = self.raw_design(data)?;
        Ok(match self.constraint_matrix() {
            Some(z) => raw * z,
            None => raw,
        })
    }

    /// Penalties in the constrained coefficient space.
    pub fn penalties(&self) -> Result<Vec<DMatrix<f64>>> {
        let z = self.constraint_matrix();
        Ok(self
            .raw_penalties()?
            .into_iter()
            .map(|s| match &z {
                Some(z) => {
                    let m = z.transpose() * s * z;
                    (&m + m.transpose()) * 0.5
                }
                None => s,
            })
            .collect())
    }

    pub fn n_columns(&self) -> usize {
        match self.constraint_matrix() {
            Some(z) => z.ncols(),
            None => match self.spec.kind {
                EffectKind::Intercept => 1,
                EffectKind::Linear => self.spec.k_at(0, 1).max(1),
                EffectKind::Factor => {
                    self.levels.as_ref().map_or(0, Vec::len) - usize::from(!self.spec.penalized)
                }
                EffectKind::VaryingCoefficient => self.margins[0].dim(),
                _ => unreachable!("centred smooths always carry a constraint"),
            },
        }
    }
}

fn min_max(z: &[f64]) -> (f64, f64) {
    z.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)))
}

fn distinct_at_least(z: &[f64], k: usize) -> Result<()> {
    let mut u = z.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    u.dedup();
    if u.len() < k {
        return Err(Error::Basis(format!(
            "{} distinct covariate values, need at least k = {k}",
            u.len()
        )));
    }
    Ok(())
}

/// Builds the columns and penalties of `spec` on `data`.
pub fn build_effect(spec: &EffectSpec, data: &Dataset) -> Result<EffectBlock> {
    let recipe = EffectRecipe::from_data(spec, data)?;
    block_from_recipe(recipe, data)
}

pub(crate) fn block_from_recipe(recipe: EffectRecipe, data: &Dataset) -> Result<EffectBlock> {
    let design = recipe.design(data)?;
    let penalties = recipe.penalties()?;
    let ranks = penalties.iter().map(psd_rank).collect();
    let p = design.ncols();
    let total = penalties.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s);
    let rank = psd_rank(&total);
    Ok(EffectBlock {
        design,
        penalties,
        ranks,
        rank,
        centred: !recipe.constraints.is_empty(),
        recipe,
    })
}

/// Generalised eigenvalues `γ` of the summed penalty relative to `XᵀX`, so that
/// `edf(ζ) = Σ 1 / (1 + ζ γ_i)`.
fn edf_spectrum(block: &EffectBlock) -> Result<Vec<f64>> {
    let x = &block.design;
    let mut xtx = x.transpose() * x;
    let p = xtx.nrows();
    let chol = match xtx.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-10 * xtx.trace().max(1.0);
            for i in 0..p {
                xtx[(i, i)] += jitter;
            }
            xtx.cholesky()
                .ok_or_else(|| Error::Basis("design block is rank deficient".into()))?
        }
    };
    let l = chol.l();
    let s = block.total_penalty();
    // L⁻¹ S L⁻ᵀ
    let a = l
        .solve_lower_triangular(&s)
        .ok_or_else(|| Error::Basis("triangular solve failed".into()))?;
    let b = l
        .solve_lower_triangular(&a.transpose())
        .ok_or_else(|| Error::Basis("triangular solve failed".into()))?;
    let b = (&b + b.transpose()) * 0.5;
    let mut gam: Vec<f64> = b.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0)).collect();
    // the penalty null space has exactly p - rank zero eigenvalues
    gam.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    for g in gam.iter_mut().take(p - block.rank) {
        *g = 0.0;
    }
    Ok(gam)
}

/// `tr{X (XᵀX + ζS)⁻¹ Xᵀ}` of a block.
pub fn edf(block: &EffectBlock, zeta: f64) -> Result<f64> {
    Ok(edf_spectrum(block)?.iter().map(|g| 1.0 / (1.0 + zeta * g)).sum())
}

/// Penalty multiplier `ζ > 0` giving the block `target` effective degrees of freedom.
pub fn calibrate_edf(block: &EffectBlock, target: f64) -> Result<f64> {
    let p = block.p() as f64;
    let s = block.rank as f64;
    if !(target >= p - s && target <= p) || block.rank == 0 {
        return Err(Error::InfeasibleEdf {
            target,
            lower: p - s,
            upper: p,
        });
    }
    let gam = edf_spectrum(block)?;
    let f = |log_zeta: f64| -> f64 {
        let z = log_zeta.exp();
        gam.iter().map(|g| 1.0 / (1.0 + z * g)).sum::<f64>() - target
    };
    let (mut lo, mut hi) = (-80.0f64, 80.0f64);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < 1e-11 {
            return Ok(mid.exp());
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}
