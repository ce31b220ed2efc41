//! Penalised maximum-a-posteriori fitting with Laplace-approximate marginal
//! likelihood (LAML) smoothing-parameter selection by Fellner-Schall updates.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{DesignAssembly, EffectKind, ModelRecipe, ModelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mcd::{self, covariance_to_eta, McdIndexTables, LN_2PI};

pub const STATE_VERSION: u32 = 1;

fn d_200() -> usize {
    200
}
fn d_30() -> usize {
    30
}
fn d_50() -> usize {
    50
}
fn d_ridge() -> f64 {
    1e-7
}
fn d_fs_tol() -> f64 {
    1e-3
}
fn d_lmin() -> f64 {
    1e-7
}
fn d_lmax() -> f64 {
    1e7
}
fn d_one() -> f64 {
    1.0
}

/// Tolerances and iteration caps for [`fit_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Gradient tolerance; `1e-7 * n` when absent.
    #[serde(default)]
    pub tol_g: Option<f64>,
    #[serde(default = "d_200")]
    pub max_newton: usize,
    #[serde(default = "d_30")]
    pub max_halvings: usize,
    #[serde(default = "d_ridge")]
    pub ridge: f64,
    #[serde(default = "d_50")]
    pub fs_max_iter: usize,
    #[serde(default = "d_fs_tol")]
    pub fs_tol: f64,
    #[serde(default = "d_lmin")]
    pub lambda_min: f64,
    #[serde(default = "d_lmax")]
    pub lambda_max: f64,
    #[serde(default = "d_one")]
    pub lambda_init: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_g: None,
            max_newton: 200,
            max_halvings: 30,
            ridge: 1e-7,
            fs_max_iter: 50,
            fs_tol: 1e-3,
            lambda_min: 1e-7,
            lambda_max: 1e7,
            lambda_init: 1.0,
        }
    }
}

impl FitOptions {
    pub fn tol_for(&self, n: usize) -> f64 {
        self.tol_g.unwrap_or(1e-7 * n as f64)
    }
}

/// Log-likelihood, its `β`-gradient and the negative `β`-Hessian.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub loglik: f64,
    pub grad: DVector<f64>,
    pub neg_hess: DMatrix<f64>,
}

fn check_data(asm: &DesignAssembly, data: &Dataset) -> Result<()> {
    if data.n() != asm.n || data.d() != asm.tables.d {
        return Err(Error::InvalidInput(format!(
            "data shape ({}, {}) does not match the design ({}, {})",
            data.n(),
            data.d(),
            asm.n,
            asm.tables.d
        )));
    }
    Ok(())
}

fn eta_row(eta: &DMatrix<f64>, i: usize) -> Vec<f64> {
    eta.row(i).iter().copied().collect()
}

/// Unpenalised log-likelihood `Σ_i log p(y_i | β)`.
pub fn log_likelihood(beta: &[f64], asm: &DesignAssembly, data: &Dataset) -> Result<f64> {
    check_data(asm, data)?;
    let eta = asm.eta(beta);
    let tables = &asm.tables;
    let parts: Vec<f64> = (0..asm.n)
        .into_par_iter()
        .map(|i| mcd::log_density(data.response(i), &eta_row(&eta, i), tables))
        .collect();
    let mut total = 0.0;
    for (i, v) in parts.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLikelihood(i));
        }
        total += v;
    }
    Ok(total)
}

/// Log-likelihood with gradient and negative Hessian assembled blockwise by
/// the chain rule `X^jᵀ ℓ^{η_j}` and `X^jᵀ diag(ℓ^{η_j η_k}) X^k`.
pub fn loglik_derivatives(beta: &[f64], asm: &DesignAssembly, data: &Dataset) -> Result<Derivatives> {
    check_data(asm, data)?;
    let n = asm.n;
    let q = asm.q();
    let tables = &asm.tables;
    let eta = asm.eta(beta);
    let per_obs: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = data.response(i);
            let e = eta_row(&eta, i);
            let l = mcd::log_density(y, &e, tables);
            let g = mcd::grad_eta(y, &e, tables);
            let mut h = vec![0.0; q * q];
            mcd::hess_eta_into(y, &e, tables, &mut h);
            (l, g, h)
        })
        .collect();
    let mut loglik = 0.0;
    let mut u = DMatrix::zeros(n, q);
    for (i, (l, g, _)) in per_obs.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFiniteLikelihood(i));
        }
        loglik += l;
        for j in 0..q {
            u[(i, j)] = g[j];
        }
    }
    let p = asm.p;
    let mut grad = DVector::zeros(p);
    for (j, pd) in asm.predictors.iter().enumerate() {
        if pd.p() == 0 {
            continue;
        }
        let gj = pd.x.tr_mul(&u.column(j));
        grad.rows_mut(pd.beta_offset, pd.p()).copy_from(&gj);
    }
    let mut neg_hess = DMatrix::zeros(p, p);
    let mut w = DVector::zeros(n);
    for (j, pj) in asm.predictors.iter().enumerate() {
        if pj.p() == 0 {
            continue;
        }
        for (k, pk) in asm.predictors.iter().enumerate().skip(j) {
            if pk.p() == 0 {
                continue;
            }
            let mut any = false;
            for (i, (_, _, h)) in per_obs.iter().enumerate() {
                w[i] = h[j + k * q];
                any |= w[i] != 0.0;
            }
            if !any {
                continue;
            }
            let mut xk = pk.x.clone();
            for mut col in xk.column_iter_mut() {
                col.component_mul_assign(&w);
            }
            let block = -(pj.x.tr_mul(&xk));
            neg_hess
                .view_mut((pj.beta_offset, pk.beta_offset), (pj.p(), pk.p()))
                .copy_from(&block);
            if j != k {
                neg_hess
                    .view_mut((pk.beta_offset, pj.beta_offset), (pk.p(), pj.p()))
                    .copy_from(&block.transpose());
            }
        }
    }
    Ok(Derivatives {
        loglik,
        grad,
        neg_hess,
    })
}

/// Penalised log-posterior value, gradient and negative Hessian.
pub fn log_posterior_grad_hess(
    beta: &[f64],
    lambda: &[f64],
    asm: &DesignAssembly,
    data: &Dataset,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let d = loglik_derivatives(beta, asm, data)?;
    let s = asm.penalty_matrix(lambda);
    let b = DVector::from_column_slice(beta);
    let sb = &s * &b;
    let value = d.loglik - 0.5 * b.dot(&sb);
    Ok((value, d.grad - sb, d.neg_hess + s))
}

/// Penalised log-posterior value alone.
pub fn log_posterior(beta: &[f64], lambda: &[f64], asm: &DesignAssembly, data: &Dataset) -> Result<f64> {
    let ll = log_likelihood(beta, asm, data)?;
    let b = DVector::from_column_slice(beta);
    Ok(ll - 0.5 * b.dot(&(asm.penalty_matrix(lambda) * &b)))
}

/// Cholesky of `h`, adding an escalating ridge when factorisation fails.
/// Returns the factor and the ridge used.
pub fn ridged_cholesky(h: &DMatrix<f64>, eps0: f64) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = h.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut eps = eps0 * scale;
    for _ in 0..20 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, eps));
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite(
        "negative Hessian could not be regularised".into(),
    ))
}

/// Outcome of one inner Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub beta: Vec<f64>,
    pub log_posterior: f64,
    pub loglik: f64,
    pub grad_max: f64,
    /// Penalised negative Hessian at `beta` (uncorrected).
    pub neg_hess: DMatrix<f64>,
    pub iterations: usize,
    pub halvings: usize,
    /// Largest ridge added to factorise the negative Hessian.
    pub max_ridge: f64,
    /// Log-posterior after each accepted step, starting value first.
    pub trajectory: Vec<f64>,
}

/// Newton ascent on the penalised log-posterior with step halving.
pub fn newton_map(
    beta0: &[f64],
    lambda: &[f64],
    asm: &DesignAssembly,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<NewtonResult> {
    if beta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite starting coefficients".into()));
    }
    let tol = opts.tol_for(asm.n);
    let mut beta = beta0.to_vec();
    let (mut value, mut grad, mut nh) = log_posterior_grad_hess(&beta, lambda, asm, data)?;
    let mut trajectory = vec![value];
    let mut halvings = 0;
    let mut max_ridge = 0.0f64;
    for it in 0..=opts.max_newton {
        let gmax = grad.amax();
        if gmax < tol {
            return Ok(NewtonResult {
                loglik: log_likelihood(&beta, asm, data)?,
                beta,
                log_posterior: value,
                grad_max: gmax,
                neg_hess: nh,
                iterations: it,
                halvings,
                max_ridge,
                trajectory,
            });
        }
        if it == opts.max_newton {
            break;
        }
        let (chol, ridge) = ridged_cholesky(&nh, opts.ridge)?;
        max_ridge = max_ridge.max(ridge);
        let step = chol.solve(&grad);
        let predicted = grad.dot(&step);
        // the decrement is invariant to coefficient scaling
        if predicted.abs() <= 1e-11 * (1.0 + value.abs()) {
            return Ok(NewtonResult {
                loglik: log_likelihood(&beta, asm, data)?,
                beta,
                log_posterior: value,
                grad_max: gmax,
                neg_hess: nh,
                iterations: it,
                halvings,
                max_ridge,
                trajectory,
            });
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + alpha * s).collect();
            match log_posterior(&cand, lambda, asm, data) {
                Ok(v) if v.is_finite() && v >= value => {
                    accepted = Some(cand);
                    break;
                }
                Ok(_) | Err(Error::NonFiniteLikelihood(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
            halvings += 1;
        }
        match accepted {
            Some(cand) => {
                beta = cand;
                (value, grad, nh) = log_posterior_grad_hess(&beta, lambda, asm, data)?;
                trajectory.push(value);
            }
            None => {
                // no ascent within rounding: the Newton decrement is negligible
                if predicted.abs() <= 1e-10 * (1.0 + value.abs()) {
                    debug!("Newton stopped at rounding level, max|g| = {gmax:e}");
                    return Ok(NewtonResult {
                        loglik: log_likelihood(&beta, asm, data)?,
                        beta,
                        log_posterior: value,
                        grad_max: gmax,
                        neg_hess: nh,
                        iterations: it,
                        halvings,
                        max_ridge,
                        trajectory,
                    });
                }
                return Err(Error::NonConvergence {
                    iterations: it,
                    grad_norm: gmax,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_newton,
        grad_norm: grad.amax(),
    })
}

/// Start: intercepts at the sample mean and at the MCD of the sample
/// covariance, everything else zero.
pub fn default_start(asm: &DesignAssembly, data: &Dataset) -> Result<Vec<f64>> {
    let d = asm.tables.d;
    let n = data.n() as f64;
    let mut target = vec![0.0; asm.q()];
    for j in 0..d {
        target[j] = data.response_column(j).iter().sum::<f64>() / n;
    }
    let mut cov = data.response_covariance();
    for j in 0..d {
        cov[(j, j)] = cov[(j, j)].max(1e-8);
    }
    if let Ok(tail) = covariance_to_eta(&cov) {
        target[d..].copy_from_slice(&tail);
    }
    let mut beta = vec![0.0; asm.p];
    for (j, pd) in asm.predictors.iter().enumerate() {
        for (slot, recipe) in pd.effects.iter().zip(&asm.recipe.effects[j]) {
            if recipe.spec.kind == EffectKind::Intercept {
                beta[slot.global.start] = target[j] - pd.offset;
            }
        }
    }
    Ok(beta)
}

/// Eigen-structure of the penalty groups at given `λ`.
struct PenaltySpectra {
    log_det: f64,
    /// Pseudoinverse of each group's summed penalty.
    pinv: Vec<DMatrix<f64>>,
}

fn penalty_spectra(asm: &DesignAssembly, lambda: &[f64]) -> PenaltySpectra {
    let mut log_det = 0.0;
    let mut pinv = Vec::with_capacity(asm.groups.len());
    for g in &asm.groups {
        let w = g.cols.len();
        let mut s = DMatrix::zeros(w, w);
        for &m in &g.members {
            s += &asm.penalties[m].s * lambda[m];
        }
        let eig = nalgebra::SymmetricEigen::new(s);
        let mut order: Vec<usize> = (0..w).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite"));
        let mut p = DMatrix::zeros(w, w);
        for &k in order.iter().take(g.rank) {
            let ev = eig.eigenvalues[k];
            if ev <= 0.0 {
                continue;
            }
            log_det += ev.ln();
            let v = eig.eigenvectors.column(k);
            p += (v * v.transpose()) / ev;
        }
        pinv.push(p);
    }
    PenaltySpectra { log_det, pinv }
}

/// LAML `𝓛(β̂) + ½log|S|₊ − ½log|𝓗| + (M_p/2)log 2π` at a converged inner fit.
pub fn laml_at(asm: &DesignAssembly, lambda: &[f64], fit: &NewtonResult) -> Result<f64> {
    let Some(chol) = fit.neg_hess.clone().cholesky() else {
        return Err(posterior_covariance(&fit.neg_hess).err().unwrap_or(Error::IndefiniteHessian));
    };
    let log_det_h = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let spectra = penalty_spectra(asm, lambda);
    Ok(fit.log_posterior + 0.5 * spectra.log_det - 0.5 * log_det_h
        + 0.5 * asm.null_space_dim() as f64 * LN_2PI)
}

/// LAML at `λ`, running the inner Newton solve from the default start.
pub fn laml(lambda: &[f64], asm: &DesignAssembly, data: &Dataset, opts: &FitOptions) -> Result<f64> {
    let start = default_start(asm, data)?;
    let fit = newton_map(&start, lambda, asm, data, opts)?;
    laml_at(asm, lambda, &fit)
}

/// One generalised Fellner-Schall update of every smoothing parameter.
pub fn fs_update(
    lambda: &[f64],
    beta: &[f64],
    neg_hess: &DMatrix<f64>,
    asm: &DesignAssembly,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    if asm.penalties.is_empty() {
        return Ok(Vec::new());
    }
    let (chol, _) = ridged_cholesky(neg_hess, opts.ridge)?;
    let h_inv = chol.inverse();
    let spectra = penalty_spectra(asm, lambda);
    let mut out = Vec::with_capacity(lambda.len());
    for (u, pb) in asm.penalties.iter().enumerate() {
        let r = pb.cols.start;
        let w = pb.cols.len();
        let bu = DVector::from_column_slice(&beta[pb.cols.clone()]);
        let den = bu.dot(&(&pb.s * &bu));
        if den < 1e-30 {
            out.push(opts.lambda_max);
            continue;
        }
        let tr_pinv = (&spectra.pinv[pb.group] * &pb.s).trace();
        let tr_h = (h_inv.view((r, r), (w, w)) * &pb.s).trace();
        let num = tr_pinv - tr_h;
        let new = lambda[u] * num / den;
        let new = if new.is_finite() { new } else { opts.lambda_max };
        out.push(new.clamp(opts.lambda_min, opts.lambda_max));
    }
    Ok(out)
}

/// Per-outer-iteration convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterStep {
    pub lambda: Vec<f64>,
    pub laml: f64,
    pub newton_iterations: usize,
    pub grad_max: f64,
    pub max_ridge: f64,
}

/// Fitted coefficients, smoothing parameters and posterior approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub version: u32,
    pub spec_hash: String,
    pub recipe: ModelRecipe,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `p×p` penalised negative Hessian, column-major.
    pub neg_hessian: Vec<f64>,
    pub laml: Option<f64>,
    pub log_posterior: f64,
    pub loglik: f64,
    pub grad_max: f64,
    pub tol_g: f64,
    pub n: usize,
    pub converged: bool,
    pub log: Vec<OuterStep>,
}

impl FitState {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.recipe.spec
    }

    pub fn tables(&self) -> McdIndexTables {
        McdIndexTables::new(self.recipe.spec.d)
    }

    pub fn neg_hessian_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.p(), self.p(), &self.neg_hessian)
    }

    /// Posterior covariance `V_β = 𝓗⁻¹` of the Gaussian approximation.
    pub fn posterior_covariance(&self) -> Result<DMatrix<f64>> {
        posterior_covariance(&self.neg_hessian_matrix())
    }

    /// Design for new rows under the training transforms.
    pub fn assemble(&self, data: &Dataset) -> Result<DesignAssembly> {
        self.recipe.assemble(data)
    }

    /// `n×q` linear predictors for `data`.
    pub fn predict_eta(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        Ok(self.assemble(data)?.eta(&self.beta))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: FitState = serde_json::from_str(text)?;
        if s.version != STATE_VERSION {
            return Err(Error::State(format!(
                "fit state version {} is not supported (expected {STATE_VERSION})",
                s.version
            )));
        }
        if s.spec_hash != s.recipe.spec.hash() {
            return Err(Error::State("fit state spec hash does not match its spec".into()));
        }
        Ok(s)
    }
}

/// `𝓗⁻¹` for a symmetric negative Hessian; singular matrices are reported
/// with the coefficients loading on the null directions.
pub fn posterior_covariance(neg_hess: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = neg_hess.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (neg_hess + neg_hess.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    let tol = max * 1e-12 * p as f64;
    let mut bad = Vec::new();
    for k in 0..p {
        if eig.eigenvalues[k] <= tol {
            if eig.eigenvalues[k] < -tol {
                return Err(Error::IndefiniteHessian);
            }
            for i in 0..p {
                if eig.eigenvectors[(i, k)].abs() > 0.1 && !bad.contains(&i) {
                    bad.push(i);
                }
            }
        }
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        return Err(Error::Unidentifiable(bad));
    }
    let mut v = DMatrix::zeros(p, p);
    for k in 0..p {
        let e = eig.eigenvectors.column(k);
        v += (e * e.transpose()) / eig.eigenvalues[k];
    }
    Ok((&v + v.transpose()) * 0.5)
}

fn state_from(
    asm: &DesignAssembly,
    lambda: Vec<f64>,
    fit: NewtonResult,
    laml: Option<f64>,
    tol: f64,
    converged: bool,
    log: Vec<OuterStep>,
) -> FitState {
    FitState {
        version: STATE_VERSION,
        spec_hash: asm.recipe.spec.hash(),
        recipe: asm.recipe.clone(),
        beta: fit.beta,
        lambda,
        neg_hessian: fit.neg_hess.as_slice().to_vec(),
        laml,
        log_posterior: fit.log_posterior,
        loglik: fit.loglik,
        grad_max: fit.grad_max,
        tol_g: tol,
        n: asm.n,
        converged,
        log,
    }
}

/// State at given coefficients without optimisation; the Hessian is evaluated at `beta`.
pub fn state_at(asm: &DesignAssembly, data: &Dataset, beta: &[f64], lambda: &[f64]) -> Result<FitState> {
    if beta.len() != asm.p || lambda.len() != asm.penalties.len() {
        return Err(Error::InvalidInput("coefficient or smoothing-parameter length mismatch".into()));
    }
    let (value, grad, neg_hess) = log_posterior_grad_hess(beta, lambda, asm, data)?;
    let fit = NewtonResult {
        beta: beta.to_vec(),
        log_posterior: value,
        loglik: log_likelihood(beta, asm, data)?,
        grad_max: grad.amax(),
        neg_hess,
        iterations: 0,
        halvings: 0,
        max_ridge: 0.0,
        trajectory: vec![value],
    };
    Ok(state_from(asm, lambda.to_vec(), fit, None, f64::INFINITY, false, Vec::new()))
}

/// Newton solve at fixed `λ` (no smoothing-parameter updates).
pub fn fit_fixed_lambda(
    asm: &DesignAssembly,
    data: &Dataset,
    lambda: &[f64],
    start: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FitState> {
    if lambda.len() != asm.penalties.len() {
        return Err(Error::InvalidInput(format!(
            "{} smoothing parameters for {} penalties",
            lambda.len(),
            asm.penalties.len()
        )));
    }
    let beta0 = match start {
        Some(b) => b.to_vec(),
        None => default_start(asm, data)?,
    };
    let fit = newton_map(&beta0, lambda, asm, data, opts)?;
    let laml = laml_at(asm, lambda, &fit).ok();
    let step = OuterStep {
        lambda: lambda.to_vec(),
        laml: laml.unwrap_or(f64::NAN),
        newton_iterations: fit.iterations,
        grad_max: fit.grad_max,
        max_ridge: fit.max_ridge,
    };
    Ok(state_from(asm, lambda.to_vec(), fit, laml, opts.tol_for(asm.n), true, vec![step]))
}

/// Alternates Newton solves and Fellner-Schall updates until the relative
/// change in `λ` falls below `opts.fs_tol`.
pub fn fit_assembled(asm: &DesignAssembly, data: &Dataset, opts: &FitOptions) -> Result<FitState> {
    let tol = opts.tol_for(asm.n);
    let mut beta = default_start(asm, data)?;
    let mut lambda = vec![opts.lambda_init; asm.penalties.len()];
    let mut fit = newton_map(&beta, &lambda, asm, data, opts)?;
    let mut current = laml_at(asm, &lambda, &fit)?;
    let mut log = vec![OuterStep {
        lambda: lambda.clone(),
        laml: current,
        newton_iterations: fit.iterations,
        grad_max: fit.grad_max,
        max_ridge: fit.max_ridge,
    }];
    if asm.penalties.is_empty() {
        return Ok(state_from(asm, lambda, fit, Some(current), tol, true, log));
    }
    let mut converged = false;
    let mut flat = 0;
    for outer in 0..opts.fs_max_iter {
        beta.clone_from(&fit.beta);
        let proposal = fs_update(&lambda, &beta, &fit.neg_hess, asm, opts)?;
        let rel = lambda
            .iter()
            .zip(&proposal)
            .map(|(a, b)| ((b - a) / a).abs())
            .fold(0.0, f64::max);
        // shrink the log-step while the LAML decreases
        let mut accepted = None;
        let mut frac = 1.0;
        for _ in 0..6 {
            let cand: Vec<f64> = lambda
                .iter()
                .zip(&proposal)
                .map(|(a, b)| (a.ln() + frac * (b.ln() - a.ln())).exp())
                .collect();
            match newton_map(&beta, &cand, asm, data, opts) {
                Ok(f) => match laml_at(asm, &cand, &f) {
                    Ok(v) if v >= current - 1e-8 * (1.0 + current.abs()) || frac < 0.05 => {
                        accepted = Some((cand, f, v));
                        break;
                    }
                    Ok(_) => {}
                    Err(e) => debug!("LAML failed at outer step {outer}: {e}"),
                },
                Err(e) if e.is_numeric() => debug!("inner fit failed at outer step {outer}: {e}"),
                Err(e) => return Err(e),
            }
            frac *= 0.5;
        }
        let Some((cand, f, v)) = accepted else {
            warn!("Fellner-Schall update could not improve the LAML; stopping at outer step {outer}");
            break;
        };
        lambda = cand;
        fit = f;
        // smoothing parameters drifting towards the bound barely move the LAML
        flat = if (v - current).abs() < 1e-6 * (1.0 + v.abs()) { flat + 1 } else { 0 };
        current = v;
        log.push(OuterStep {
            lambda: lambda.clone(),
            laml: current,
            newton_iterations: fit.iterations,
            grad_max: fit.grad_max,
            max_ridge: fit.max_ridge,
        });
        if rel < opts.fs_tol || flat >= 2 {
            converged = true;
            break;
        }
    }
    Ok(state_from(asm, lambda, fit, Some(current), tol, converged, log))
}

/// Builds the design for `spec` on `data` and fits it.
pub fn fit_model(spec: &ModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FitState> {
    let asm = crate::basis::assemble_design(spec, data)?;
    fit_assembled(&asm, data, opts)
}

/// Univariate (d = 1) mean model: predictor 1 carries `mean_effects`,
/// predictor 2 (log-variance) an intercept.
pub fn univariate_mean_spec(mean_effects: Vec<crate::basis::EffectSpec>) -> ModelSpec {
    use crate::basis::{EffectSpec, PredictorSpec};
    ModelSpec {
        d: 1,
        predictors: vec![
            PredictorSpec {
                index: 1,
                offset: 0.0,
                effects: mean_effects,
            },
            PredictorSpec {
                index: 2,
                offset: 0.0,
                effects: vec![EffectSpec::intercept()],
            },
        ],
    }
}

/// Fits the `d` univariate mean models of the two-stage scheme.
pub fn fit_mean_models(data: &Dataset, specs: &[ModelSpec], opts: &FitOptions) -> Result<Vec<FitState>> {
    if specs.len() != data.d() {
        return Err(Error::Spec(format!(
            "{} mean specs for d = {}",
            specs.len(),
            data.d()
        )));
    }
    specs
        .par_iter()
        .enumerate()
        .map(|(j, spec)| {
            if spec.d != 1 {
                return Err(Error::Spec(format!("mean spec {} must have d = 1", j + 1)));
            }
            fit_model(spec, &data.single_response(j), opts)
        })
        .collect()
}

/// `n×d` fitted means from the univariate mean states.
pub fn predict_means(states: &[FitState], data: &Dataset) -> Result<DMatrix<f64>> {
    let mut mu = DMatrix::zeros(data.n(), states.len());
    for (j, st) in states.iter().enumerate() {
        let eta = st.predict_eta(&data.single_response(j))?;
        mu.column_mut(j).copy_from(&eta.column(0));
    }
    Ok(mu)
}

/// Responses minus fitted means.
pub fn residual_dataset(states: &[FitState], data: &Dataset) -> Result<Dataset> {
    let mu = predict_means(states, data)?;
    let rows = (0..data.n())
        .map(|i| {
            data.response(i)
                .iter()
                .enumerate()
                .map(|(j, y)| y - mu[(i, j)])
                .collect()
        })
        .collect();
    data.with_responses(rows)
}
