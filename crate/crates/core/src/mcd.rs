//! Modified-Cholesky parametrisation of a multivariate Gaussian.
//!
//! A length-`q` linear-predictor vector `eta` (with `q = d + d(d+1)/2`) is laid
//! out as
//!
//! * `eta[0..d]`    the mean vector,
//! * `eta[d..2d]`   `log D²_jj`,
//! * `eta[2d..q]`   the strict lower triangle of the unit-lower-triangular `T`,
//!   in row-wise order,
//!
//! and the precision is `Σ⁻¹ = Tᵀ D⁻² T`. Every finite `eta` yields a positive
//! definite `Σ`.
//!
//! All indices in this module are zero-based except the fields of
//! [`McdIndexTables`] that mirror the one-based `G`, `z` and `w` tables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of linear predictors for response dimension `d`.
pub fn n_predictors(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Which factor a linear predictor controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorRole {
    /// Mean of response `j` (zero-based).
    Mean(usize),
    /// `log D²_jj`.
    LogD2(usize),
    /// `T[row][col]` with `row > col`.
    T { row: usize, col: usize },
}

impl PredictorRole {
    /// Row of `D`/`T` (zero-based region index) the predictor acts on.
    pub fn region(&self) -> usize {
        match *self {
            PredictorRole::Mean(j) | PredictorRole::LogD2(j) => j,
            PredictorRole::T { row, .. } => row,
        }
    }

    pub fn is_covariance(&self) -> bool {
        !matches!(self, PredictorRole::Mean(_))
    }
}

/// Index bookkeeping mapping entries of `eta` to positions in `T` and `D²`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McdIndexTables {
    pub d: usize,
    pub q: usize,
    /// One-based `(d-1)×(d-1)` lower-triangular table; `g[j][k]` is defined for `k <= j`.
    pub g: Vec<Vec<usize>>,
    /// One-based column of `T` for each `T` predictor.
    pub z: Vec<usize>,
    /// One-based row of `T` for each `T` predictor.
    pub w: Vec<usize>,
    // zero-based eta index of T[row][col], usize::MAX on and above the diagonal
    t_index: Vec<Vec<usize>>,
}

impl McdIndexTables {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "response dimension must be positive");
        let q = n_predictors(d);
        let m = d - 1;
        // C_jj = binom(j+1, 2), C_jk = C_j(k+1) - 1 for k < j.
        let mut g = vec![Vec::new(); m];
        for j in 1..=m {
            let mut row = vec![0usize; j];
            row[j - 1] = j * (j + 1) / 2;
            for k in (1..j).rev() {
                row[k - 1] = row[k] - 1;
            }
            for c in row.iter_mut() {
                *c += 2 * d;
            }
            g[j - 1] = row;
        }
        let mut z = Vec::with_capacity(d * m / 2);
        let mut w = Vec::with_capacity(d * m / 2);
        for j in 1..=m {
            for k in 1..=j {
                z.push(k);
                w.push(j + 1);
            }
        }
        let mut t_index = vec![vec![usize::MAX; d]; d];
        for row in 1..d {
            for col in 0..row {
                t_index[row][col] = g[row - 1][col] - 1;
            }
        }
        Self {
            d,
            q,
            g,
            z,
            w,
            t_index,
        }
    }

    /// Number of strict-lower-triangle entries of `T`.
    pub fn n_t(&self) -> usize {
        self.d * (self.d - 1) / 2
    }

    /// Zero-based `eta` index of `T[row][col]` (`row > col`).
    #[inline]
    pub fn t_idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(row > col);
        self.t_index[row][col]
    }

    /// Zero-based `(row, col)` of `T` controlled by the `l`-th `T` predictor.
    #[inline]
    pub fn t_pos(&self, l: usize) -> (usize, usize) {
        (self.w[l] - 1, self.z[l] - 1)
    }

    pub fn role(&self, j: usize) -> PredictorRole {
        let d = self.d;
        if j < d {
            PredictorRole::Mean(j)
        } else if j < 2 * d {
            PredictorRole::LogD2(j - d)
        } else {
            let (row, col) = self.t_pos(j - 2 * d);
            PredictorRole::T { row, col }
        }
    }

    #[inline]
    fn t_entry(&self, eta: &[f64], row: usize, col: usize) -> f64 {
        if row == col {
            1.0
        } else if row > col {
            eta[self.t_index[row][col]]
        } else {
            0.0
        }
    }

    /// `e = T r` for residual `r`.
    fn whitened(&self, eta: &[f64], r: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|j| {
                let mut s = r[j];
                for k in 0..j {
                    s += eta[self.t_index[j][k]] * r[k];
                }
                s
            })
            .collect()
    }

    fn check(&self, y: &[f64], eta: &[f64]) {
        assert_eq!(y.len(), self.d, "response length mismatch");
        assert_eq!(eta.len(), self.q, "eta length mismatch");
    }
}

/// `T`, `D²` and the derived covariance quantities for one observation.
#[derive(Debug, Clone)]
pub struct CovarianceFactors {
    pub t: DMatrix<f64>,
    pub d2: DVector<f64>,
    /// `L = T⁻¹`.
    pub l: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl CovarianceFactors {
    pub fn correlation(&self) -> DMatrix<f64> {
        correlation_from_cov(&self.sigma)
    }
}

pub fn correlation_from_cov(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = sigma.nrows();
    let s: Vec<f64> = (0..d).map(|j| sigma[(j, j)].sqrt()).collect();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            sigma[(i, j)] / (s[i] * s[j])
        }
    })
}

/// Unit-lower-triangular `T` from `eta`.
pub fn t_matrix(eta: &[f64], tables: &McdIndexTables) -> DMatrix<f64> {
    let d = tables.d;
    DMatrix::from_fn(d, d, |i, j| tables.t_entry(eta, i, j))
}

/// Inverse of a unit-lower-triangular matrix by forward substitution.
pub fn unit_lower_inverse(t: &DMatrix<f64>) -> DMatrix<f64> {
    let d = t.nrows();
    let mut l = DMatrix::<f64>::identity(d, d);
    for col in 0..d {
        for row in (col + 1)..d {
            let mut s = 0.0;
            for k in col..row {
                s += t[(row, k)] * l[(k, col)];
            }
            l[(row, col)] = -s;
        }
    }
    l
}

pub fn eta_to_covariance(eta: &[f64], tables: &McdIndexTables) -> Result<CovarianceFactors> {
    if eta.len() != tables.q {
        return Err(Error::InvalidInput(format!(
            "eta has length {}, expected {}",
            eta.len(),
            tables.q
        )));
    }
    if let Some(i) = eta.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("eta[{i}] is not finite")));
    }
    let d = tables.d;
    let t = t_matrix(eta, tables);
    let d2 = DVector::from_fn(d, |j, _| eta[d + j].exp());
    let l = unit_lower_inverse(&t);
    let mut sigma = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..=a {
            let mut s = 0.0;
            for k in 0..=b {
                s += l[(a, k)] * d2[k] * l[(b, k)];
            }
            sigma[(a, b)] = s;
            sigma[(b, a)] = s;
        }
    }
    let mut precision = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..=a {
            let mut s = 0.0;
            for k in a..d {
                s += t[(k, a)] * t[(k, b)] / d2[k];
            }
            precision[(a, b)] = s;
            precision[(b, a)] = s;
        }
    }
    Ok(CovarianceFactors {
        t,
        d2,
        l,
        sigma,
        precision,
    })
}

/// Covariance entries `(d + 1 .. q)` of `eta` for an SPD matrix.
pub fn covariance_to_eta(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorisation failed".into()))?;
    let c = chol.l();
    let diag: Vec<f64> = (0..d).map(|j| c[(j, j)]).collect();
    let l = DMatrix::from_fn(d, d, |i, j| c[(i, j)] / diag[j]);
    let t = unit_lower_inverse(&l);
    let tables = McdIndexTables::new(d);
    let mut tail = Vec::with_capacity(tables.q - d);
    tail.extend(diag.iter().map(|v| (v * v).ln()));
    for idx in 0..tables.n_t() {
        let (row, col) = tables.t_pos(idx);
        tail.push(t[(row, col)]);
    }
    Ok(tail)
}

/// Gaussian log-density written directly in `eta`, including the `2π` constant.
pub fn log_density(y: &[f64], eta: &[f64], tables: &McdIndexTables) -> f64 {
    tables.check(y, eta);
    let d = tables.d;
    let r: Vec<f64> = (0..d).map(|j| y[j] - eta[j]).collect();
    let e = tables.whitened(eta, &r);
    let mut acc = 0.0;
    for j in 0..d {
        let h = eta[d + j];
        acc += h + (-h).exp() * e[j] * e[j];
    }
    -0.5 * (d as f64) * LN_2PI - 0.5 * acc
}

/// Gradient of [`log_density`] with respect to `eta`.
pub fn grad_eta(y: &[f64], eta: &[f64], tables: &McdIndexTables) -> Vec<f64> {
    tables.check(y, eta);
    let d = tables.d;
    let r: Vec<f64> = (0..d).map(|j| y[j] - eta[j]).collect();
    let e = tables.whitened(eta, &r);
    let inv_d2: Vec<f64> = (0..d).map(|j| (-eta[d + j]).exp()).collect();
    let mut g = vec![0.0; tables.q];
    // mean block: (Tᵀ D⁻² T r)_l
    for l in 0..d {
        let mut s = inv_d2[l] * e[l];
        for j in (l + 1)..d {
            s += inv_d2[j] * e[j] * eta[tables.t_idx(j, l)];
        }
        g[l] = s;
    }
    for j in 0..d {
        g[d + j] = 0.5 * inv_d2[j] * e[j] * e[j] - 0.5;
    }
    for idx in 0..tables.n_t() {
        let (row, col) = tables.t_pos(idx);
        g[2 * d + idx] = -inv_d2[row] * e[row] * r[col];
    }
    g
}

/// Second derivatives of [`log_density`] with respect to `eta` (dense, symmetric).
pub fn hess_eta(y: &[f64], eta: &[f64], tables: &McdIndexTables) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(tables.q, tables.q);
    hess_eta_into(y, eta, tables, h.as_mut_slice());
    h
}

/// Writes the `q×q` Hessian (column-major) into `out`, which must be zeroed.
pub fn hess_eta_into(y: &[f64], eta: &[f64], tables: &McdIndexTables, out: &mut [f64]) {
    tables.check(y, eta);
    let d = tables.d;
    let q = tables.q;
    debug_assert_eq!(out.len(), q * q);
    let mut set = |a: usize, b: usize, v: f64| {
        out[a + b * q] = v;
        out[b + a * q] = v;
    };
    let r: Vec<f64> = (0..d).map(|j| y[j] - eta[j]).collect();
    let e = tables.whitened(eta, &r);
    let inv_d2: Vec<f64> = (0..d).map(|j| (-eta[d + j]).exp()).collect();
    let t = |row: usize, col: usize| tables.t_entry(eta, row, col);

    // mean-mean: -(Tᵀ D⁻² T)
    for l in 0..d {
        for m in l..d {
            let mut s = 0.0;
            for k in m..d {
                s += t(k, l) * t(k, m) * inv_d2[k];
            }
            set(l, m, -s);
        }
    }
    // mean - log D²_j: -T_jl e_j / D²_j for j >= l
    for l in 0..d {
        for j in l..d {
            set(l, d + j, -t(j, l) * e[j] * inv_d2[j]);
        }
    }
    // mean - T_wz
    for idx in 0..tables.n_t() {
        let (w, z) = tables.t_pos(idx);
        let m = 2 * d + idx;
        for l in 0..=w {
            let mut v = r[z] * t(w, l);
            if z == l {
                v += e[w];
            }
            set(l, m, v * inv_d2[w]);
        }
    }
    // log D² diagonal
    for j in 0..d {
        set(d + j, d + j, -0.5 * inv_d2[j] * e[j] * e[j]);
    }
    // log D²_w - T_wz
    for idx in 0..tables.n_t() {
        let (w, z) = tables.t_pos(idx);
        set(d + w, 2 * d + idx, inv_d2[w] * e[w] * r[z]);
    }
    // T - T, only within the same row of T
    for a in 0..tables.n_t() {
        let (wa, za) = tables.t_pos(a);
        for b in a..tables.n_t() {
            let (wb, zb) = tables.t_pos(b);
            if wa == wb {
                set(2 * d + a, 2 * d + b, -inv_d2[wa] * r[za] * r[zb]);
            }
        }
    }
}

/// `∂Σ_lm / ∂eta` (zero-based `l`, `m`).
pub fn sigma_jacobian(eta: &[f64], tables: &McdIndexTables, l: usize, m: usize) -> Result<Vec<f64>> {
    let f = eta_to_covariance(eta, tables)?;
    sigma_jacobian_from(&f, tables, l, m)
}

pub fn sigma_jacobian_from(
    f: &CovarianceFactors,
    tables: &McdIndexTables,
    l: usize,
    m: usize,
) -> Result<Vec<f64>> {
    let d = tables.d;
    if l >= d || m >= d {
        return Err(Error::InvalidInput(format!(
            "covariance index ({l}, {m}) out of range for d = {d}"
        )));
    }
    let mut out = vec![0.0; tables.q];
    for k in 0..d {
        out[d + k] = f.l[(l, k)] * f.l[(m, k)] * f.d2[k];
    }
    // dL = -L (dT) L with dT = E_ts, so dΣ_lm = -L_lt Σ_sm - L_mt Σ_ls
    for idx in 0..tables.n_t() {
        let (t_row, s_col) = tables.t_pos(idx);
        out[2 * d + idx] =
            -f.l[(l, t_row)] * f.sigma[(s_col, m)] - f.l[(m, t_row)] * f.sigma[(l, s_col)];
    }
    Ok(out)
}

/// `∂Γ_lm / ∂eta` where `Γ` is the correlation matrix.
pub fn corr_jacobian(eta: &[f64], tables: &McdIndexTables, l: usize, m: usize) -> Result<Vec<f64>> {
    let f = eta_to_covariance(eta, tables)?;
    corr_jacobian_from(&f, tables, l, m)
}

pub fn corr_jacobian_from(
    f: &CovarianceFactors,
    tables: &McdIndexTables,
    l: usize,
    m: usize,
) -> Result<Vec<f64>> {
    if l == m {
        if l >= tables.d {
            return Err(Error::InvalidInput(format!("index {l} out of range")));
        }
        return Ok(vec![0.0; tables.q]);
    }
    let dlm = sigma_jacobian_from(f, tables, l, m)?;
    let dll = sigma_jacobian_from(f, tables, l, l)?;
    let dmm = sigma_jacobian_from(f, tables, m, m)?;
    let sll = f.sigma[(l, l)];
    let smm = f.sigma[(m, m)];
    let slm = f.sigma[(l, m)];
    let a = 1.0 / (sll * smm).sqrt();
    Ok((0..tables.q)
        .map(|j| a * dlm[j] - 0.5 * slm * a * (dll[j] / sll + dmm[j] / smm))
        .collect())
}
