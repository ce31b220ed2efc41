//! Cubic regression splines (cardinal, knot-value parametrised) and cubic
//! B-splines with difference penalties.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Knots at quantiles of the distinct values of `x`.
pub fn quantile_knots(x: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
    u.dedup();
    if u.len() < k {
        return Err(Error::Basis(format!(
            "{} distinct covariate values, need at least k = {k}",
            u.len()
        )));
    }
    let m = u.len() - 1;
    Ok((0..k)
        .map(|i| {
            // linear interpolation between order statistics of the unique values
            let pos = i as f64 * m as f64 / (k - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo >= m {
                u[m]
            } else {
                u[lo] + frac * (u[lo + 1] - u[lo])
            }
        })
        .collect())
}

struct CrParts {
    h: Vec<f64>,
    // k×k map from knot values to second derivatives at the knots
    f: DMatrix<f64>,
    s: DMatrix<f64>,
}

fn cr_parts(knots: &[f64]) -> Result<CrParts> {
    let k = knots.len();
    if k < 3 {
        return Err(Error::Basis(format!("cubic regression spline needs k >= 3, got {k}")));
    }
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    if h.iter().any(|v| *v <= 0.0) {
        return Err(Error::Basis("knots must be strictly increasing".into()));
    }
    let m = k - 2;
    let mut dm = DMatrix::zeros(m, k);
    let mut bm = DMatrix::zeros(m, m);
    for i in 0..m {
        dm[(i, i)] = 1.0 / h[i];
        dm[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        dm[(i, i + 2)] = 1.0 / h[i + 1];
        bm[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < m {
            bm[(i, i + 1)] = h[i + 1] / 6.0;
            bm[(i + 1, i)] = h[i + 1] / 6.0;
        }
    }
    let chol = bm
        .cholesky()
        .ok_or_else(|| Error::Basis("singular spline tridiagonal system".into()))?;
    let binv_d = chol.solve(&dm);
    let mut f = DMatrix::zeros(k, k);
    f.view_mut((1, 0), (m, k)).copy_from(&binv_d);
    let s = dm.transpose() * &binv_d;
    let s = (&s + s.transpose()) * 0.5;
    Ok(CrParts { h, f, s })
}

/// `∫ f''(x)² dx` penalty of the cubic regression spline with these knots.
pub fn cr_penalty(knots: &[f64]) -> Result<DMatrix<f64>> {
    Ok(cr_parts(knots)?.s)
}

/// Raw (unconstrained) cubic regression spline basis; linear beyond the knots.
pub fn cr_basis(x: &[f64], knots: &[f64]) -> Result<DMatrix<f64>> {
    let parts = cr_parts(knots)?;
    let k = knots.len();
    let h = &parts.h;
    let f = &parts.f;
    let mut out = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        if xi < knots[0] {
            let dx = xi - knots[0];
            let h0 = h[0];
            out[(i, 0)] += 1.0 - dx / h0;
            out[(i, 1)] += dx / h0;
            for c in 0..k {
                out[(i, c)] -= dx * h0 / 6.0 * f[(1, c)];
            }
            continue;
        }
        if xi > knots[k - 1] {
            let dx = xi - knots[k - 1];
            let hl = h[k - 2];
            out[(i, k - 1)] += 1.0 + dx / hl;
            out[(i, k - 2)] -= dx / hl;
            for c in 0..k {
                out[(i, c)] += dx * hl / 6.0 * f[(k - 2, c)];
            }
            continue;
        }
        let j = match knots.partition_point(|t| *t <= xi) {
            0 => 0,
            p => (p - 1).min(k - 2),
        };
        let hj = h[j];
        let am = (knots[j + 1] - xi) / hj;
        let ap = (xi - knots[j]) / hj;
        let cm = ((knots[j + 1] - xi).powi(3) / hj - hj * (knots[j + 1] - xi)) / 6.0;
        let cp = ((xi - knots[j]).powi(3) / hj - hj * (xi - knots[j])) / 6.0;
        out[(i, j)] += am;
        out[(i, j + 1)] += ap;
        for c in 0..k {
            out[(i, c)] += cm * f[(j, c)] + cp * f[(j + 1, c)];
        }
    }
    Ok(out)
}

/// Full knot vector for `k` cubic B-splines equally spaced over `[lo, hi]`.
pub fn bs_knots(lo: f64, hi: f64, k: usize) -> Result<Vec<f64>> {
    if k < 4 {
        return Err(Error::Basis(format!("cubic B-spline basis needs k >= 4, got {k}")));
    }
    if hi <= lo {
        return Err(Error::Basis("degenerate covariate range".into()));
    }
    let dx = (hi - lo) / (k - 3) as f64;
    Ok((0..k + 4).map(|i| lo + (i as f64 - 3.0) * dx).collect())
}

/// Cubic B-spline basis on `knots` (from [`bs_knots`]); `x` is clamped to the
/// interior range.
pub fn bs_basis(x: &[f64], knots: &[f64]) -> DMatrix<f64> {
    const DEG: usize = 3;
    let k = knots.len() - DEG - 1;
    let lo = knots[DEG];
    let hi = knots[k];
    let mut out = DMatrix::zeros(x.len(), k);
    for (i, &xi) in x.iter().enumerate() {
        let xc = xi.clamp(lo, hi);
        // interval index s with knots[s] <= xc < knots[s+1], restricted to [DEG, k-1]
        let mut s = knots.partition_point(|t| *t <= xc).saturating_sub(1);
        s = s.clamp(DEG, k - 1);
        // de Boor triangular evaluation of the DEG+1 non-zero basis functions
        let mut b = [0.0f64; DEG + 1];
        b[0] = 1.0;
        for p in 1..=DEG {
            let mut saved = 0.0;
            for r in 0..p {
                let left = knots[s + r + 1];
                let right = knots[s + r + 1 - p];
                let denom = left - right;
                let temp = if denom > 0.0 { b[r] / denom } else { 0.0 };
                b[r] = saved + (left - xc) * temp;
                saved = (xc - right) * temp;
            }
            b[p] = saved;
        }
        for (r, v) in b.iter().enumerate() {
            out[(i, s - DEG + r)] = *v;
        }
    }
    out
}

/// `Dᵀ D` with `D` the order-`m` difference operator on `k` coefficients.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || order >= k {
        return Err(Error::Basis(format!(
            "penalty order {order} must lie in 1..{k}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let r = d.nrows();
        d = DMatrix::from_fn(r - 1, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d.transpose() * d)
}
