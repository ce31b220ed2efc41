//! Accumulated local effects of a covariate on one entry of `Σ`, `Γ`, `D²` or
//! `T`, with delta-method posterior variances.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::DesignAssembly;
use crate::data::{Covariate, Dataset};
use crate::error::{Error, Result};
use crate::fit::FitState;
use crate::mcd::{self, McdIndexTables};

/// Scalar output of the covariance model (zero-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AleOutput {
    Sigma { l: usize, m: usize },
    Corr { l: usize, m: usize },
    D2 { k: usize },
    T { row: usize, col: usize },
}

impl AleOutput {
    /// Parses `sigma:l:m`, `corr:l:m`, `d:k` or `t:row:col` with one-based indices.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("cannot parse output '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        let idx: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse::<usize>().ok().filter(|&v| v >= 1).map(|v| v - 1))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        match (parts[0], idx.as_slice()) {
            ("sigma", [l, m]) => Ok(Self::Sigma { l: *l, m: *m }),
            ("corr", [l, m]) => Ok(Self::Corr { l: *l, m: *m }),
            ("d", [k]) => Ok(Self::D2 { k: *k }),
            ("t", [r, c]) if r > c => Ok(Self::T { row: *r, col: *c }),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Sigma { l, m } => format!("sigma:{}:{}", l + 1, m + 1),
            Self::Corr { l, m } => format!("corr:{}:{}", l + 1, m + 1),
            Self::D2 { k } => format!("d:{}", k + 1),
            Self::T { row, col } => format!("t:{}:{}", row + 1, col + 1),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let ok = match *self {
            Self::Sigma { l, m } | Self::Corr { l, m } => l < d && m < d,
            Self::D2 { k } => k < d,
            Self::T { row, col } => row < d && col < row,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("output {} out of range for d = {d}", self.label())))
        }
    }

    pub fn value(&self, eta: &[f64], tables: &McdIndexTables) -> Result<f64> {
        let d = tables.d;
        Ok(match *self {
            Self::Sigma { l, m } => mcd::eta_to_covariance(eta, tables)?.sigma[(l, m)],
            Self::Corr { l, m } => mcd::eta_to_covariance(eta, tables)?.correlation()[(l, m)],
            Self::D2 { k } => eta[d + k].exp(),
            Self::T { row, col } => eta[tables.t_idx(row, col)],
        })
    }

    /// `∂ω/∂η` (length `q`).
    pub fn gradient(&self, eta: &[f64], tables: &McdIndexTables) -> Result<Vec<f64>> {
        let d = tables.d;
        Ok(match *self {
            Self::Sigma { l, m } => mcd::sigma_jacobian(eta, tables, l, m)?,
            Self::Corr { l, m } => mcd::corr_jacobian(eta, tables, l, m)?,
            Self::D2 { k } => {
                let mut g = vec![0.0; tables.q];
                g[d + k] = eta[d + k].exp();
                g
            }
            Self::T { row, col } => {
                let mut g = vec![0.0; tables.q];
                g[tables.t_idx(row, col)] = 1.0;
                g
            }
        })
    }
}

/// ALE curve evaluated at bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AleCurve {
    pub covariate: String,
    pub output: AleOutput,
    /// `B + 1` edges.
    pub edges: Vec<f64>,
    /// Observations per bin (`B` entries).
    pub counts: Vec<usize>,
    /// Accumulated effect at each edge, zero at the first.
    pub uncentred: Vec<f64>,
    /// Uncentred values minus their count-weighted mean over right bin edges.
    pub centred: Vec<f64>,
    /// Posterior variance of the uncentred values, when computed.
    pub variance: Option<Vec<f64>>,
}

impl AleCurve {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// CSV with columns `edge,value,uncentred,variance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("edge,value,uncentred,variance\n");
        for v in 0..self.edges.len() {
            let var = self
                .variance
                .as_ref()
                .map_or(String::new(), |s| format!("{:?}", s[v]));
            out.push_str(&format!(
                "{:?},{:?},{:?},{}\n",
                self.edges[v], self.centred[v], self.uncentred[v], var
            ));
        }
        out
    }
}

/// Bin edges at empirical quantiles with duplicate edges dropped.
pub fn quantile_edges(x: &[f64], bins: usize) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
    let n = s.len();
    let mut edges: Vec<f64> = (0..=bins)
        .map(|v| {
            let pos = v as f64 * (n - 1) as f64 / bins as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 >= n {
                s[n - 1]
            } else {
                s[lo] + frac * (s[lo + 1] - s[lo])
            }
        })
        .collect();
    edges.dedup();
    edges
}

/// One-based bin of each value: `z_{v-1} < x <= z_v`, with the minimum in bin 1.
fn assign_bins(x: &[f64], edges: &[f64]) -> Vec<usize> {
    x.iter()
        .map(|&xi| {
            let pos = edges[1..].partition_point(|&e| e < xi);
            (pos + 1).min(edges.len() - 1)
        })
        .collect()
}

/// Edges and bin membership after merging empty bins into their left neighbour.
fn binning(x: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut edges = quantile_edges(x, bins);
    loop {
        let bin = assign_bins(x, &edges);
        let mut counts = vec![0usize; edges.len() - 1];
        for &b in &bin {
            counts[b - 1] += 1;
        }
        match counts.iter().position(|&c| c == 0) {
            Some(v) if v > 0 => {
                edges.remove(v);
            }
            _ => return (edges, bin, counts),
        }
    }
}

struct Shifted {
    edges: Vec<f64>,
    bin: Vec<usize>,
    counts: Vec<usize>,
    lo: DesignAssembly,
    hi: DesignAssembly,
}

fn shifted_designs(state: &FitState, data: &Dataset, covariate: &str, bins: usize) -> Result<Shifted> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("ALE needs at least 2 bins, got {bins}")));
    }
    if matches!(data.covariate(covariate), Some(Covariate::Categorical { .. })) {
        return Err(Error::InvalidInput(format!(
            "ALE for categorical covariate '{covariate}' is not supported"
        )));
    }
    let x = data.numeric(covariate)?.to_vec();
    if data.n() == 0 {
        return Err(Error::InvalidInput("ALE needs at least one observation".into()));
    }
    let (edges, bin, counts) = binning(&x, bins);
    if edges.len() < 2 {
        return Err(Error::InvalidInput(format!("covariate '{covariate}' is constant")));
    }
    let lo_x: Vec<f64> = bin.iter().map(|&b| edges[b - 1]).collect();
    let hi_x: Vec<f64> = bin.iter().map(|&b| edges[b]).collect();
    let lo = state.assemble(&data.with_numeric(covariate, lo_x)?)?;
    let hi = state.assemble(&data.with_numeric(covariate, hi_x)?)?;
    Ok(Shifted {
        edges,
        bin,
        counts,
        lo,
        hi,
    })
}

fn accumulate(per_bin: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(per_bin.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for v in per_bin {
        acc += v;
        out.push(acc);
    }
    out
}

fn eta_row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// ALE of `covariate` on `output` with `bins` quantile bins.
pub fn ale_estimate(
    state: &FitState,
    data: &Dataset,
    covariate: &str,
    output: AleOutput,
    bins: usize,
) -> Result<AleCurve> {
    let tables = state.tables();
    output.check(tables.d)?;
    let sh = shifted_designs(state, data, covariate, bins)?;
    let eta_lo = sh.lo.eta(&state.beta);
    let eta_hi = sh.hi.eta(&state.beta);
    let diffs: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            Ok(output.value(&eta_row(&eta_hi, i), &tables)? - output.value(&eta_row(&eta_lo, i), &tables)?)
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; sh.counts.len()];
    for (i, &b) in sh.bin.iter().enumerate() {
        sums[b - 1] += diffs[i];
    }
    let means: Vec<f64> = sums.iter().zip(&sh.counts).map(|(s, &c)| s / c as f64).collect();
    let uncentred = accumulate(&means);
    let n = data.n() as f64;
    let c = sh
        .counts
        .iter()
        .enumerate()
        .map(|(v, &k)| k as f64 * uncentred[v + 1])
        .sum::<f64>()
        / n;
    Ok(AleCurve {
        covariate: covariate.to_string(),
        output,
        edges: sh.edges,
        counts: sh.counts,
        centred: uncentred.iter().map(|u| u - c).collect(),
        uncentred,
        variance: None,
    })
}

/// `∇_β` of the uncentred curve at every edge.
pub fn ale_gradients(state: &FitState, curve: &AleCurve, data: &Dataset) -> Result<Vec<DVector<f64>>> {
    let tables = state.tables();
    let sh = shifted_designs(state, data, &curve.covariate, curve.bins())?;
    if sh.edges != curve.edges {
        return Err(Error::InvalidInput("curve bins do not match the data".into()));
    }
    let p = state.p();
    let eta_lo = sh.lo.eta(&state.beta);
    let eta_hi = sh.hi.eta(&state.beta);
    let chain = |asm: &DesignAssembly, jac: &[f64], i: usize, sign: f64, g: &mut [f64]| {
        for (a, pd) in asm.predictors.iter().enumerate() {
            if jac[a] == 0.0 {
                continue;
            }
            let base = pd.beta_offset;
            for c in 0..pd.p() {
                g[base + c] += sign * jac[a] * pd.x[(i, c)];
            }
        }
    };
    let per_bin: Vec<Vec<f64>> = (1..=sh.counts.len())
        .into_par_iter()
        .map(|b| {
            let mut g = vec![0.0; p];
            for i in (0..data.n()).filter(|&i| sh.bin[i] == b) {
                let jh = curve.output.gradient(&eta_row(&eta_hi, i), &tables)?;
                let jl = curve.output.gradient(&eta_row(&eta_lo, i), &tables)?;
                chain(&sh.hi, &jh, i, 1.0, &mut g);
                chain(&sh.lo, &jl, i, -1.0, &mut g);
            }
            let inv = 1.0 / sh.counts[b - 1] as f64;
            Ok(g.into_iter().map(|v| v * inv).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(per_bin.len() + 1);
    let mut acc = DVector::zeros(p);
    out.push(acc.clone());
    for g in per_bin {
        acc += DVector::from_vec(g);
        out.push(acc.clone());
    }
    Ok(out)
}

/// Pointwise `∇ᵀ V ∇` for a given posterior covariance.
pub fn ale_variance_with(v: &DMatrix<f64>, grads: &[DVector<f64>]) -> Vec<f64> {
    grads.iter().map(|g| g.dot(&(v * g)).max(0.0)).collect()
}

/// Delta-method variances of the uncentred curve under `V_β` from `state`.
pub fn ale_variance(state: &FitState, curve: &AleCurve, data: &Dataset) -> Result<Vec<f64>> {
    if state.neg_hessian.len() != state.p() * state.p() {
        return Err(Error::State("fit state carries no posterior covariance".into()));
    }
    let v = state.posterior_covariance()?;
    let grads = ale_gradients(state, curve, data)?;
    Ok(ale_variance_with(&v, &grads))
}
