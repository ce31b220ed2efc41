use std::sync::OnceLock;

use covgam::data::{generate_synthetic, SyntheticData};
use covgam::select::{
    apply_m_star, boost_rank, choose_l, residual_offsets, BoostConfig, LChoice, RankedEffects,
};
use covgam::{Dataset, FitOptions, SyntheticScenario};

use crate::common::{ensure, Check};

pub const N_TRAIN: usize = 2000;
pub const N_VALID: usize = 500;
pub const N_HOLDOUT: usize = 500;
const TOP: usize = 3;

/// Log-variance of region 1 follows time of day; the `T₂₁` entry follows
/// temperature in region 2.
pub fn scenario() -> SyntheticScenario {
    serde_json::from_str(&format!(
        r#"{{"d":3,"n":{},"seed":11,
            "base_eta":[0,0,0, 0,-0.2,0.1, 0.3,0.4,-0.5],
            "mcd_effects":[
              {{"predictor":4,"covariate":"tod","effect":"sinusoid_tod","amplitude":1.0}},
              {{"predictor":7,"covariate":"temp","effect":"linear","amplitude":0.8}}]}}"#,
        N_TRAIN + N_VALID + N_HOLDOUT
    ))
    .expect("scenario parses")
}

pub struct Planted {
    pub synth: SyntheticData,
    pub train: Dataset,
    pub holdout: Dataset,
    pub config: BoostConfig,
    pub ranked: RankedEffects,
    pub choice: LChoice,
}

fn build() -> Result<Planted, String> {
    let synth = generate_synthetic(&scenario()).map_err(|e| e.to_string())?;
    let train = synth.dataset.slice(0..N_TRAIN);
    let valid = synth.dataset.slice(N_TRAIN..N_TRAIN + N_VALID);
    let holdout = synth.dataset.slice(N_TRAIN + N_VALID..synth.dataset.n());
    let config = BoostConfig::default();
    let offsets = residual_offsets(&train, false).map_err(|e| e.to_string())?;
    let mut ranked = boost_rank(&train, &offsets, &config).map_err(|e| e.to_string())?;
    apply_m_star(&mut ranked, &valid).map_err(|e| e.to_string())?;
    let choice = choose_l(&ranked, &train, &valid, &config.l_grid, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    Ok(Planted {
        synth,
        train,
        holdout,
        config,
        ranked,
        choice,
    })
}

pub fn planted() -> Result<&'static Planted, String> {
    static CELL: OnceLock<Result<Planted, String>> = OnceLock::new();
    CELL.get_or_init(build).as_ref().map_err(Clone::clone)
}

pub fn run() -> Check {
    let p = planted()?;
    let top: Vec<_> = p.ranked.ranking.iter().take(TOP).collect();
    let describe = || {
        top.iter()
            .map(|r| format!("(j{} {})", r.j, r.label))
            .collect::<Vec<_>>()
            .join(", ")
    };
    // one-based predictors, matched on the planted covariate
    for (j, cov) in [(4usize, "tod"), (7, "temp")] {
        ensure(top.iter().any(|r| r.j == j && r.label.contains(cov)), || {
            format!("planted pair (η{j}, {cov}) not in top {TOP}: {}", describe())
        })?;
    }
    let score = |l: usize| {
        p.choice
            .grid
            .iter()
            .find(|g| g.l == l)
            .and_then(|g| g.validation_loglik)
    };
    let base = score(0).ok_or("L = 0 fit failed")?;
    let chosen = score(p.choice.l).ok_or("chosen L has no score")?;
    ensure(p.choice.l > 0 && chosen > base, || {
        format!("chosen L = {} scores {chosen} vs {base} at L = 0", p.choice.l)
    })?;
    ensure(p.ranked.nu == 0.1 && p.ranked.target_edf == 4.0, || {
        format!("trace metadata ν = {}, edf = {}", p.ranked.nu, p.ranked.target_edf)
    })?;
    let off = p
        .ranked
        .candidates
        .iter()
        .filter(|c| c.p > 4)
        .map(|c| (c.edf - 4.0).abs())
        .fold(0.0, f64::max);
    ensure(off < 1e-6, || format!("candidate edf off target by {off:e}"))?;
    Ok(format!(
        "top {TOP}: {}; L = {} ({chosen:.2} vs {base:.2} at L = 0); M* = {:?}; ν = 0.1, edf = 4 (max dev {off:.0e})",
        describe(),
        p.choice.l,
        p.ranked.m_star
    ))
}
