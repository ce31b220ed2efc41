//! Subcommand implementations.

use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use chrono::{DateTime, Duration, Utc};
use covgam::ale::{ale_estimate, ale_variance, AleCurve, AleOutput};
use covgam::baseline::{copula_forecast, fit_copula_baseline, CopulaModel};
use covgam::data::{generate_synthetic, load_dataset_from_reader, rolling_windows_from, Dataset, Schema};
use covgam::fit::{fit_mean_models, residual_dataset, univariate_mean_spec, FitState};
use covgam::score::{
    block_bootstrap_diff, forecast_from_states, quantile_residuals, score_series, transform_forecast, transform_observations,
    BootstrapSummary, ForecastDistribution, ScoreSeries, ScoreTable, TransformSpec, SCORE_COLUMNS,
};
use covgam::select::{apply_m_star, boost_rank, choose_l, residual_offsets, BoostConfig, LChoice, RankedEffects, Restriction};
use covgam::{fit_model, ModelSpec};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Workspace;
use crate::config::{AleRequest, RunConfig};

pub struct Context {
    pub cfg: RunConfig,
    pub base: PathBuf,
    pub transform: Option<PathBuf>,
}

/// Row ranges derived from the timestamps.
struct Layout {
    pre: Range<usize>,
    boost: Range<usize>,
    valid: Range<usize>,
    windows: Vec<covgam::data::Window>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub ranked: RankedEffects,
    pub choice: LChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionSet {
    pub mcd: Selection,
    pub scale: Selection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedSpec {
    pub model: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowForecasts {
    pub train_end: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
    pub test_rows: Range<usize>,
    pub forecasts: Vec<ForecastDistribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastSet {
    pub models: Vec<String>,
    pub windows: Vec<WindowForecasts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub table: ScoreTable,
    pub series: Vec<ScoreSeries>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnComparison {
    pub column: String,
    pub model_a: String,
    pub model_b: String,
    pub summary: BootstrapSummary,
}

pub const BASELINE_MODEL: &str = "gaulss+cop";

impl Context {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn dataset(&self, ws: &mut Workspace) -> Result<Dataset> {
        let schema_path = self
            .cfg
            .schema
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_else(|| ws.dir.join("schema.json"));
        let data_path = self
            .cfg
            .dataset
            .as_deref()
            .map(|p| self.resolve(p))
            .unwrap_or_else(|| ws.dir.join("data.csv"));
        let schema: Schema = serde_json::from_slice(&ws.read(&schema_path)?)
            .map_err(|e| covgam::Error::Schema(format!("{}: {e}", schema_path.display())))?;
        let bytes = ws.read(&data_path)?;
        Ok(load_dataset_from_reader(bytes.as_slice(), &schema)?)
    }

    fn layout(&self, ds: &Dataset) -> Result<Layout> {
        let ts = ds.timestamps();
        let (first, last) = (ts[0], ts[ts.len() - 1]);
        let start = self.cfg.test_start(first, last);
        let windows = rolling_windows_from(ds, start, self.cfg.block(first, last))?.windows;
        let pre = windows[0].train_rows.clone();
        let vstart = ts.partition_point(|t| *t < start - Duration::days(self.cfg.validation_days));
        if vstart == 0 || vstart >= pre.end {
            return Err(covgam::Error::Range(format!(
                "{} validation days leave no boosting data before {start}",
                self.cfg.validation_days
            ))
            .into());
        }
        Ok(Layout {
            boost: 0..vstart,
            valid: vstart..pre.end,
            pre,
            windows,
        })
    }

    fn mean_specs(&self, d: usize) -> Result<Vec<ModelSpec>> {
        (1..=d)
            .map(|g| Ok(univariate_mean_spec(self.cfg.mean_effects(g)?)))
            .collect()
    }
}

pub fn synth(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let sc = ctx.cfg.scenario()?;
    let out = generate_synthetic(&sc)?;
    let ds = &out.dataset;
    ws.write_text("data.csv", &ds.to_csv_string())?;
    let mut schema = serde_json::to_string_pretty(&ds.schema())?;
    schema.push('\n');
    ws.write_text("schema.json", &schema)?;
    let q = covgam::mcd::n_predictors(ds.d());
    let mut truth = String::from("ts");
    for j in 1..=q {
        truth.push_str(&format!(",eta_{j}"));
    }
    truth.push('\n');
    for (t, row) in ds.timestamps().iter().zip(&out.truth_eta) {
        truth.push_str(&t.format("%Y-%m-%dT%H:%M:%SZ").to_string());
        for v in row {
            truth.push_str(&format!(",{v:?}"));
        }
        truth.push('\n');
    }
    ws.write_text("truth_eta.csv", &truth)?;
    ws.write_json("synth.json", "scenario", &sc)?;
    info!("synthesised {} rows, d = {}", ds.n(), ds.d());
    Ok(())
}

pub fn fit_mean(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let lay = ctx.layout(&ds)?;
    let pre = ds.slice(lay.pre);
    let states = fit_mean_models(&pre, &ctx.mean_specs(ds.d())?, &ctx.cfg.fit)?;
    ws.write_json("mean_states.json", "mean-states", &states)?;
    Ok(())
}

fn run_selection(train: &Dataset, valid: &Dataset, cfg: &BoostConfig, ctx: &Context) -> Result<Selection> {
    let offsets = residual_offsets(train, cfg.zero_t)?;
    let mut ranked = boost_rank(train, &offsets, cfg)?;
    let m_star = apply_m_star(&mut ranked, valid)?;
    info!(
        "boosting: {} steps, M* = {m_star}, {} ranked pairs",
        ranked.trace.len(),
        ranked.ranking.len()
    );
    let choice = choose_l(&ranked, train, valid, &cfg.l_grid, &ctx.cfg.fit)?;
    info!("chosen L = {}", choice.l);
    Ok(Selection { ranked, choice })
}

pub fn select(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let lay = ctx.layout(&ds)?;
    let means: Vec<FitState> = ws.load("mean_states.json")?;
    let resid = residual_dataset(&means, &ds.slice(lay.pre.clone()))?;
    let train = resid.slice(lay.boost.clone());
    let valid = resid.slice(lay.valid.clone());
    let mcd = run_selection(&train, &valid, &ctx.cfg.boost, ctx)?;
    let scale_cfg = BoostConfig {
        restriction: Restriction::CalRen,
        zero_t: true,
        ..ctx.cfg.boost.clone()
    };
    let scale = run_selection(&train, &valid, &scale_cfg, ctx)?;
    ws.write_text("trace.csv", &mcd.ranked.trace_csv())?;
    ws.write_text("scale_trace.csv", &scale.ranked.trace_csv())?;
    let spec = NamedSpec {
        model: ctx.cfg.restriction().model_name().to_string(),
        spec: mcd.choice.spec.clone(),
    };
    let scale_spec = NamedSpec {
        model: BASELINE_MODEL.to_string(),
        spec: scale.choice.spec.clone(),
    };
    ws.write_json("spec.json", "model-spec", &spec)?;
    ws.write_json("scale_spec.json", "model-spec", &scale_spec)?;
    ws.write_json("selection.json", "selection", &SelectionSet { mcd, scale })?;
    Ok(())
}

pub fn fit(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let lay = ctx.layout(&ds)?;
    let means: Vec<FitState> = ws.load("mean_states.json")?;
    let spec: NamedSpec = ws.load("spec.json")?;
    let scale: NamedSpec = ws.load("scale_spec.json")?;
    let pre = ds.slice(lay.pre);
    let resid = residual_dataset(&means, &pre)?;
    let state = fit_model(&spec.spec, &resid, &ctx.cfg.fit)?;
    ws.write_json("fit_state.json", "fit-state", &state)?;
    let copula = fit_copula_baseline(&pre, &means, &scale.spec, &ctx.cfg.fit)?;
    ws.write_json("copula.json", "copula", &copula)?;
    Ok(())
}

/// Replaces covariance-predictor offsets with those of `resid`.
fn refresh_offsets(spec: &ModelSpec, resid: &Dataset, zero_t: bool) -> Result<ModelSpec> {
    let offsets = residual_offsets(resid, zero_t)?;
    let mut out = spec.clone();
    for p in out.predictors.iter_mut().filter(|p| p.index > spec.d) {
        p.offset = offsets[p.index - 1];
    }
    Ok(out)
}

fn window_forecasts(
    ctx: &Context,
    ds: &Dataset,
    w: &covgam::data::Window,
    spec: &NamedSpec,
    scale: &NamedSpec,
) -> Result<WindowForecasts> {
    let train = ds.slice(w.train_rows.clone());
    let test = ds.slice(w.test_rows.clone());
    let means = fit_mean_models(&train, &ctx.mean_specs(ds.d())?, &ctx.cfg.fit)?;
    let resid = residual_dataset(&means, &train)?;
    let cov = fit_model(&refresh_offsets(&spec.spec, &resid, false)?, &resid, &ctx.cfg.fit)?;
    let mut mcd = forecast_from_states(&spec.model, &means, &cov, &test)?;
    let copula: CopulaModel =
        fit_copula_baseline(&train, &means, &refresh_offsets(&scale.spec, &resid, true)?, &ctx.cfg.fit)?;
    let mut base = copula_forecast(&copula, &test)?;
    let end = w.train_end.to_rfc3339();
    mcd.train_end = Some(end.clone());
    base.train_end = Some(end);
    Ok(WindowForecasts {
        train_end: w.train_end,
        test_end: w.test_end,
        test_rows: w.test_rows.clone(),
        forecasts: vec![mcd, base],
    })
}

pub fn forecast(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let lay = ctx.layout(&ds)?;
    let spec: NamedSpec = ws.load("spec.json")?;
    let scale: NamedSpec = ws.load("scale_spec.json")?;
    let windows: Vec<WindowForecasts> = lay
        .windows
        .par_iter()
        .map(|w| window_forecasts(ctx, &ds, w, &spec, &scale))
        .collect::<Result<_>>()?;
    let set = ForecastSet {
        models: vec![spec.model.clone(), BASELINE_MODEL.to_string()],
        windows,
    };
    ws.write_json("forecasts.json", "forecasts", &set)?;
    Ok(())
}

pub fn score(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let set: ForecastSet = ws.load("forecasts.json")?;
    let mut y: Vec<Vec<f64>> = Vec::new();
    for w in &set.windows {
        y.extend(w.test_rows.clone().map(|i| ds.response(i).to_vec()));
    }
    let transform = match &ctx.transform {
        Some(p) => {
            let spec: TransformSpec = serde_json::from_slice(&ws.read(p)?)
                .map_err(|e| covgam::Error::InvalidInput(format!("{}: {e}", p.display())))?;
            Some((spec.names(), spec.matrix(ds.d())?))
        }
        None => None,
    };
    let regions = match &transform {
        Some((names, _)) => names.clone(),
        None => (1..=ds.d()).map(|g| format!("y_{g}")).collect(),
    };
    let y = match &transform {
        Some((_, a)) => transform_observations(&y, a),
        None => y,
    };
    let samples = ctx.cfg.variogram_samples;
    let seed = ctx.cfg.seed;
    let mut table = ScoreTable::new(regions, samples, seed);
    let mut series = Vec::new();
    let mut resid_csv = String::from("model,period,region,residual\n");
    for (m, name) in set.models.iter().enumerate() {
        let parts: Vec<ForecastDistribution> = set.windows.iter().map(|w| w.forecasts[m].clone()).collect();
        let mut fc = ForecastDistribution::concat(&parts)?;
        fc.model = name.clone();
        if let Some((_, a)) = &transform {
            fc = transform_forecast(&fc, a)?;
        }
        for (i, row) in quantile_residuals(&fc, &y)?.iter().enumerate() {
            for (g, r) in table.meta.regions.iter().zip(row) {
                resid_csv.push_str(&format!("{name},{i},{g},{r:?}\n"));
            }
        }
        let s = score_series(&fc, &y, samples, seed)?;
        table.rows.push(s.row());
        series.push(s);
    }
    let stem = if transform.is_some() { "scores_transformed" } else { "scores" };
    ws.write_text(&format!("{stem}.csv"), &table.to_csv())?;
    ws.write_text(&format!("{stem}_quantile_residuals.csv"), &resid_csv)?;
    ws.write_json(&format!("{stem}.json"), "scores", &ScoreReport { table, series })?;
    Ok(())
}

pub fn bootstrap(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let report: ScoreReport = ws.load("scores.json")?;
    let bc = &ctx.cfg.bootstrap;
    let a = &report.series[0];
    let mut out = Vec::new();
    let mut csv = String::from("column,model_a,model_b,observed,q025,q500,q975\n");
    for b in &report.series[1..] {
        for (c, name) in SCORE_COLUMNS.iter().enumerate() {
            let (Some(sa), Some(sb)) = (&a.columns[c], &b.columns[c]) else {
                continue;
            };
            let block = bc.block_len.min(sa.len());
            let s = block_bootstrap_diff(sa, sb, block, bc.n_boot, ctx.cfg.seed)?;
            csv.push_str(&format!(
                "{name},{},{},{:?},{:?},{:?},{:?}\n",
                a.model, b.model, s.observed, s.q025, s.q500, s.q975
            ));
            out.push(ColumnComparison {
                column: name.to_string(),
                model_a: a.model.clone(),
                model_b: b.model.clone(),
                summary: s,
            });
        }
    }
    ws.write_text("bootstrap.csv", &csv)?;
    ws.write_json("bootstrap.json", "bootstrap", &out)?;
    Ok(())
}

fn default_ale() -> Vec<AleRequest> {
    ["sigma:1:1", "corr:2:1"]
        .iter()
        .map(|o| AleRequest {
            covariate: "tod".into(),
            output: o.to_string(),
            bins: 20,
        })
        .collect()
}

pub fn ale(ctx: &Context, ws: &mut Workspace) -> Result<()> {
    let ds = ctx.dataset(ws)?;
    let lay = ctx.layout(&ds)?;
    let means: Vec<FitState> = ws.load("mean_states.json")?;
    let state: FitState = ws.load("fit_state.json")?;
    let resid = residual_dataset(&means, &ds.slice(lay.pre))?;
    let requests = if ctx.cfg.ale.is_empty() {
        default_ale()
    } else {
        ctx.cfg.ale.clone()
    };
    let mut curves: Vec<AleCurve> = Vec::new();
    for r in &requests {
        let output = AleOutput::parse(&r.output)?;
        let mut curve = ale_estimate(&state, &resid, &r.covariate, output, r.bins)
            .with_context(|| format!("ALE of {} on {}", r.covariate, r.output))?;
        curve.variance = Some(ale_variance(&state, &curve, &resid)?);
        let name = format!("ale_{}_{}.csv", r.covariate, r.output.replace(':', "_"));
        ws.write_text(&name, &curve.to_csv())?;
        curves.push(curve);
    }
    ws.write_json("ale.json", "ale", &curves)?;
    Ok(())
}
