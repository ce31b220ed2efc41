//! Datasets: wide-CSV loading, synthetic generation with planted covariance
//! effects, and rolling-origin windows.
//!
//! The CSV layout has one row per settlement period. Region-specific covariates
//! use one column per region, named `<covariate>_<g>` with `g` in `1..=d`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcd::{self, McdIndexTables, PredictorRole};

/// Role of a covariate column group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRole {
    Continuous,
    Categorical,
    PerRegion,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariate {
    Continuous(Vec<f64>),
    Categorical { levels: Vec<String>, codes: Vec<usize> },
    /// One column per region, `values[g]` for zero-based region `g`.
    PerRegion(Vec<Vec<f64>>),
}

impl Covariate {
    pub fn role(&self) -> CovariateRole {
        match self {
            Covariate::Continuous(_) => CovariateRole::Continuous,
            Covariate::Categorical { .. } => CovariateRole::Categorical,
            Covariate::PerRegion(_) => CovariateRole::PerRegion,
        }
    }

    fn len(&self) -> usize {
        match self {
            Covariate::Continuous(v) => v.len(),
            Covariate::Categorical { codes, .. } => codes.len(),
            Covariate::PerRegion(cols) => cols.first().map_or(0, Vec::len),
        }
    }

    fn select(&self, rows: &[usize]) -> Covariate {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        match self {
            Covariate::Continuous(v) => Covariate::Continuous(pick(v)),
            Covariate::Categorical { levels, codes } => Covariate::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&i| codes[i]).collect(),
            },
            Covariate::PerRegion(cols) => {
                Covariate::PerRegion(cols.iter().map(|c| pick(c)).collect())
            }
        }
    }
}

/// Column-role map declared in the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub timestamp: String,
    pub responses: Vec<String>,
    pub covariates: BTreeMap<String, CovariateRole>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// An immutable table of responses, covariates and timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    timestamps: Vec<DateTime<Utc>>,
    // row-major n×d
    responses: Vec<f64>,
    covariates: BTreeMap<String, Covariate>,
}

impl Dataset {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        responses: Vec<Vec<f64>>,
        covariates: BTreeMap<String, Covariate>,
    ) -> Result<Self> {
        let n = timestamps.len();
        if responses.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} response rows for {} timestamps",
                responses.len(),
                n
            )));
        }
        let d = responses.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::InvalidInput("dataset needs at least one response".into()));
        }
        if responses.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("ragged response rows".into()));
        }
        for (name, cov) in &covariates {
            if cov.len() != n {
                return Err(Error::InvalidInput(format!(
                    "covariate '{name}' has length {}, expected {n}",
                    cov.len()
                )));
            }
            match cov {
                Covariate::PerRegion(cols) if cols.len() != d => {
                    return Err(Error::InvalidInput(format!(
                        "per-region covariate '{name}' has {} regions, expected {d}",
                        cols.len()
                    )));
                }
                Covariate::Categorical { levels, codes } if codes.iter().any(|&c| c >= levels.len()) => {
                    return Err(Error::InvalidInput(format!(
                        "categorical '{name}' has codes outside its level list"
                    )));
                }
                _ => {}
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        Ok(Self {
            n,
            d,
            timestamps,
            responses: responses.into_iter().flatten().collect(),
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    /// Response vector of observation `i`.
    pub fn response(&self, i: usize) -> &[f64] {
        &self.responses[i * self.d..(i + 1) * self.d]
    }

    pub fn response_column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.responses[i * self.d + j]).collect()
    }

    pub fn covariates(&self) -> &BTreeMap<String, Covariate> {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.get(name)
    }

    /// Splits `irr_2` into (`irr`, zero-based region 1) when `irr` is per-region.
    fn split_region<'a>(&self, name: &'a str) -> Option<(&'a str, usize)> {
        let (base, idx) = name.rsplit_once('_')?;
        let g: usize = idx.parse().ok()?;
        match self.covariates.get(base) {
            Some(Covariate::PerRegion(_)) if g >= 1 && g <= self.d => Some((base, g - 1)),
            _ => None,
        }
    }

    pub fn has_numeric(&self, name: &str) -> bool {
        self.numeric(name).is_ok()
    }

    /// A numeric column; per-region columns are addressed as `<name>_<g>`.
    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.covariates.get(name) {
            Some(Covariate::Continuous(v)) => return Ok(v),
            Some(Covariate::Categorical { .. }) => {
                return Err(Error::Schema(format!("covariate '{name}' is categorical")))
            }
            Some(Covariate::PerRegion(_)) => {
                return Err(Error::Schema(format!(
                    "covariate '{name}' is per-region; address it as '{name}_<g>'"
                )))
            }
            None => {}
        }
        if let Some((base, g)) = self.split_region(name) {
            if let Some(Covariate::PerRegion(cols)) = self.covariates.get(base) {
                return Ok(&cols[g]);
            }
        }
        Err(Error::Schema(format!("unknown covariate '{name}'")))
    }

    pub fn categorical(&self, name: &str) -> Result<(&[String], &[usize])> {
        match self.covariates.get(name) {
            Some(Covariate::Categorical { levels, codes }) => Ok((levels, codes)),
            Some(_) => Err(Error::Schema(format!("covariate '{name}' is not categorical"))),
            None => Err(Error::Schema(format!("unknown covariate '{name}'"))),
        }
    }

    /// Rows `rows` as a new dataset (timestamps stay increasing when rows are sorted).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let covariates = self
            .covariates
            .iter()
            .map(|(k, v)| (k.clone(), v.select(rows)))
            .collect();
        let mut responses = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            responses.extend_from_slice(self.response(i));
        }
        Dataset {
            n: rows.len(),
            d: self.d,
            timestamps: rows.iter().map(|&i| self.timestamps[i]).collect(),
            responses,
            covariates,
        }
    }

    pub fn slice(&self, range: Range<usize>) -> Dataset {
        let rows: Vec<usize> = range.collect();
        self.select_rows(&rows)
    }

    /// Same covariates and timestamps with responses replaced (e.g. residuals).
    pub fn with_responses(&self, rows: Vec<Vec<f64>>) -> Result<Dataset> {
        if rows.len() != self.n || rows.iter().any(|r| r.len() != self.d) {
            return Err(Error::InvalidInput("replacement responses have the wrong shape".into()));
        }
        let mut out = self.clone();
        out.responses = rows.into_iter().flatten().collect();
        Ok(out)
    }

    /// Copy with numeric column `name` (global or `<name>_<g>`) set to `values`.
    pub fn with_numeric(&self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.n {
            return Err(Error::InvalidInput(format!("column '{name}' needs {} values", self.n)));
        }
        let mut out = self.clone();
        if let Some(Covariate::Continuous(v)) = out.covariates.get_mut(name) {
            *v = values;
            return Ok(out);
        }
        if let Some((base, g)) = self.split_region(name) {
            if let Some(Covariate::PerRegion(cols)) = out.covariates.get_mut(base) {
                cols[g] = values;
                return Ok(out);
            }
        }
        Err(Error::Schema(format!("no numeric column '{name}'")))
    }

    /// Univariate dataset holding response `j` (zero-based). Per-region
    /// covariates become continuous columns named `<name>_<g>`.
    pub fn single_response(&self, j: usize) -> Dataset {
        let mut covariates = BTreeMap::new();
        for (name, cov) in &self.covariates {
            match cov {
                Covariate::PerRegion(cols) => {
                    for (g, c) in cols.iter().enumerate() {
                        covariates.insert(format!("{name}_{}", g + 1), Covariate::Continuous(c.clone()));
                    }
                }
                other => {
                    covariates.insert(name.clone(), other.clone());
                }
            }
        }
        Dataset {
            n: self.n,
            d: 1,
            timestamps: self.timestamps.clone(),
            responses: self.response_column(j),
            covariates,
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            timestamp: "ts".into(),
            responses: (1..=self.d).map(|g| format!("y_{g}")).collect(),
            covariates: self.covariates.iter().map(|(k, v)| (k.clone(), v.role())).collect(),
        }
    }

    /// Sample covariance of the responses (divisor `n`).
    pub fn response_covariance(&self) -> nalgebra::DMatrix<f64> {
        let d = self.d;
        let n = self.n as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..self.n).map(|i| self.response(i)[j]).sum::<f64>() / n)
            .collect();
        let mut s = nalgebra::DMatrix::zeros(d, d);
        for i in 0..self.n {
            let y = self.response(i);
            for a in 0..d {
                for b in 0..=a {
                    s[(a, b)] += (y[a] - mean[a]) * (y[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                s[(a, b)] /= n;
                s[(b, a)] = s[(a, b)];
            }
        }
        s
    }

    /// Serialises to the wide CSV layout described by [`Dataset::schema`].
    pub fn to_csv_string(&self) -> String {
        let mut header = vec!["ts".to_string()];
        header.extend((1..=self.d).map(|g| format!("y_{g}")));
        for (name, cov) in &self.covariates {
            match cov {
                Covariate::PerRegion(_) => header.extend((1..=self.d).map(|g| format!("{name}_{g}"))),
                _ => header.push(name.clone()),
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.n {
            out.push_str(&self.timestamps[i].format("%Y-%m-%dT%H:%M:%SZ").to_string());
            for v in self.response(i) {
                let _ = write!(out, ",{v:?}");
            }
            for cov in self.covariates.values() {
                match cov {
                    Covariate::Continuous(v) => {
                        let _ = write!(out, ",{:?}", v[i]);
                    }
                    Covariate::Categorical { levels, codes } => {
                        let _ = write!(out, ",{}", levels[codes[i]]);
                    }
                    Covariate::PerRegion(cols) => {
                        for c in cols {
                            let _ = write!(out, ",{:?}", c[i]);
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    None
}

/// Loads a wide CSV file according to `schema`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    load_dataset_from_reader(file, schema)
}

pub fn load_dataset_from_reader<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column \"{name}\"")))
    };
    let d = schema.responses.len();
    if d == 0 {
        return Err(Error::Schema("schema declares no response columns".into()));
    }
    let ts_col = col(&schema.timestamp)?;
    let resp_cols: Vec<usize> = schema.responses.iter().map(|r| col(r)).collect::<Result<_>>()?;

    enum Slot {
        Num(usize),
        Cat(usize),
        Region(Vec<usize>),
    }
    let mut slots = Vec::new();
    for (name, role) in &schema.covariates {
        let slot = match role {
            CovariateRole::Continuous => Slot::Num(col(name)?),
            CovariateRole::Categorical => Slot::Cat(col(name)?),
            CovariateRole::PerRegion => Slot::Region(
                (1..=d).map(|g| col(&format!("{name}_{g}"))).collect::<Result<_>>()?,
            ),
        };
        slots.push((name.clone(), slot));
    }

    let mut timestamps = Vec::new();
    let mut responses = Vec::new();
    let mut num: Vec<Vec<Vec<f64>>> = slots
        .iter()
        .map(|(_, s)| match s {
            Slot::Region(cols) => vec![Vec::new(); cols.len()],
            _ => vec![Vec::new()],
        })
        .collect();
    let mut cats: Vec<(Vec<String>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); slots.len()];

    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row_idx + 1;
        let cell = |c: usize| -> Result<&str> {
            let v = rec.get(c).unwrap_or("");
            if v.is_empty() {
                Err(Error::Parse {
                    row,
                    column: headers.get(c).unwrap_or("?").to_string(),
                    message: "missing value".into(),
                })
            } else {
                Ok(v)
            }
        };
        let number = |c: usize| -> Result<f64> {
            let s = cell(c)?;
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: headers[c].to_string(),
                message: format!("'{s}' is not a finite number"),
            })
        };
        let ts = cell(ts_col)?;
        timestamps.push(parse_timestamp(ts).ok_or_else(|| Error::Parse {
            row,
            column: schema.timestamp.clone(),
            message: format!("'{ts}' is not an ISO-8601 timestamp"),
        })?);
        let mut y = Vec::with_capacity(d);
        for &c in &resp_cols {
            y.push(number(c)?);
        }
        responses.push(y);
        for (k, (_, slot)) in slots.iter().enumerate() {
            match slot {
                Slot::Num(c) => num[k][0].push(number(*c)?),
                Slot::Region(cols) => {
                    for (g, &c) in cols.iter().enumerate() {
                        num[k][g].push(number(c)?);
                    }
                }
                Slot::Cat(c) => {
                    let v = cell(*c)?;
                    let (levels, codes) = &mut cats[k];
                    let code = match levels.iter().position(|l| l == v) {
                        Some(p) => p,
                        None => {
                            levels.push(v.to_string());
                            levels.len() - 1
                        }
                    };
                    codes.push(code);
                }
            }
        }
    }

    let mut covariates = BTreeMap::new();
    for (k, (name, slot)) in slots.into_iter().enumerate() {
        let cov = match slot {
            Slot::Num(_) => Covariate::Continuous(std::mem::take(&mut num[k][0])),
            Slot::Region(_) => Covariate::PerRegion(std::mem::take(&mut num[k])),
            Slot::Cat(_) => {
                let (levels, codes) = std::mem::take(&mut cats[k]);
                Covariate::Categorical { levels, codes }
            }
        };
        covariates.insert(name, cov);
    }
    Dataset::new(timestamps, responses, covariates)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Shape of a planted effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectTag {
    Constant,
    /// `amplitude * standardised(x)`.
    Linear,
    /// `amplitude * sin(2π x / 24)`.
    SinusoidTod,
    /// `amplitude * tanh(standardised(x))`.
    PlateauWind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    /// One-based linear predictor index.
    pub predictor: usize,
    /// Covariate name. A per-region base name (e.g. `wsp100`) resolves to the
    /// region of the predictor's row in `D`/`T`.
    pub covariate: String,
    pub effect: EffectTag,
    pub amplitude: f64,
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
    /// Constant baseline for all `q` predictors (zeros when absent).
    #[serde(default)]
    pub base_eta: Option<Vec<f64>>,
    #[serde(default)]
    pub mean_effects: Vec<PlantedEffect>,
    #[serde(default)]
    pub mcd_effects: Vec<PlantedEffect>,
}

impl SyntheticScenario {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generated dataset plus the noise-free `n×q` linear predictors.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth_eta: Vec<Vec<f64>>,
}

const DOW_NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

fn standardise(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|v| (v - m) / sd).collect()
}

struct Ar1 {
    phi: f64,
    state: f64,
}

impl Ar1 {
    fn new(phi: f64, rng: &mut ChaCha20Rng) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self { phi, state: z }
    }

    fn step(&mut self, rng: &mut ChaCha20Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.state = self.phi * self.state + (1.0 - self.phi * self.phi).sqrt() * z;
        self.state
    }
}

/// Builds the standard covariate set for `n` half-hourly periods.
fn synthetic_covariates(
    n: usize,
    d: usize,
    start: DateTime<Utc>,
    rng: &mut ChaCha20Rng,
) -> (Vec<DateTime<Utc>>, BTreeMap<String, Covariate>) {
    let timestamps: Vec<DateTime<Utc>> =
        (0..n).map(|i| start + Duration::minutes(30 * i as i64)).collect();
    let tod: Vec<f64> = timestamps
        .iter()
        .map(|t| t.hour_f64())
        .collect();
    let doy: Vec<f64> = timestamps.iter().map(|t| t.ordinal() as f64).collect();
    let days: Vec<f64> = timestamps
        .iter()
        .map(|t| (*t - start).num_minutes() as f64 / 1440.0)
        .collect();
    // installed capacity grows in jumps on random commissioning days
    let n_days = days.last().map_or(0, |t| *t as usize) + 1;
    let mut cap = Vec::with_capacity(n_days);
    let mut level = 1.0;
    for _ in 0..n_days {
        if rng.random::<f64>() < 0.3 {
            level += rng.random_range(0.005..0.03);
        }
        cap.push(level);
    }
    let wcap: Vec<f64> = days.iter().map(|t| cap[*t as usize]).collect();

    let mut levels: Vec<String> = Vec::new();
    let mut codes = Vec::with_capacity(n);
    for t in &timestamps {
        let name = DOW_NAMES[t.weekday().num_days_from_monday() as usize];
        let code = match levels.iter().position(|l| l == name) {
            Some(p) => p,
            None => {
                levels.push(name.to_string());
                levels.len() - 1
            }
        };
        codes.push(code);
    }

    let mut price = Ar1::new(0.98, rng);
    let n2ex: Vec<f64> = tod
        .iter()
        .map(|h| 50.0 + 8.0 * (2.0 * std::f64::consts::PI * (h - 12.0) / 24.0).cos() + 6.0 * price.step(rng))
        .collect();

    let mut wsp = Vec::with_capacity(d);
    let mut irr = Vec::with_capacity(d);
    let mut temp = Vec::with_capacity(d);
    let mut rain = Vec::with_capacity(d);
    for _ in 0..d {
        let mut w = Ar1::new(0.99, rng);
        wsp.push((0..n).map(|_| (6.0 + 2.5 * w.step(rng)).abs()).collect::<Vec<_>>());
        let mut cloud = Ar1::new(0.97, rng);
        irr.push(
            tod.iter()
                .map(|h| {
                    let sun = (std::f64::consts::PI * (h - 6.0) / 12.0).sin().max(0.0);
                    let clear = 1.0 / (1.0 + (-cloud.step(rng)).exp());
                    100.0 * sun * clear
                })
                .collect::<Vec<_>>(),
        );
        let mut tn = Ar1::new(0.995, rng);
        temp.push(
            (0..n)
                .map(|i| {
                    283.0
                        + 6.0 * (2.0 * std::f64::consts::PI * (doy[i] - 110.0) / 365.0).sin()
                        + 2.0 * (2.0 * std::f64::consts::PI * (tod[i] - 9.0) / 24.0).sin()
                        + 2.0 * tn.step(rng)
                })
                .collect::<Vec<_>>(),
        );
        let mut rn = Ar1::new(0.9, rng);
        rain.push((0..n).map(|_| (rn.step(rng) - 0.5).max(0.0).powi(2)).collect::<Vec<_>>());
    }

    let mut cov = BTreeMap::new();
    cov.insert("t".into(), Covariate::Continuous(days));
    cov.insert("tod".into(), Covariate::Continuous(tod));
    cov.insert("doy".into(), Covariate::Continuous(doy));
    cov.insert("wcap".into(), Covariate::Continuous(wcap));
    cov.insert("n2ex".into(), Covariate::Continuous(n2ex));
    cov.insert("dow".into(), Covariate::Categorical { levels, codes });
    cov.insert("wsp100".into(), Covariate::PerRegion(wsp));
    cov.insert("irr".into(), Covariate::PerRegion(irr));
    cov.insert("temp".into(), Covariate::PerRegion(temp));
    cov.insert("rain".into(), Covariate::PerRegion(rain));
    (timestamps, cov)
}

trait HourExt {
    fn hour_f64(&self) -> f64;
}

impl HourExt for DateTime<Utc> {
    fn hour_f64(&self) -> f64 {
        use chrono::Timelike;
        self.hour() as f64 + self.minute() as f64 / 60.0
    }
}

fn resolve_planted<'a>(
    cov: &'a BTreeMap<String, Covariate>,
    name: &str,
    region: usize,
) -> Result<&'a [f64]> {
    match cov.get(name) {
        Some(Covariate::Continuous(v)) => return Ok(v),
        Some(Covariate::PerRegion(cols)) => return Ok(&cols[region]),
        Some(Covariate::Categorical { .. }) => {
            return Err(Error::Scenario(format!("covariate '{name}' is categorical")))
        }
        None => {}
    }
    if let Some((base, idx)) = name.rsplit_once('_') {
        if let (Some(Covariate::PerRegion(cols)), Ok(g)) = (cov.get(base), idx.parse::<usize>()) {
            if g >= 1 && g <= cols.len() {
                return Ok(&cols[g - 1]);
            }
        }
    }
    Err(Error::Scenario(format!("unknown covariate '{name}'")))
}

/// Generates responses from the planted linear predictors.
pub fn generate_synthetic(scenario: &SyntheticScenario) -> Result<SyntheticData> {
    let d = scenario.d;
    let n = scenario.n;
    if d == 0 || n == 0 {
        return Err(Error::Scenario("d and n must be positive".into()));
    }
    let tables = McdIndexTables::new(d);
    let q = tables.q;
    let base = match &scenario.base_eta {
        Some(b) if b.len() != q => {
            return Err(Error::Scenario(format!("base_eta has length {}, expected {q}", b.len())))
        }
        Some(b) => b.clone(),
        None => vec![0.0; q],
    };
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    let (timestamps, covariates) = synthetic_covariates(n, d, scenario.start, &mut rng);

    let mut truth = vec![base; n];
    for (effects, allowed) in [(&scenario.mean_effects, 1..=d), (&scenario.mcd_effects, d + 1..=q)] {
        for eff in effects.iter() {
            if !allowed.contains(&eff.predictor) {
                return Err(Error::Scenario(format!(
                    "predictor {} outside {:?}",
                    eff.predictor, allowed
                )));
            }
            let j = eff.predictor - 1;
            let region = tables.role(j).region();
            let x = resolve_planted(&covariates, &eff.covariate, region)?;
            let values: Vec<f64> = match eff.effect {
                EffectTag::Constant => vec![eff.amplitude; n],
                EffectTag::Linear => standardise(x).into_iter().map(|z| eff.amplitude * z).collect(),
                EffectTag::SinusoidTod => x
                    .iter()
                    .map(|h| eff.amplitude * (2.0 * std::f64::consts::PI * h / 24.0).sin())
                    .collect(),
                EffectTag::PlateauWind => standardise(x)
                    .into_iter()
                    .map(|z| eff.amplitude * z.tanh())
                    .collect(),
            };
            for (row, v) in truth.iter_mut().zip(values) {
                row[j] += v;
            }
        }
    }
    for row in &truth {
        for j in d..2 * d {
            if row[j].abs() > 10.0 {
                return Err(Error::Scenario(format!(
                    "variance predictor {} reaches |eta| = {:.3} > 10",
                    j + 1,
                    row[j].abs()
                )));
            }
        }
    }

    let mut responses = Vec::with_capacity(n);
    for row in &truth {
        let f = mcd::eta_to_covariance(row, &tables)?;
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..d)
            .map(|a| {
                let mut s = row[a];
                for k in 0..=a {
                    s += f.l[(a, k)] * f.d2[k].sqrt() * eps[k];
                }
                s
            })
            .collect();
        responses.push(y);
    }
    let dataset = Dataset::new(timestamps, responses, covariates)?;
    Ok(SyntheticData {
        dataset,
        truth_eta: truth,
    })
}

/// Role of the zero-based predictor `j` (helper re-export for scenario authors).
pub fn predictor_role(d: usize, j: usize) -> PredictorRole {
    McdIndexTables::new(d).role(j)
}

// ---------------------------------------------------------------------------
// Rolling windows
// ---------------------------------------------------------------------------

/// Length of each forecast block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockUnit {
    #[default]
    Month,
    Week,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Training uses every row strictly before this instant.
    pub train_end: DateTime<Utc>,
    pub test_start: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
    pub train_rows: Range<usize>,
    pub test_rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingWindows {
    pub windows: Vec<Window>,
}

fn month_start(year: i32, month: u32) -> Option<DateTime<Utc>> {
    NaiveDate::from_ymd_opt(year, month, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| Utc.from_utc_datetime(&t))
}

fn next_block(t: DateTime<Utc>, unit: BlockUnit) -> DateTime<Utc> {
    match unit {
        BlockUnit::Week => t + Duration::days(7),
        BlockUnit::Month => {
            let (y, m) = if t.month() == 12 { (t.year() + 1, 1) } else { (t.year(), t.month() + 1) };
            month_start(y, m).expect("valid month")
        }
    }
}

/// Monthly expanding-window splits starting at calendar month `(year, month)`.
pub fn rolling_windows(dataset: &Dataset, year: i32, month: u32) -> Result<RollingWindows> {
    let start = month_start(year, month)
        .ok_or_else(|| Error::Range(format!("invalid month {year}-{month:02}")))?;
    rolling_windows_from(dataset, start, BlockUnit::Month)
}

/// Expanding-window splits with consecutive test blocks of `unit` length.
pub fn rolling_windows_from(
    dataset: &Dataset,
    first_test_start: DateTime<Utc>,
    unit: BlockUnit,
) -> Result<RollingWindows> {
    let ts = dataset.timestamps();
    let (first, last) = match (ts.first(), ts.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::Range("empty dataset".into())),
    };
    if first_test_start <= first {
        return Err(Error::Range(format!(
            "first test block {first_test_start} does not leave training data before it (data start {first})"
        )));
    }
    if first_test_start > last {
        return Err(Error::Range(format!(
            "first test block {first_test_start} is after the data end {last}"
        )));
    }
    let row_at = |t: DateTime<Utc>| ts.partition_point(|x| *x < t);
    let mut windows = Vec::new();
    let mut start = first_test_start;
    while start <= last {
        let end = next_block(start, unit);
        let a = row_at(start);
        let b = row_at(end);
        if b > a {
            windows.push(Window {
                train_end: start,
                test_start: start,
                test_end: end,
                train_rows: 0..a,
                test_rows: a..b,
            });
        }
        start = end;
    }
    Ok(RollingWindows { windows })
}
