use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use covgam::score::SCORE_COLUMNS;

use crate::common::{ensure, Check};

const STAGES: [&str; 8] = ["synth", "fit-mean", "select", "fit", "forecast", "score", "bootstrap", "ale"];
const BUDGET: Duration = Duration::from_secs(15 * 60);

fn pipeline(out: &Path) -> Result<(), String> {
    for stage in STAGES {
        let o = Command::new(env!("CARGO_BIN_EXE_covgam"))
            .arg(stage)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || {
            format!("{stage} failed: {}", String::from_utf8_lossy(&o.stderr))
        })?;
    }
    Ok(())
}

fn contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

pub fn run() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let t0 = Instant::now();
    pipeline(&a)?;
    let elapsed = t0.elapsed();
    ensure(elapsed < BUDGET, || format!("pipeline took {elapsed:?}"))?;
    pipeline(&b)?;

    let (fa, fb) = (contents(&a)?, contents(&b)?);
    let header = String::from_utf8_lossy(fa.get("scores.csv").ok_or("no scores.csv")?)
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    let want = std::iter::once("model").chain(SCORE_COLUMNS).collect::<Vec<_>>().join(",");
    ensure(header == want, || format!("score table header '{header}'"))?;
    ensure(fa.keys().eq(fb.keys()), || "reruns wrote different file sets".to_string())?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("non-deterministic outputs: {differing:?}"))?;
    Ok(format!(
        "8 stages in {:.1}s; {} files byte-identical across reruns; score columns {}",
        elapsed.as_secs_f64(),
        fa.len(),
        SCORE_COLUMNS.join("|")
    ))
}
