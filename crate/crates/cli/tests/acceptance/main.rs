//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`; extra numeric arguments restrict
//! the run to those criteria.

mod ale;
mod common;
mod derivatives;
mod end_to_end;
mod fitting;
mod integrity;
mod recovery;
mod scoring;
mod selection;

use std::process::ExitCode;
use std::time::Instant;

use common::Check;

type Criterion = (usize, &'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "derivative suite", derivatives::run),
        (2, "MCD integrity", integrity::run),
        (3, "fitting", fitting::run),
        (4, "selection", selection::run),
        (5, "recovery", recovery::run),
        (6, "scoring", scoring::run),
        (7, "ALE", ale::run),
        (8, "end-to-end", end_to_end::run),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
