use std::hint::black_box;

use covgam::data::generate_synthetic;
use covgam::score::{score_series, ForecastDistribution};
use covgam::select::{boost_rank, residual_offsets, BoostConfig};
use covgam::{fit_model, Dataset, EffectSpec, FitOptions, ModelSpec, SyntheticScenario};
use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;

fn synthetic(d: usize, n: usize) -> Dataset {
    let sc: SyntheticScenario = serde_json::from_str(&format!(
        r#"{{"d":{d},"n":{n},"seed":3,
            "mcd_effects":[{{"predictor":{},"covariate":"tod","effect":"sinusoid_tod","amplitude":0.8}}]}}"#,
        d + 1
    ))
    .unwrap();
    generate_synthetic(&sc).unwrap().dataset
}

fn fitting(c: &mut Criterion) {
    let ds = synthetic(3, 1500);
    let mut spec = ModelSpec::intercepts(3);
    spec.predictor_mut(3).effects.push(EffectSpec::cr("tod", 10));
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    g.bench_function("fit_model d=3 n=1500", |b| {
        b.iter(|| fit_model(black_box(&spec), &ds, &FitOptions::default()).unwrap())
    });
    let off = residual_offsets(&ds, false).unwrap();
    let cfg = BoostConfig { m: 100, ..BoostConfig::default() };
    g.bench_function("boost_rank d=3 n=1500 m=100", |b| {
        b.iter(|| boost_rank(black_box(&ds), &off, &cfg).unwrap())
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let d = 14;
    let n = 48;
    let s = DMatrix::from_fn(d, d, |a, b| if a == b { 1.0 } else { 0.3 });
    let fc = ForecastDistribution::new("m", vec![vec![0.0; d]; n], vec![s; n]).unwrap();
    let y = vec![vec![0.5; d]; n];
    let mut g = c.benchmark_group("score");
    g.sample_size(10);
    g.bench_function("score_series d=14 n=48", |b| {
        b.iter(|| score_series(black_box(&fc), &y, 500, 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, fitting, scoring);
criterion_main!(benches);
