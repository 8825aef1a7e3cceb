//! Compares the rayon and sequential paths on the three data-parallel loops.
//! Without the `parallel` feature both variants run sequentially.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use edgellm_core::accuracy::{evaluate_with, MCItem};
use edgellm_core::backends::{FinishReason, SimBackend, SimConfig};
use edgellm_core::bench::{build_report_with, RunRecord};
use edgellm_core::metrics::{cv_by_turn_with, PhaseTiming};
use edgellm_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn records(models: usize, per_model: usize) -> Vec<RunRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::with_capacity(models * per_model);
    for m in 0..models {
        for i in 0..per_model {
            let timing = PhaseTiming::new(
                rng.random_range(1..400),
                rng.random_range(10.0..40_000.0),
                rng.random_range(1..500),
                rng.random_range(10.0..120_000.0),
            );
            out.push(RunRecord::new(
                &format!("model-{m}"),
                &format!("conv-{:03}", i / 24),
                (i % 8) as u32 + 1,
                (i / 8 % 3) as u32 + 1,
                timing,
                chrono::DateTime::UNIX_EPOCH,
                FinishReason::MaxTokens,
            ));
        }
    }
    out
}

fn items(n: usize) -> Vec<MCItem> {
    (0..n)
        .map(|i| {
            MCItem::new(
                &format!("b-{i:05}"),
                &format!("Item {i}: the trophy did not fit in the case because _ was too big."),
                ["the trophy", "the case"],
                i % 2,
            )
            .unwrap()
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let recs = records(8, 6_000);
    let (no_res, no_acc) = (BTreeMap::new(), BTreeMap::new());
    let mut g = c.benchmark_group("build_report");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| build_report_with(black_box(&recs), &no_res, &no_acc, None, None, exec).unwrap())
        });
    }
    g.finish();

    let one_model = records(1, 40_000);
    let mut g = c.benchmark_group("cv_by_turn");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| cv_by_turn_with(black_box(&one_model), exec).unwrap())
        });
    }
    g.finish();

    let its = items(5_000);
    let sim = SimBackend::new(SimConfig::new(1.0, 1.0));
    let mut g = c.benchmark_group("evaluate");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_with(black_box(&its), &sim, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
