use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use visionscale_core::corpus::{build_synthetic_corpus, sample_subset};
use visionscale_core::eval::{extract_features, linear_probe};
use visionscale_core::mae::{
    gradient, patchify_record, record_mask, size_ladder, train, ParameterStore, TrainSchedule,
};
use visionscale_core::scaling::{fit, FitOptions, ScalingPoint};
use visionscale_core::scenarios::builtin_table1;
use visionscale_core::{MixtureSpec, SubsetSpec};

fn mae(c: &mut Criterion) {
    let corpus = build_synthetic_corpus(64, &MixtureSpec::standard(), 10, 16, 1).unwrap();
    let ladder = size_ladder(16).unwrap();
    let mut group = c.benchmark_group("mae");
    for name in ["TOY-A", "TOY-B", "TOY-D"] {
        let config = *ladder.get(name).unwrap();
        let params = ParameterStore::init(&config, 3).unwrap();
        let record = &corpus.records[0];
        let patches = patchify_record(record, 1, config.patch_size).unwrap();
        let mask = record_mask(&record.id, config.num_patches(), 5).unwrap();
        group.bench_function(format!("gradient/{name}/16px"), |b| {
            b.iter(|| gradient(black_box(&params), &config, &patches, &mask).unwrap())
        });
    }
    let config = *ladder.get("TOY-A").unwrap();
    let schedule = TrainSchedule {
        epochs: 1,
        batch_size: 8,
        learning_rate: 0.05,
        seed: 2,
    };
    group.bench_function("train_epoch/TOY-A/64img", |b| {
        b.iter_batched(
            || ParameterStore::init(&config, 3).unwrap(),
            |p| train(p, &config, &corpus, &schedule).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let corpus = build_synthetic_corpus(500, &MixtureSpec::standard(), 10, 16, 1).unwrap();
    let config = *size_ladder(16).unwrap().get("TOY-B").unwrap();
    let params = ParameterStore::init(&config, 3).unwrap();
    let labels = corpus.labels().unwrap();
    let features = extract_features(&params, &config, &corpus).unwrap();
    c.bench_function("extract_features/TOY-B/500img", |b| {
        b.iter(|| extract_features(black_box(&params), &config, &corpus).unwrap())
    });
    c.bench_function("linear_probe/500x16", |b| {
        b.iter(|| linear_probe(black_box(&features), &labels, 0.2, 1e-4, 7).unwrap())
    });
    c.bench_function("sample_subset/500/0.25", |b| {
        let spec = SubsetSpec {
            fraction: 0.25,
            seed: 4,
            repeat_index: 1,
        };
        b.iter(|| sample_subset(black_box(&corpus), &spec).unwrap())
    });
}

fn law_fit(c: &mut Criterion) {
    let table: Vec<ScalingPoint> = builtin_table1()
        .iter()
        .map(|s| ScalingPoint::new(s.i, s.ppi, s.expected_precision_pct.unwrap()))
        .collect();
    let mut grid = Vec::new();
    for i in [0.1, 0.5, 1.0, 2.0] {
        for ppi in [16.0, 24.0, 32.0] {
            grid.push(ScalingPoint::new(
                i,
                ppi,
                1.7 * (f64::ln(i) + 2.0) * (f64::ln(ppi) + 1.2),
            ));
        }
    }
    let opts = FitOptions::default();
    c.bench_function("fit/table1", |b| {
        b.iter(|| fit(black_box(&table), &opts).unwrap())
    });
    c.bench_function("fit/12-point-grid", |b| {
        b.iter(|| fit(black_box(&grid), &opts).unwrap())
    });
}

criterion_group!(benches, mae, evaluation, law_fit);
criterion_main!(benches);
