use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use hlspower::synth::gen_dataset;
use hlspower::train::train_single;
use hlspower::{
    annotate_features, construct_graph, interpret_dfg, HecGnn, HecGnnConfig, PowerKind,
};
use hlspower_bench::design;

fn passes(c: &mut Criterion) {
    let mut group = c.benchmark_group("construct_graph");
    for lanes in [2, 8] {
        let d = design(lanes);
        group.bench_with_input(BenchmarkId::from_parameter(lanes), &d.dfg, |b, g| {
            b.iter(|| construct_graph(g, &mut Vec::new()))
        });
    }
    group.finish();
}

fn simulate(c: &mut Criterion) {
    let d = design(4);
    let g = construct_graph(&d.dfg, &mut Vec::new());
    let stimuli = d.stimuli.restricted_to(&g);
    c.bench_function("interpret_and_annotate", |b| {
        b.iter(|| {
            let traces = interpret_dfg(&g, &stimuli, d.iterations).unwrap();
            annotate_features(&g, &traces).unwrap()
        })
    });
}

fn model(c: &mut Criterion) {
    let samples: Vec<_> = gen_dataset(64, 3, PowerKind::Dynamic)
        .unwrap()
        .into_iter()
        .map(|r| r.sample)
        .collect();
    let m = HecGnn::new(HecGnnConfig::default(), 0).unwrap();
    c.bench_function("predict_64", |b| {
        b.iter(|| m.predict_many(&samples).unwrap())
    });

    let cfg = HecGnnConfig {
        epochs: 1,
        ..Default::default()
    };
    c.bench_function("train_epoch_64", |b| {
        b.iter_batched(
            || samples.clone(),
            |s| train_single(&s, &[], &cfg, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, passes, simulate, model);
criterion_main!(benches);
