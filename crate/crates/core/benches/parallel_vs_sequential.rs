use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hails_core::parallel::Execution;
use hails_core::pipeline::prepare;
use hails_core::sparsity::classify_nodes_with;
use hails_core::synth::{generate, SynthConfig};
use hails_core::training::{batch_loss_grad, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_batch_gradient(c: &mut Criterion) {
    let (h, panel) = generate(&SynthConfig {
        branching: vec![4, 4],
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        hidden: 32,
        ..Default::default()
    };
    let (_, data, model) = prepare(&h, &panel, None, &cfg, Execution::Sequential).unwrap();
    let batch: Vec<usize> = data.train.iter().copied().take(cfg.batch_size).collect();
    let mut group = c.benchmark_group("batch_loss_grad");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_loss_grad(&model, &h, &data, &batch, cfg.gamma, true, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("forward_only");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.forward_all(&data.inputs(batch[0]), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_classify(c: &mut Criterion) {
    let (h, panel) = generate(&SynthConfig {
        branching: vec![8, 8, 4],
        length: 720,
        ..Default::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("classify_nodes");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| classify_nodes_with(&panel, &h, 0.1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradient, bench_classify);
criterion_main!(benches);
