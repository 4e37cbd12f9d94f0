//! Sequential vs rayon execution of the data-parallel kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use labelprop::crf::motion_unary_with;
use labelprop::datasets::{estimate_flow_with, render_sequence};
use labelprop::trainer::evaluate;
use labelprop::{CueConfig, Exec, SynthConfig, TinySegModel, TrainConfig};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn kernels(c: &mut Criterion) {
    let cfg = SynthConfig {
        width: 96,
        height: 96,
        ..SynthConfig::default()
    };
    let seq = render_sequence(&cfg, 0).unwrap();
    let cues = CueConfig::default();

    let mut g = c.benchmark_group("motion_unary");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| motion_unary_with(&seq.labels[0], &seq.frames[0], &seq.frames[1], &seq.flows[0], 1.0, &cues, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("block_matching");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_flow_with(&seq.frames[0], &seq.frames[1], 8, 7, exec).unwrap())
        });
    }
    g.finish();

    let tc = TrainConfig::default();
    let model = TinySegModel::new(tc.shape(cfg.num_classes), 0).unwrap();
    let data: Vec<_> = seq.frames.iter().cloned().zip(seq.labels.iter().cloned()).collect();
    let mut g = c.benchmark_group("evaluate");
    for (name, exec) in EXECS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(&model, &data, exec).unwrap()));
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
