use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use desklab::datagen::{generate_corpus_with, split_corpus, Split, SyntheticHmm, WindowSpec};
use desklab::distill::{teacher_label_with, LabelSettings};
use desklab::net::{self, Activation, ArchSpec};
use desklab::par::Exec;
use desklab::risk;

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn exhaustive(c: &mut Criterion) {
    let mut g = c.benchmark_group("exhaustive_verify_n5");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| risk::exhaustive_verify_with(black_box(5), exec).unwrap()));
    }
    g.finish();
}

fn corpus(c: &mut Criterion) {
    let spec = SyntheticHmm::default().build(1).unwrap();
    let mut g = c.benchmark_group("generate_corpus_200_utts");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| generate_corpus_with(&spec, 200, (100, 300), 7, exec).unwrap()));
    }
    g.finish();
}

fn labelling(c: &mut Criterion) {
    let spec = SyntheticHmm::default().build(1).unwrap();
    let corpus = generate_corpus_with(&spec, 120, (100, 300), 7, Exec::default()).unwrap();
    let h = corpus.hours_equivalent();
    let split = split_corpus(&corpus, 0.1 * h, 0.8 * h, 0.1 * h, 3).unwrap();
    let arch = ArchSpec {
        name: "teacher".into(),
        window: WindowSpec::symmetric(4, 3),
        feature_dim: spec.feature_dim,
        hidden_layers: vec![64; 5],
        num_classes: spec.num_states,
        activation: Activation::Relu,
    };
    let teacher = net::init_params(&arch, 5).unwrap();
    let unsup = split.unlabeled(Split::Unsupervised).unwrap();
    let test = split.evaluation(Split::Test).unwrap().stack(&arch.window);
    let mut g = c.benchmark_group("teacher_label");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| teacher_label_with(&teacher, &unsup, &LabelSettings::default(), exec).unwrap())
        });
    }
    g.finish();
    c.bench_function("predict_rows", |b| b.iter(|| teacher.predict_rows(black_box(&test.frames)).unwrap()));
}

criterion_group!(benches, exhaustive, corpus, labelling);
criterion_main!(benches);
