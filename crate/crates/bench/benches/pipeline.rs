use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mvg_bench::overfit_fixture;
use mvg_core::kernel::Session;
use mvg_core::training::total_loss;
use mvg_core::{build_multi_view_graph, DecodeMode, GraphConfig, Model, ModelConfig, PredictOptions, TrainConfig};

fn graph_construction(c: &mut Criterion) {
    let docs = overfit_fixture();
    let config = GraphConfig::default();
    c.bench_function("build_graphs_32_questions", |b| {
        b.iter(|| {
            for d in &docs {
                for q in &d.questions {
                    black_box(build_multi_view_graph(d, q, &config).unwrap());
                }
            }
        })
    });
}

fn encoding(c: &mut Criterion) {
    let docs = overfit_fixture();
    let model = Model::new(ModelConfig::default(), 42).unwrap();
    let graph = model.graph(&docs[0], &docs[0].questions[0]).unwrap();
    c.bench_function("encode_one_graph_d64", |b| {
        b.iter(|| {
            let mut s = Session::inference(&model.store);
            black_box(mvg_core::encoder::encode(&mut s, &graph, &model.encoder).unwrap().output)
        })
    });
}

fn training_step(c: &mut Criterion) {
    let docs = overfit_fixture();
    let mut model = Model::new(ModelConfig::default(), 42).unwrap();
    let examples = model.prepare_examples(&docs).unwrap();
    let batch: Vec<_> = examples.iter().take(8).collect();
    let config = TrainConfig::small_data();
    let seeds: Vec<u64> = (0..batch.len() as u64).collect();
    c.bench_function("loss_and_gradients_batch8_d64", |b| {
        b.iter(|| black_box(total_loss(&mut model, &batch, &config, &seeds).unwrap()))
    });
}

fn prediction(c: &mut Criterion) {
    let docs = overfit_fixture();
    let model = Model::new(ModelConfig::default(), 42).unwrap();
    let mut group = c.benchmark_group("predict_32_questions");
    group.sample_size(10);
    for (name, mode) in [("greedy", DecodeMode::Greedy), ("beam3", DecodeMode::Beam(3))] {
        let opts = PredictOptions {
            mode,
            ..PredictOptions::default()
        };
        group.bench_function(name, |b| b.iter(|| black_box(model.predict_dataset(&docs, &opts).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, graph_construction, encoding, training_step, prediction);
criterion_main!(benches);
