use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dialogue_core::data::{build_examples, build_vocab, generate_toy_corpus};
use dialogue_core::exec::ExecMode;
use dialogue_core::model::{Model, ModelConfig};
use dialogue_core::train::{batch_gradients, DropoutSeed, LossWeights};

fn bench(c: &mut Criterion) {
    let toy = generate_toy_corpus(1, 8).unwrap();
    let vocab = build_vocab(&toy.corpus, Some(&toy.ontology), 1);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let examples = build_examples(&toy.corpus, &vocab, &toy.db, &toy.ontology, config.max_positions).unwrap();
    let model = Model::new(config, 1).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for size in [4, 16] {
        let batch: Vec<_> = examples.iter().cycle().take(size).collect();
        for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                b.iter(|| {
                    let dropout = Some(DropoutSeed { seed: 1, step: 1 });
                    batch_gradients(&model, &vocab, batch, LossWeights::default(), dropout, mode).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
