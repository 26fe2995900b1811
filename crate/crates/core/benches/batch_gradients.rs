use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use debias_core::par::Exec;
use debias_core::trainer::{debias_loss_and_grad, encode_pairs, mask_tokens, mlm_loss_and_grad, DebiasBatch};
use debias_core::{data, pairminer, seed, EmbedderModel, ModelConfig, Vocab};

fn setup() -> (EmbedderModel<f32>, Vocab, Vec<Vec<u32>>) {
    let corpus = data::mini_corpus();
    let vocab = Vocab::build(&corpus, 1).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        d_ff: 128,
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let model = EmbedderModel::new(cfg, 0).unwrap();
    let ids = corpus.iter().map(|s| vocab.tokenize(s, 32)).collect();
    (model, vocab, ids)
}

fn batch_gradients(c: &mut Criterion) {
    let (model, vocab, ids) = setup();
    let mut rng = seed::rng_from(1);
    let mlm: Vec<_> = ids.iter().filter_map(|s| mask_tokens(s, 0.15, &mut rng)).take(16).collect();
    let pairs = pairminer::mine_pairs(data::mini_corpus(), &data::gender_groups(), 0, 8);
    let encoded = encode_pairs(&vocab, &pairs, 32);
    let debias = DebiasBatch::new(encoded.iter().collect()).unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::new("mlm_16", name), &exec, |b, &exec| {
            b.iter(|| mlm_loss_and_grad(&model, &mlm, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("debias_8", name), &exec, |b, &exec| {
            b.iter(|| debias_loss_and_grad(&model, &debias, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients);
criterion_main!(benches);
