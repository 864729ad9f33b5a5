//! Serial (one worker) against the default thread pool for the hot loops.
//! Build with `--no-default-features` to bench the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use divergescope::align::{extract_dictionary, train_ibm1, BidirectionalModels, Direction, Heuristic};
use divergescope::datagen::{generate_negatives, NegativeFilter};
use divergescope::embed::{train_bilingual_embeddings, EmbedConfig};
use divergescope::features::extract_all;
use divergescope::par;
use divergescope::synth::{cipher_corpus, CipherConfig};
use divergescope::vdpwi::{VdpwiConfig, VdpwiModel};

fn pools() -> [(&'static str, usize); 2] {
    [("serial", 1), ("pool", 0)]
}

fn benches(c: &mut Criterion) {
    let corpus = cipher_corpus(&CipherConfig {
        pairs: 1000,
        ..CipherConfig::default()
    });
    let pairs = &corpus.pairs;
    let models = BidirectionalModels::train(pairs, 3, 3).unwrap();
    let dict = extract_dictionary(&models.ef, &models.fe, 0.5).unwrap();
    let alignments = models.align_corpus(pairs, Heuristic::GrowDiagFinalAnd);
    let emb = train_bilingual_embeddings(
        pairs,
        &alignments,
        &EmbedConfig {
            dim: 16,
            epochs: 1,
            ..EmbedConfig::default()
        },
    )
    .unwrap();
    let vdpwi = VdpwiModel::new(VdpwiConfig::desk(16), 1).unwrap();
    let filter = NegativeFilter::default();

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::new("ibm1_em_3_iters", name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || train_ibm1(pairs, 3, Direction::EToF).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("negatives_500", name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || generate_negatives(&pairs[..500], &dict, &filter).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("features_1000", name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || extract_all(pairs, &models, &dict, &Heuristic::ALL).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("vdpwi_score_100", name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || vdpwi.score_pairs(&pairs[..100], &emb).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
