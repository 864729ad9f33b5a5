use divergescope::align::{extract_dictionary, BidirectionalModels, Heuristic};
use divergescope::corpus::{Label, LabeledPair, SentencePair};
use divergescope::datagen::{build_dataset, partition_positives, NegativeFilter};
use divergescope::embed::{train_bilingual_embeddings, EmbedConfig, EmbeddingTable};
use divergescope::eval::pearson;
use divergescope::features::{accuracy, extract_all, feature_names, train_linear, LinearConfig};
use divergescope::synth::{cipher_corpus, CipherConfig};
use divergescope::vdpwi::{train, VdpwiConfig};

struct Fixture {
    train: Vec<LabeledPair>,
    dev: Vec<LabeledPair>,
    models: BidirectionalModels,
    dict: divergescope::dictionary::BilingualDictionary,
    embeddings: EmbeddingTable,
}

fn fixture() -> Fixture {
    let corpus = cipher_corpus(&CipherConfig {
        pairs: 400,
        vocab: 30,
        ..CipherConfig::default()
    });
    let models = BidirectionalModels::train(&corpus.pairs, 5, 5).unwrap();
    let dict = extract_dictionary(&models.ef, &models.fe, 0.5).unwrap();
    let alignments = models.align_corpus(&corpus.pairs, Heuristic::GrowDiagFinalAnd);
    let embeddings = train_bilingual_embeddings(
        &corpus.pairs,
        &alignments,
        &EmbedConfig {
            dim: 12,
            epochs: 5,
            ..EmbedConfig::default()
        },
    )
    .unwrap();
    let splits = partition_positives(&corpus.pairs, 60, 20, 1, 5).unwrap();
    let filter = NegativeFilter::default();
    let train = build_dataset(&splits.train, &dict, &filter, 5, 1).unwrap().examples;
    let dev = build_dataset(&splits.dev, &dict, &filter, 5, 2).unwrap().examples;
    Fixture {
        train,
        dev,
        models,
        dict,
        embeddings,
    }
}

fn pairs(x: &[LabeledPair]) -> Vec<SentencePair> {
    x.iter().map(|e| e.pair.clone()).collect()
}

#[test]
fn vdpwi_loss_falls_and_selection_matches_reported_pearson() {
    let fx = fixture();
    let small: Vec<LabeledPair> = fx.train[..50].to_vec();
    let cfg = VdpwiConfig {
        epochs: 4,
        batch_size: 5,
        learning_rate: 5e-3,
        ..VdpwiConfig::desk(fx.embeddings.dim())
    };
    let (model, report) = train(&small, &fx.dev, &cfg, &fx.embeddings).unwrap();
    assert_eq!(report.epochs.len(), 5);
    let first = report.epochs[0].train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < first, "training KL {first} -> {last}");

    let r = |e: &divergescope::vdpwi::EpochStats| e.validation_pearson.unwrap_or(-1.0);
    let best = &report.epochs[report.best_epoch];
    assert!(report.epochs.iter().all(|e| r(e) <= r(best)));
    assert!(report.epochs[report.best_epoch + 1..].iter().all(|e| r(e) < r(best)));

    // The returned parameters are the selected snapshot.
    let scores = model.score_pairs(&pairs(&fx.dev), &fx.embeddings).unwrap();
    assert_eq!(scores, best.validation_scores);
    let gold: Vec<f64> = fx.dev.iter().map(|x| x.label.indicator()).collect();
    let recomputed = pearson(&scores, &gold).unwrap_or(-1.0);
    assert!((recomputed - r(best)).abs() < 1e-12);
}

#[test]
fn vdpwi_training_is_deterministic() {
    let fx = fixture();
    let small: Vec<LabeledPair> = fx.train[..30].to_vec();
    let cfg = VdpwiConfig {
        epochs: 2,
        batch_size: 4,
        ..VdpwiConfig::desk(fx.embeddings.dim())
    };
    let (a, ra) = train(&small, &fx.dev, &cfg, &fx.embeddings).unwrap();
    let (b, rb) = divergescope::par::with_threads(1, || train(&small, &fx.dev, &cfg, &fx.embeddings)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.params(), b.params());
}

#[test]
fn feature_classifier_separates_synthetic_data() {
    let fx = fixture();
    let heur = Heuristic::ALL;
    let rows = extract_all(&pairs(&fx.train), &fx.models, &fx.dict, &heur).unwrap();
    let labels: Vec<Label> = fx.train.iter().map(|x| x.label).collect();
    let model = train_linear(&feature_names(&heur), &rows, &labels, &LinearConfig::default()).unwrap();
    assert!(model.loss_history.windows(2).all(|w| w[1] <= w[0]));
    let dev_rows = extract_all(&pairs(&fx.dev), &fx.models, &fx.dict, &heur).unwrap();
    let dev_labels: Vec<Label> = fx.dev.iter().map(|x| x.label).collect();
    let acc = accuracy(&model, &dev_rows, &dev_labels).unwrap();
    assert!(acc > 0.9, "dev accuracy {acc}");
}
