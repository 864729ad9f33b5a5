//! Typed run configuration, run manifests, and the end-to-end chain
//! (align → dictionary → embeddings → synthetic data → scorers → tuning →
//! evaluation → selection).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::align::{write_alignments, BidirectionalModels, Direction, Heuristic};
use crate::config::Settings;
use crate::corpus::{deduplicate, load_parallel, write_labeled_tsv, write_lines, Label, LabeledPair, SentencePair};
use crate::datagen::{build_dataset, partition_positives, sample_positives, NegativeFilter, SyntheticDataset};
use crate::embed::{cosine_score, load_embeddings, train_bilingual_embeddings, EmbedConfig, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{predict, prf_report, tune_threshold, EvalReport, FMode};
use crate::features::{extract_all, feature_names, score_linear, train_linear, LinearConfig, LinearModel};
use crate::select::{random_scores, select_top, write_scores, write_selection, ScoredPair};
use crate::vdpwi::{self, parse_cnn_spec, format_cnn_spec, VdpwiConfig, VdpwiModel};
use crate::par;

/// A divergence scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scorer {
    Vdpwi,
    Feat,
    Cosine,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Vdpwi, Scorer::Feat, Scorer::Cosine];

    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::Vdpwi => "vdpwi",
            Scorer::Feat => "feat",
            Scorer::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer {s:?} (vdpwi|feat|cosine)")))
    }
}

/// What ranks the corpus for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ranking {
    Scorer(Scorer),
    /// Uniform random scores (random downsampling).
    Random,
}

impl FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            Ok(Ranking::Random)
        } else {
            s.parse().map(Ranking::Scorer)
        }
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ranking::Scorer(s) => s.fmt(f),
            Ranking::Random => f.write_str("random"),
        }
    }
}

fn parse_list<T: FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::parse).collect()
}

fn parse_heuristics(s: &str) -> Result<Vec<Heuristic>> {
    if s == "all" {
        return Ok(Heuristic::ALL.to_vec());
    }
    s.split(',')
        .map(|h| h.trim().parse::<Heuristic>())
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every setting recognized in configuration files.
pub const KNOWN_SETTINGS: &[&str] = &[
    "corpus.source",
    "corpus.target",
    "embeddings",
    "output_dir",
    "align.ibm1_iterations",
    "align.ibm2_iterations",
    "align.heuristic",
    "align.sample",
    "dict.threshold",
    "datagen.positives",
    "datagen.dev_positives",
    "datagen.test_positives",
    "datagen.ratio",
    "datagen.max_length_ratio",
    "datagen.min_coverage",
    "datagen.bidirectional",
    "datagen.window",
    "datagen.seed",
    "embed.dim",
    "embed.epochs",
    "embed.window",
    "embed.negatives",
    "embed.learning_rate",
    "embed.seed",
    "vdpwi.preset",
    "vdpwi.lstm_hidden_dim",
    "vdpwi.grid",
    "vdpwi.cnn_spec",
    "vdpwi.fc_dim",
    "vdpwi.epochs",
    "vdpwi.batch_size",
    "vdpwi.learning_rate",
    "vdpwi.seed",
    "vdpwi.max_sentence_length",
    "vdpwi.focus",
    "linear.l2_strength",
    "linear.epochs",
    "linear.learning_rate",
    "linear.heuristics",
    "eval.f_mode",
    "pipeline.scorers",
    "select.ranking",
    "select.keep_fraction",
    "select.seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Pre-trained vectors; trained from the corpus when absent.
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub ibm1_iterations: usize,
    pub ibm2_iterations: usize,
    /// Alignment models train on a seeded sample of at most this many pairs.
    pub align_sample: usize,
    /// Symmetrization used for the alignment file and embedding training.
    pub heuristic: Heuristic,
    pub dict_threshold: f64,
    pub positives: usize,
    pub dev_positives: usize,
    pub test_positives: usize,
    pub ratio: usize,
    pub filter: NegativeFilter,
    pub datagen_seed: u64,
    pub embed: EmbedConfig,
    pub vdpwi_preset: String,
    /// `embedding_dim` is taken from the embedding table at training time.
    pub vdpwi: VdpwiConfig,
    pub linear: LinearConfig,
    pub feature_heuristics: Vec<Heuristic>,
    pub f_mode: FMode,
    pub scorers: Vec<Scorer>,
    pub ranking: Ranking,
    pub keep_fraction: f64,
    pub select_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_settings(&Settings::new()).expect("defaults are valid")
    }
}

impl PipelineConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        s.check_known(KNOWN_SETTINGS)?;
        let path = |k: &str| s.raw(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let preset = s.raw("vdpwi.preset").unwrap_or("paper").to_owned();
        let base = match preset.as_str() {
            "paper" => VdpwiConfig::default(),
            "desk" => VdpwiConfig::desk(1),
            other => return Err(Error::Config(format!("unknown vdpwi preset {other:?} (paper|desk)"))),
        };
        let vdpwi = VdpwiConfig {
            embedding_dim: base.embedding_dim,
            lstm_hidden_dim: s.get_or("vdpwi.lstm_hidden_dim", base.lstm_hidden_dim)?,
            grid: s.get_or("vdpwi.grid", base.grid)?,
            cnn_spec: match s.raw("vdpwi.cnn_spec") {
                Some(v) => parse_cnn_spec(v)?,
                None => base.cnn_spec.clone(),
            },
            fc_dim: s.get_or("vdpwi.fc_dim", base.fc_dim)?,
            epochs: s.get_or("vdpwi.epochs", base.epochs)?,
            batch_size: s.get_or("vdpwi.batch_size", base.batch_size)?,
            learning_rate: s.get_or("vdpwi.learning_rate", base.learning_rate)?,
            seed: s.get_or("vdpwi.seed", base.seed)?,
            max_sentence_length: s.get_or("vdpwi.max_sentence_length", base.max_sentence_length)?,
            focus: s.get_or("vdpwi.focus", base.focus)?,
        };
        vdpwi.validate()?;
        let ed = EmbedConfig::default();
        let lin = LinearConfig::default();
        let nf = NegativeFilter::default();
        let window: usize = s.get_or("datagen.window", nf.window.unwrap_or(0))?;
        let cfg = Self {
            source: path("corpus.source"),
            target: path("corpus.target"),
            embeddings: path("embeddings"),
            output_dir: path("output_dir").unwrap_or_else(|| PathBuf::from("out")),
            ibm1_iterations: s.get_or("align.ibm1_iterations", 5)?,
            ibm2_iterations: s.get_or("align.ibm2_iterations", 5)?,
            align_sample: s.get_or("align.sample", 1_000_000)?,
            heuristic: s.get_or("align.heuristic", Heuristic::GrowDiagFinalAnd)?,
            dict_threshold: s.get_or("dict.threshold", 0.5)?,
            positives: s.get_or("datagen.positives", 5000)?,
            dev_positives: s.get_or("datagen.dev_positives", 100)?,
            test_positives: s.get_or("datagen.test_positives", 100)?,
            ratio: s.get_or("datagen.ratio", 5)?,
            filter: NegativeFilter {
                max_length_ratio: s.get_or("datagen.max_length_ratio", nf.max_length_ratio)?,
                min_coverage: s.get_or("datagen.min_coverage", nf.min_coverage)?,
                bidirectional: s.get_or("datagen.bidirectional", nf.bidirectional)?,
                window: (window > 0).then_some(window),
            },
            datagen_seed: s.get_or("datagen.seed", 1)?,
            embed: EmbedConfig {
                dim: s.get_or("embed.dim", ed.dim)?,
                epochs: s.get_or("embed.epochs", ed.epochs)?,
                window: s.get_or("embed.window", ed.window)?,
                negatives: s.get_or("embed.negatives", ed.negatives)?,
                learning_rate: s.get_or("embed.learning_rate", ed.learning_rate)?,
                seed: s.get_or("embed.seed", ed.seed)?,
            },
            vdpwi_preset: preset,
            vdpwi,
            linear: LinearConfig {
                l2_strength: s.get_or("linear.l2_strength", lin.l2_strength)?,
                epochs: s.get_or("linear.epochs", lin.epochs)?,
                learning_rate: s.get_or("linear.learning_rate", lin.learning_rate)?,
            },
            feature_heuristics: parse_heuristics(s.raw("linear.heuristics").unwrap_or("all"))?,
            f_mode: s.get_or("eval.f_mode", FMode::Weighted)?,
            scorers: parse_list(s.raw("pipeline.scorers").unwrap_or("vdpwi,feat,cosine"))?,
            ranking: s.get_or("select.ranking", Ranking::Scorer(Scorer::Vdpwi))?,
            keep_fraction: s.get_or("select.keep_fraction", 0.5)?,
            select_seed: s.get_or("select.seed", 1)?,
        };
        cfg.validate_ranges()?;
        Ok(cfg)
    }

    fn validate_ranges(&self) -> Result<()> {
        if !(self.dict_threshold > 0.0 && self.dict_threshold <= 1.0) {
            return Err(Error::Config(format!("dict.threshold {} must be in (0, 1]", self.dict_threshold)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "select.keep_fraction {} must be in (0, 1]",
                self.keep_fraction
            )));
        }
        if self.align_sample == 0 {
            return Err(Error::Config("align.sample must be positive".into()));
        }
        if self.ratio == 0 {
            return Err(Error::Config("datagen.ratio must be at least 1".into()));
        }
        if self.embed.dim == 0 || self.embed.window == 0 {
            return Err(Error::Config("embed.dim and embed.window must be positive".into()));
        }
        if self.filter.max_length_ratio < 1.0 || !(0.0..=1.0).contains(&self.filter.min_coverage) {
            return Err(Error::Config("datagen filters out of range".into()));
        }
        Ok(())
    }

    /// Full effective configuration, defaults included.
    pub fn to_settings(&self) -> Settings {
        let mut s = Settings::new();
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("corpus.source", p(&self.source)),
            ("corpus.target", p(&self.target)),
            ("embeddings", p(&self.embeddings)),
            ("output_dir", self.output_dir.display().to_string()),
            ("align.ibm1_iterations", self.ibm1_iterations.to_string()),
            ("align.ibm2_iterations", self.ibm2_iterations.to_string()),
            ("align.heuristic", self.heuristic.as_str().to_owned()),
            ("align.sample", self.align_sample.to_string()),
            ("dict.threshold", self.dict_threshold.to_string()),
            ("datagen.positives", self.positives.to_string()),
            ("datagen.dev_positives", self.dev_positives.to_string()),
            ("datagen.test_positives", self.test_positives.to_string()),
            ("datagen.ratio", self.ratio.to_string()),
            ("datagen.max_length_ratio", self.filter.max_length_ratio.to_string()),
            ("datagen.min_coverage", self.filter.min_coverage.to_string()),
            ("datagen.bidirectional", self.filter.bidirectional.to_string()),
            ("datagen.window", self.filter.window.unwrap_or(0).to_string()),
            ("datagen.seed", self.datagen_seed.to_string()),
            ("embed.dim", self.embed.dim.to_string()),
            ("embed.epochs", self.embed.epochs.to_string()),
            ("embed.window", self.embed.window.to_string()),
            ("embed.negatives", self.embed.negatives.to_string()),
            ("embed.learning_rate", self.embed.learning_rate.to_string()),
            ("embed.seed", self.embed.seed.to_string()),
            ("vdpwi.preset", self.vdpwi_preset.clone()),
            ("vdpwi.lstm_hidden_dim", self.vdpwi.lstm_hidden_dim.to_string()),
            ("vdpwi.grid", self.vdpwi.grid.to_string()),
            ("vdpwi.cnn_spec", format_cnn_spec(&self.vdpwi.cnn_spec)),
            ("vdpwi.fc_dim", self.vdpwi.fc_dim.to_string()),
            ("vdpwi.epochs", self.vdpwi.epochs.to_string()),
            ("vdpwi.batch_size", self.vdpwi.batch_size.to_string()),
            ("vdpwi.learning_rate", self.vdpwi.learning_rate.to_string()),
            ("vdpwi.seed", self.vdpwi.seed.to_string()),
            ("vdpwi.max_sentence_length", self.vdpwi.max_sentence_length.to_string()),
            ("vdpwi.focus", self.vdpwi.focus.to_string()),
            ("linear.l2_strength", self.linear.l2_strength.to_string()),
            ("linear.epochs", self.linear.epochs.to_string()),
            ("linear.learning_rate", self.linear.learning_rate.to_string()),
            ("linear.heuristics", join(&self.feature_heuristics.iter().map(|h| h.as_str()).collect::<Vec<_>>())),
            ("eval.f_mode", self.f_mode.to_string()),
            ("pipeline.scorers", join(&self.scorers)),
            ("select.ranking", self.ranking.to_string()),
            ("select.keep_fraction", self.keep_fraction.to_string()),
            ("select.seed", self.select_seed.to_string()),
        ];
        for (k, v) in entries {
            s.set(k, &v);
        }
        s
    }

    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("datagen", self.datagen_seed),
            ("embed", self.embed.seed),
            ("vdpwi", self.vdpwi.seed),
            ("select", self.select_seed),
        ]
    }

    /// Corpus paths, required for corpus-level commands.
    pub fn corpus_paths(&self) -> Result<(&Path, &Path)> {
        match (&self.source, &self.target) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::Config("corpus.source and corpus.target must be set".into())),
        }
    }

    /// Trains both alignment directions on at most `align_sample` pairs.
    pub fn train_aligners(&self, pairs: &[SentencePair]) -> Result<BidirectionalModels> {
        if pairs.len() > self.align_sample {
            let sample = sample_positives(pairs, self.align_sample, self.datagen_seed);
            log::info!("training alignment models on {} of {} pairs", sample.len(), pairs.len());
            BidirectionalModels::train(&sample, self.ibm1_iterations, self.ibm2_iterations)
        } else {
            BidirectionalModels::train(pairs, self.ibm1_iterations, self.ibm2_iterations)
        }
    }

    /// Checks that every referenced input exists.
    pub fn validate_paths(&self) -> Result<()> {
        let (s, t) = self.corpus_paths()?;
        for p in [Some(s), Some(t), self.embeddings.as_deref()].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Record of one run, written next to its outputs. Contains no timestamps,
/// so identical runs produce identical manifests.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub command: String,
    pub settings: Settings,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_owned(),
            ..Self::default()
        }
    }

    /// `kind<TAB>key<TAB>value` lines.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut lines = vec![
            format!("command\t{}", self.command),
            format!("version\t{}\t{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        ];
        for (k, v) in self.settings.iter() {
            lines.push(format!("config\t{k}\t{v}"));
        }
        for (k, v) in &self.seeds {
            lines.push(format!("seed\t{k}\t{v}"));
        }
        for p in &self.inputs {
            lines.push(format!("input\t{}\tsha256:{}", p.display(), sha256_file(p)?));
        }
        for p in &self.outputs {
            lines.push(format!("output\t{}", p.display()));
        }
        write_lines(path, lines)
    }
}

/// Reports and thresholds from one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub train: SyntheticDataset,
    pub dev: SyntheticDataset,
    pub test: SyntheticDataset,
    pub evaluations: Vec<(Scorer, f64, EvalReport)>,
    pub kept: usize,
    pub outputs: Vec<PathBuf>,
}

/// Trained scorers sharing one set of resources.
pub struct ScorerSet<'a> {
    pub embeddings: &'a EmbeddingTable,
    /// Alignment models and dictionary; needed by the feature scorer only.
    pub models: Option<&'a BidirectionalModels>,
    pub dictionary: Option<&'a crate::dictionary::BilingualDictionary>,
    pub heuristics: &'a [Heuristic],
    pub vdpwi: Option<&'a VdpwiModel>,
    pub linear: Option<&'a LinearModel>,
}

impl ScorerSet<'_> {
    pub fn score(&self, scorer: Scorer, pairs: &[SentencePair]) -> Result<Vec<f64>> {
        match scorer {
            Scorer::Cosine => Ok(par::map(pairs, |p| cosine_score(p, self.embeddings))),
            Scorer::Vdpwi => self
                .vdpwi
                .ok_or_else(|| Error::Config("vdpwi scorer requested without a trained model".into()))?
                .score_pairs(pairs, self.embeddings),
            Scorer::Feat => {
                let model = self
                    .linear
                    .ok_or_else(|| Error::Config("feat scorer requested without a trained model".into()))?;
                let (Some(models), Some(dict)) = (self.models, self.dictionary) else {
                    return Err(Error::Config("feat scorer needs alignment models and a dictionary".into()));
                };
                let rows = extract_all(pairs, models, dict, self.heuristics)?;
                rows.iter().map(|r| score_linear(model, r)).collect()
            }
        }
    }
}

pub fn scored(pairs: &[SentencePair], scores: &[f64]) -> Vec<ScoredPair> {
    pairs
        .iter()
        .zip(scores)
        .map(|(p, &score)| ScoredPair { pair_id: p.id, score })
        .collect()
}

fn pairs_of(examples: &[LabeledPair]) -> Vec<SentencePair> {
    examples.iter().map(|x| x.pair.clone()).collect()
}

fn labels_of(examples: &[LabeledPair]) -> Vec<Label> {
    examples.iter().map(|x| x.label).collect()
}

pub fn format_threshold(t: f64) -> String {
    if t.is_infinite() {
        if t > 0.0 { "inf" } else { "-inf" }.to_owned()
    } else {
        format!("{t:.6}")
    }
}

/// Runs the full chain and writes every artifact under `output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate_paths()?;
    let (src, tgt) = cfg.corpus_paths()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        outputs.push(p.clone());
        p
    };

    let loaded = load_parallel(src, tgt)?;
    let (pairs, dups) = deduplicate(&loaded.pairs);
    log::info!(
        "{} pairs loaded ({} rejected, {dups} duplicates removed)",
        pairs.len(),
        loaded.rejected
    );

    log::info!("training alignment models");
    let models = cfg.train_aligners(&pairs)?;
    models.save(out)?;
    emit("model.e-f.txt");
    emit("model.f-e.txt");
    let alignments = models.align_corpus(&pairs, cfg.heuristic);
    write_alignments(&emit(&format!("alignments.{}.txt", cfg.heuristic.as_str())), &alignments)?;
    let dictionary = crate::align::extract_dictionary(&models.ef, &models.fe, cfg.dict_threshold)?;
    for d in [Direction::EToF, Direction::FToE] {
        dictionary.write_tsv(d, &emit(&format!("dict.{d}.tsv")))?;
    }

    let embeddings = match &cfg.embeddings {
        Some(p) => load_embeddings(p)?,
        None => {
            log::info!("training bilingual embeddings");
            let table = train_bilingual_embeddings(&pairs, &alignments, &cfg.embed)?;
            table.save(&emit("embeddings.txt"))?;
            table
        }
    };

    log::info!("building synthetic datasets");
    let splits = partition_positives(
        &pairs,
        cfg.positives,
        cfg.dev_positives,
        cfg.test_positives,
        cfg.datagen_seed,
    )?;
    let train = build_dataset(&splits.train, &dictionary, &cfg.filter, cfg.ratio, cfg.datagen_seed)?;
    let dev = build_dataset(&splits.dev, &dictionary, &cfg.filter, cfg.ratio, cfg.datagen_seed.wrapping_add(1))?;
    let test = build_dataset(&splits.test, &dictionary, &cfg.filter, cfg.ratio, cfg.datagen_seed.wrapping_add(2))?;
    write_labeled_tsv(&emit("train.tsv"), &train.examples)?;
    write_labeled_tsv(&emit("dev.tsv"), &dev.examples)?;
    write_labeled_tsv(&emit("test.tsv"), &test.examples)?;

    let mut needed = cfg.scorers.clone();
    if let Ranking::Scorer(s) = cfg.ranking {
        if !needed.contains(&s) {
            needed.push(s);
        }
    }
    let vdpwi_model = if needed.contains(&Scorer::Vdpwi) {
        log::info!("training vdpwi");
        let vc = VdpwiConfig {
            embedding_dim: embeddings.dim(),
            ..cfg.vdpwi.clone()
        };
        let (model, report) = vdpwi::train(&train.examples, &dev.examples, &vc, &embeddings)?;
        model.save(&emit("vdpwi.ckpt"))?;
        let log_lines = std::iter::once("epoch\ttrain_kl\tvalidation_pearson".to_owned()).chain(report.epochs.iter().map(|e| {
            let r = e.validation_pearson.map_or("undefined".to_owned(), |r| format!("{r:.6}"));
            format!("{}\t{:.6}\t{r}", e.epoch, e.train_loss)
        }));
        write_lines(&emit("vdpwi.log.tsv"), log_lines)?;
        Some(model)
    } else {
        None
    };
    let linear_model = if needed.contains(&Scorer::Feat) {
        log::info!("training feature classifier");
        let rows = extract_all(&pairs_of(&train.examples), &models, &dictionary, &cfg.feature_heuristics)?;
        let names = feature_names(&cfg.feature_heuristics);
        let m = train_linear(&names, &rows, &labels_of(&train.examples), &cfg.linear)?;
        m.save(&emit("linear.tsv"))?;
        Some(m)
    } else {
        None
    };
    let set = ScorerSet {
        embeddings: &embeddings,
        models: Some(&models),
        dictionary: Some(&dictionary),
        heuristics: &cfg.feature_heuristics,
        vdpwi: vdpwi_model.as_ref(),
        linear: linear_model.as_ref(),
    };

    let (dev_pairs, test_pairs) = (pairs_of(&dev.examples), pairs_of(&test.examples));
    let (dev_labels, test_labels) = (labels_of(&dev.examples), labels_of(&test.examples));
    let mut evaluations = Vec::new();
    let mut summary = vec!["scorer\tthreshold\toverall_f".to_owned()];
    for &scorer in &cfg.scorers {
        let dev_scores = set.score(scorer, &dev_pairs)?;
        let test_scores = set.score(scorer, &test_pairs)?;
        write_scores(&emit(&format!("scores.{scorer}.dev.tsv")), &scored(&dev_pairs, &dev_scores))?;
        write_scores(&emit(&format!("scores.{scorer}.test.tsv")), &scored(&test_pairs, &test_scores))?;
        let threshold = tune_threshold(&dev_scores, &dev_labels, cfg.f_mode)?;
        let report = prf_report(&predict(&test_scores, threshold), &test_labels, cfg.f_mode)?;
        write_lines(&emit(&format!("report.{scorer}.txt")), [format!("threshold {}\n{report}", format_threshold(threshold))])?;
        report.write_kv(&emit(&format!("report.{scorer}.kv")))?;
        summary.push(format!("{scorer}\t{}\t{:.6}", format_threshold(threshold), report.overall_f));
        log::info!("{scorer}: overall F {:.4}", report.overall_f);
        evaluations.push((scorer, threshold, report));
    }
    write_lines(&emit("summary.tsv"), summary)?;

    let corpus_scores = match cfg.ranking {
        Ranking::Random => random_scores(&pairs, cfg.select_seed),
        Ranking::Scorer(s) => scored(&pairs, &set.score(s, &pairs)?),
    };
    write_scores(&emit("scores.corpus.tsv"), &corpus_scores)?;
    let kept = select_top(&pairs, &corpus_scores, cfg.keep_fraction)?;
    write_selection(&emit("selected.e"), &emit("selected.f"), &emit("selected.ids"), &kept)?;

    let manifest_path = out.join("manifest.txt");
    let mut manifest = Manifest::new("pipeline");
    manifest.settings = cfg.to_settings();
    manifest.seeds = cfg.seeds().into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
    manifest.inputs = [Some(src), Some(tgt), cfg.embeddings.as_deref()]
        .into_iter()
        .flatten()
        .map(Path::to_path_buf)
        .collect();
    manifest.outputs = outputs.clone();
    manifest.write(&manifest_path)?;
    outputs.push(manifest_path);

    Ok(PipelineOutcome {
        train,
        dev,
        test,
        evaluations,
        kept: kept.len(),
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.positives, 5000);
        assert_eq!(cfg.ratio, 5);
        assert_eq!(cfg.dict_threshold, 0.5);
        assert_eq!(cfg.vdpwi.epochs, 25);
        let back = PipelineConfig::from_settings(&cfg.to_settings()).unwrap();
        assert_eq!(back, cfg);

        let mut s = Settings::new();
        s.set("vdpwi.preset", "desk");
        s.set("select.ranking", "random");
        s.set("linear.heuristics", "union,intersection");
        let cfg = PipelineConfig::from_settings(&s).unwrap();
        assert_eq!(cfg.vdpwi.grid, 16);
        assert_eq!(cfg.ranking, Ranking::Random);
        assert_eq!(cfg.feature_heuristics, vec![Heuristic::Union, Heuristic::Intersection]);
        assert_eq!(PipelineConfig::from_settings(&cfg.to_settings()).unwrap(), cfg);
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        for (k, v) in [
            ("no.such.key", "1"),
            ("datagen.ratio", "0"),
            ("select.keep_fraction", "1.5"),
            ("vdpwi.grid", "12"),
            ("pipeline.scorers", "vdpwi,bleu"),
            ("embed.dim", "-3"),
        ] {
            let mut s = Settings::new();
            s.set(k, v);
            let err = PipelineConfig::from_settings(&s).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{k} = {v}: {err}");
        }
    }

    #[test]
    fn aligners_train_on_a_capped_sample() {
        let corpus = crate::synth::cipher_corpus(&crate::synth::CipherConfig {
            pairs: 200,
            vocab: 30,
            ..Default::default()
        });
        let mut cfg = PipelineConfig::default();
        cfg.ibm1_iterations = 2;
        cfg.ibm2_iterations = 1;
        let full = cfg.train_aligners(&corpus.pairs).unwrap();
        cfg.align_sample = 5;
        let capped = cfg.train_aligners(&corpus.pairs).unwrap();
        let words = |m: &BidirectionalModels| m.ef.table.source_vocab_len();
        assert!(words(&capped) < words(&full));
        let mut s = Settings::new();
        s.set("align.sample", "0");
        assert!(PipelineConfig::from_settings(&s).is_err());
    }

    #[test]
    fn thresholds_format() {
        assert_eq!(format_threshold(f64::INFINITY), "inf");
        assert_eq!(format_threshold(0.25), "0.250000");
    }
}
