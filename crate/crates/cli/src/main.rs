use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};

use divergescope::align::{
    read_alignments, write_alignments, BidirectionalModels, Direction, Heuristic,
};
use divergescope::config::Settings;
use divergescope::corpus::{
    deduplicate, load_parallel, read_labeled_tsv, read_pairs_tsv, write_labeled_tsv, write_parallel,
    LabeledPair, SentencePair,
};
use divergescope::datagen::{build_dataset, partition_positives};
use divergescope::dictionary::BilingualDictionary;
use divergescope::embed::{load_embeddings, train_bilingual_embeddings, EmbeddingTable};
use divergescope::eval::{fleiss_kappa, majority_vote, predict, prf_report, read_annotations, tune_threshold};
use divergescope::features::{extract_all, feature_names, train_linear, LinearModel};
use divergescope::pipeline::{
    format_threshold, run_pipeline, scored, Manifest, PipelineConfig, Scorer, ScorerSet,
};
use divergescope::select::{ingest_scores, read_scores, select_top, write_scores, write_selection};
use divergescope::synth::{cipher_corpus, CipherConfig};
use divergescope::vdpwi::{self, VdpwiConfig, VdpwiModel};
use divergescope::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "divergescope", version, about = "Semantic divergence detection and data selection for parallel corpora")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Worker threads (0 = all cores, 1 = fully serial).
    #[arg(long, env = "DIVERGESCOPE_THREADS", default_value_t = 0, global = true)]
    threads: usize,

    /// More logging; repeat for debug output.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModelArg {
    Vdpwi,
    Feat,
    Cosine,
}

impl From<ModelArg> for Scorer {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Vdpwi => Scorer::Vdpwi,
            ModelArg::Feat => Scorer::Feat,
            ModelArg::Cosine => Scorer::Cosine,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both IBM directions and write models and symmetrized alignments.
    Align,
    /// Extract the bilingual dictionary from trained alignment models.
    Dict {
        /// Directory holding model.e-f.txt and model.f-e.txt.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Build the synthetic train/dev/test datasets.
    Datagen {
        /// Directory holding dict.e-f.tsv and dict.f-e.tsv.
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Train bilingual word embeddings on the corpus.
    TrainEmbed {
        /// Symmetrized alignments for the corpus; aligned from scratch if absent.
        #[arg(long)]
        alignments: Option<PathBuf>,
    },
    /// Train the pairwise word interaction model.
    TrainVdpwi {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train the alignment-feature linear classifier.
    TrainFeat {
        #[arg(long)]
        train: Option<PathBuf>,
        /// Directory holding alignment models and dictionary files.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score sentence pairs with a trained model or ingest an external score file.
    Score {
        #[arg(long, value_enum, conflicts_with = "scores_file", required_unless_present = "scores_file")]
        model: Option<ModelArg>,
        /// Externally produced `pair_id<TAB>score` file to validate and normalize.
        #[arg(long)]
        scores_file: Option<PathBuf>,
        /// Pairs as `id<TAB>e<TAB>f[<TAB>label]`; defaults to the configured corpus.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Directory holding trained artifacts (models, dictionary, checkpoints).
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Pick the decision threshold maximizing overall F on labeled data.
    Tune {
        #[arg(long)]
        scores: PathBuf,
        /// Labeled pairs the scores refer to.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report precision, recall and F at a threshold.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// A number or a file written by `tune`.
        #[arg(long)]
        threshold: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fleiss' kappa and majority labels of an annotation count file.
    Kappa {
        annotations: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Keep the best-scored fraction of the corpus.
    Select {
        #[arg(long)]
        scores: PathBuf,
        /// Fraction kept; overrides select.keep_fraction.
        #[arg(long)]
        keep: Option<f64>,
        /// Output prefix; writes PREFIX.e, PREFIX.f and PREFIX.ids.
        #[arg(long)]
        prefix: Option<PathBuf>,
    },
    /// Run the whole chain.
    Pipeline,
    /// Write a synthetic cipher corpus for experiments.
    GenCipher {
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Writes DIR/corpus.e, DIR/corpus.f and DIR/cipher.tsv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let threads = cli.threads;
    match par::with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Context {
    settings: Settings,
    cfg: PipelineConfig,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let mut settings = match &cli.config {
            Some(p) => Settings::load(p)?,
            None => Settings::new(),
        };
        for s in &cli.set {
            settings.apply_override(s)?;
        }
        let cfg = PipelineConfig::from_settings(&settings)?;
        Ok(Self { settings, cfg })
    }

    fn out(&self) -> Result<&Path> {
        let d = &self.cfg.output_dir;
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        Ok(d)
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out()?.join(name))
    }

    fn corpus(&self) -> Result<(Vec<SentencePair>, Vec<PathBuf>)> {
        let (s, t) = self.cfg.corpus_paths()?;
        let loaded = load_parallel(s, t)?;
        let (pairs, dups) = deduplicate(&loaded.pairs);
        log::info!("{} pairs ({} rejected, {dups} duplicates)", pairs.len(), loaded.rejected);
        Ok((pairs, vec![s.to_path_buf(), t.to_path_buf()]))
    }

    fn embeddings(&self, flag: &Option<PathBuf>) -> Result<(EmbeddingTable, PathBuf)> {
        let path = match (flag, &self.cfg.embeddings) {
            (Some(p), _) | (None, Some(p)) => p.clone(),
            (None, None) => self.cfg.output_dir.join("embeddings.txt"),
        };
        Ok((load_embeddings(&path)?, path))
    }

    fn dir_or_out(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.cfg.output_dir.clone())
    }

    fn manifest(&self, command: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
        let mut m = Manifest::new(command);
        m.settings = self.cfg.to_settings();
        m.settings.merge(&self.settings);
        m.seeds = self.cfg.seeds().into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        m.inputs = inputs;
        m.outputs = outputs;
        let dir = m
            .outputs
            .first()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.cfg.output_dir.clone());
        m.write(&dir.join(format!("manifest.{command}.txt")))
    }
}

fn load_dictionary(dir: &Path) -> Result<(BilingualDictionary, Vec<PathBuf>)> {
    let mut dict = BilingualDictionary::new();
    let mut paths = Vec::new();
    for d in [Direction::EToF, Direction::FToE] {
        let p = dir.join(format!("dict.{d}.tsv"));
        dict.read_tsv(d, &p)?;
        paths.push(p);
    }
    Ok((dict, paths))
}

fn model_paths(dir: &Path) -> Vec<PathBuf> {
    [Direction::EToF, Direction::FToE]
        .into_iter()
        .map(|d| BidirectionalModels::model_path(dir, d))
        .collect()
}

/// Reads `id<TAB>e<TAB>f`, with or without a trailing label column.
fn read_any_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labeled = text
        .lines()
        .find(|l| !l.is_empty())
        .is_some_and(|l| l.split('\t').count() == 4);
    if labeled {
        Ok(read_labeled_tsv(path)?.into_iter().map(|x| x.pair).collect())
    } else {
        read_pairs_tsv(path)
    }
}

/// Scores in the order of the labeled examples.
fn aligned_scores(scores_path: &Path, examples: &[LabeledPair]) -> Result<Vec<f64>> {
    let by_id: HashMap<usize, f64> = read_scores(scores_path)?
        .into_iter()
        .map(|s| (s.pair_id, s.score))
        .collect();
    examples
        .iter()
        .map(|x| {
            by_id.get(&x.pair.id).copied().ok_or_else(|| {
                Error::Data(format!("{}: no score for pair {}", scores_path.display(), x.pair.id))
            })
        })
        .collect()
}

fn parse_threshold(arg: &str) -> Result<f64> {
    if let Ok(t) = arg.parse::<f64>() {
        return Ok(t);
    }
    let p = Path::new(arg);
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    text.trim()
        .parse()
        .map_err(|_| Error::parse(p, 1, format!("{:?} is not a threshold", text.trim())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Align => {
            let (pairs, inputs) = ctx.corpus()?;
            let models = cfg.train_aligners(&pairs)?;
            let out = ctx.out()?;
            models.save(out)?;
            let mut outputs = model_paths(out);
            for h in Heuristic::ALL {
                let p = out.join(format!("alignments.{}.txt", h.as_str()));
                write_alignments(&p, &models.align_corpus(&pairs, h))?;
                outputs.push(p);
            }
            ctx.manifest("align", inputs, outputs)
        }
        Command::Dict { models } => {
            let dir = ctx.dir_or_out(&models);
            let m = BidirectionalModels::load(&dir)?;
            let dict = divergescope::align::extract_dictionary(&m.ef, &m.fe, cfg.dict_threshold)?;
            let out = ctx.out()?;
            let mut outputs = Vec::new();
            for d in [Direction::EToF, Direction::FToE] {
                let p = out.join(format!("dict.{d}.tsv"));
                dict.write_tsv(d, &p)?;
                outputs.push(p);
            }
            println!(
                "{} e-f entries, {} f-e entries",
                dict.len(Direction::EToF),
                dict.len(Direction::FToE)
            );
            ctx.manifest("dict", model_paths(&dir), outputs)
        }
        Command::Datagen { dict } => {
            let (pairs, mut inputs) = ctx.corpus()?;
            let (dictionary, dict_paths) = load_dictionary(&ctx.dir_or_out(&dict))?;
            inputs.extend(dict_paths);
            let splits = partition_positives(
                &pairs,
                cfg.positives,
                cfg.dev_positives,
                cfg.test_positives,
                cfg.datagen_seed,
            )?;
            let mut outputs = Vec::new();
            for (name, positives, offset) in [("train", &splits.train, 0u64), ("dev", &splits.dev, 1), ("test", &splits.test, 2)] {
                let ds = build_dataset(
                    positives,
                    &dictionary,
                    &cfg.filter,
                    cfg.ratio,
                    cfg.datagen_seed.wrapping_add(offset),
                )?;
                let p = ctx.out_path(&format!("{name}.tsv"))?;
                write_labeled_tsv(&p, &ds.examples)?;
                println!(
                    "{name}: {} positives, {} negatives",
                    ds.positive_count, ds.negative_count
                );
                outputs.push(p);
            }
            ctx.manifest("datagen", inputs, outputs)
        }
        Command::TrainEmbed { alignments } => {
            let (pairs, mut inputs) = ctx.corpus()?;
            let links = match &alignments {
                Some(p) => {
                    inputs.push(p.clone());
                    read_alignments(p, &pairs)?
                }
                None => cfg.train_aligners(&pairs)?.align_corpus(&pairs, cfg.heuristic),
            };
            let table = train_bilingual_embeddings(&pairs, &links, &cfg.embed)?;
            let p = ctx.out_path("embeddings.txt")?;
            table.save(&p)?;
            ctx.manifest("train-embed", inputs, vec![p])
        }
        Command::TrainVdpwi { train, dev, embeddings } => {
            let train = train.unwrap_or_else(|| cfg.output_dir.join("train.tsv"));
            let dev = dev.unwrap_or_else(|| cfg.output_dir.join("dev.tsv"));
            let (table, emb_path) = ctx.embeddings(&embeddings)?;
            let vc = VdpwiConfig {
                embedding_dim: table.dim(),
                ..cfg.vdpwi.clone()
            };
            let (model, report) = vdpwi::train(&read_labeled_tsv(&train)?, &read_labeled_tsv(&dev)?, &vc, &table)?;
            let ckpt = ctx.out_path("vdpwi.ckpt")?;
            model.save(&ckpt)?;
            let mut log = String::from("epoch\ttrain_kl\tvalidation_pearson\n");
            for e in &report.epochs {
                let r = e.validation_pearson.map_or("undefined".to_owned(), |r| format!("{r:.6}"));
                log.push_str(&format!("{}\t{:.6}\t{r}\n", e.epoch, e.train_loss));
            }
            let log_path = ctx.out_path("vdpwi.log.tsv")?;
            write_text(&log_path, &log)?;
            println!("best epoch {}", report.best_epoch);
            ctx.manifest("train-vdpwi", vec![train, dev, emb_path], vec![ckpt, log_path])
        }
        Command::TrainFeat { train, models } => {
            let train = train.unwrap_or_else(|| cfg.output_dir.join("train.tsv"));
            let dir = ctx.dir_or_out(&models);
            let m = BidirectionalModels::load(&dir)?;
            let (dict, dict_paths) = load_dictionary(&dir)?;
            let examples = read_labeled_tsv(&train)?;
            let pairs: Vec<SentencePair> = examples.iter().map(|x| x.pair.clone()).collect();
            let labels: Vec<_> = examples.iter().map(|x| x.label).collect();
            let rows = extract_all(&pairs, &m, &dict, &cfg.feature_heuristics)?;
            let model = train_linear(&feature_names(&cfg.feature_heuristics), &rows, &labels, &cfg.linear)?;
            let p = ctx.out_path("linear.tsv")?;
            model.save(&p)?;
            println!("training accuracy {:.4}", model.train_accuracy);
            let mut inputs = vec![train];
            inputs.extend(model_paths(&dir));
            inputs.extend(dict_paths);
            ctx.manifest("train-feat", inputs, vec![p])
        }
        Command::Score {
            model,
            scores_file,
            pairs,
            output,
            models,
            embeddings,
        } => {
            let (pairs, mut inputs) = match &pairs {
                Some(p) => (read_any_pairs(p)?, vec![p.clone()]),
                None => ctx.corpus()?,
            };
            let scores = match (model, scores_file) {
                (_, Some(file)) => {
                    let s = ingest_scores(&file, &pairs)?;
                    if s.len() != pairs.len() {
                        log::warn!("{} of {} pairs have a score", s.len(), pairs.len());
                    }
                    inputs.push(file);
                    s
                }
                (Some(m), None) => {
                    let scorer = Scorer::from(m);
                    let dir = ctx.dir_or_out(&models);
                    let (table, emb_path) = ctx.embeddings(&embeddings)?;
                    inputs.push(emb_path);
                    let mut vdpwi_model = None;
                    let mut linear = None;
                    let mut aligners = None;
                    let mut dict = None;
                    match scorer {
                        Scorer::Vdpwi => {
                            let p = dir.join("vdpwi.ckpt");
                            vdpwi_model = Some(VdpwiModel::load(&p)?);
                            inputs.push(p);
                        }
                        Scorer::Feat => {
                            let p = dir.join("linear.tsv");
                            linear = Some(LinearModel::load(&p)?);
                            inputs.push(p);
                            aligners = Some(BidirectionalModels::load(&dir)?);
                            inputs.extend(model_paths(&dir));
                            let (d, paths) = load_dictionary(&dir)?;
                            dict = Some(d);
                            inputs.extend(paths);
                        }
                        Scorer::Cosine => {}
                    }
                    let set = ScorerSet {
                        embeddings: &table,
                        models: aligners.as_ref(),
                        dictionary: dict.as_ref(),
                        heuristics: &cfg.feature_heuristics,
                        vdpwi: vdpwi_model.as_ref(),
                        linear: linear.as_ref(),
                    };
                    scored(&pairs, &set.score(scorer, &pairs)?)
                }
                (None, None) => unreachable!("clap requires --model or --scores-file"),
            };
            write_scores(&output, &scores)?;
            ctx.manifest("score", inputs, vec![output])
        }
        Command::Tune { scores, labels, output } => {
            let examples = read_labeled_tsv(&labels)?;
            let s = aligned_scores(&scores, &examples)?;
            let gold: Vec<_> = examples.iter().map(|x| x.label).collect();
            let t = tune_threshold(&s, &gold, cfg.f_mode)?;
            println!("{}", format_threshold(t));
            let mut outputs = Vec::new();
            if let Some(p) = output {
                write_text(&p, &format!("{}\n", format_threshold(t)))?;
                outputs.push(p);
            }
            ctx.manifest("tune", vec![scores, labels], outputs)
        }
        Command::Eval {
            scores,
            labels,
            threshold,
            output,
        } => {
            let t = parse_threshold(&threshold)?;
            let examples = read_labeled_tsv(&labels)?;
            let s = aligned_scores(&scores, &examples)?;
            let gold: Vec<_> = examples.iter().map(|x| x.label).collect();
            let report = prf_report(&predict(&s, t), &gold, cfg.f_mode)?;
            println!("{report}");
            let mut outputs = Vec::new();
            if let Some(p) = output {
                report.write_kv(&p)?;
                outputs.push(p);
            }
            ctx.manifest("eval", vec![scores, labels], outputs)
        }
        Command::Kappa { annotations, output } => {
            let (ids, matrix) = read_annotations(&annotations)?;
            let k = fleiss_kappa(&matrix)?;
            let note = if k.degenerate { " (all ratings in one category)" } else { "" };
            println!("kappa\t{:.6}{note}", k.value);
            let mut outputs = Vec::new();
            if let Some(p) = output {
                let votes = majority_vote(&matrix)?;
                let mut text = format!("# kappa {:.6}\n", k.value);
                for (id, (label, n)) in ids.iter().zip(votes) {
                    text.push_str(&format!("{id}\t{}\t{n}\n", label.as_str()));
                }
                write_text(&p, &text)?;
                outputs.push(p);
            }
            ctx.manifest("kappa", vec![annotations], outputs)
        }
        Command::Select { scores, keep, prefix } => {
            let (pairs, mut inputs) = ctx.corpus()?;
            let s = ingest_scores(&scores, &pairs)?;
            inputs.push(scores);
            let keep = keep.unwrap_or(cfg.keep_fraction);
            let kept = select_top(&pairs, &s, keep)?;
            let prefix = match prefix {
                Some(p) => p,
                None => ctx.out_path("selected")?,
            };
            let with_ext = |ext: &str| {
                let mut p = prefix.clone().into_os_string();
                p.push(ext);
                PathBuf::from(p)
            };
            let outputs = vec![with_ext(".e"), with_ext(".f"), with_ext(".ids")];
            write_selection(&outputs[0], &outputs[1], &outputs[2], &kept)?;
            println!("kept {} of {} pairs", kept.len(), pairs.len());
            ctx.manifest("select", inputs, outputs)
        }
        Command::Pipeline => {
            let outcome = run_pipeline(cfg)?;
            for (scorer, t, report) in &outcome.evaluations {
                println!("{scorer}\tthreshold {}\toverall F {:.4}", format_threshold(*t), report.overall_f);
            }
            println!("kept {} pairs", outcome.kept);
            Ok(())
        }
        Command::GenCipher {
            pairs,
            vocab,
            noise,
            seed,
            out_dir,
        } => {
            if vocab == 0 || !(0.0..=1.0).contains(&noise) {
                return Err(Error::Config("vocab must be positive and noise in [0, 1]".into()));
            }
            let corpus = cipher_corpus(&CipherConfig {
                pairs,
                vocab,
                noise,
                seed,
                ..CipherConfig::default()
            });
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let (e, f, key) = (out_dir.join("corpus.e"), out_dir.join("corpus.f"), out_dir.join("cipher.tsv"));
            write_parallel(&e, &f, &corpus.pairs)?;
            let text: String = corpus.cipher.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
            write_text(&key, &text)?;
            ctx.manifest("gen-cipher", vec![], vec![e, f, key])
        }
    }
}
