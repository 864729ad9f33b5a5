//! Sentence-aligned corpora: loading, tokenization, deduplication, splits,
//! and the on-disk pair formats every other module reads.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A tokenized bitext unit. `id` is the load-order index within one corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub id: usize,
    pub e_tokens: Vec<String>,
    pub f_tokens: Vec<String>,
}

impl SentencePair {
    pub fn new(id: usize, e_tokens: Vec<String>, f_tokens: Vec<String>) -> Self {
        Self {
            id,
            e_tokens,
            f_tokens,
        }
    }

    /// Builds a pair from two whitespace-separated strings.
    pub fn from_text(id: usize, e: &str, f: &str) -> Self {
        Self::new(id, tokenize(e), tokenize(f))
    }

    pub fn e_len(&self) -> usize {
        self.e_tokens.len()
    }

    pub fn f_len(&self) -> usize {
        self.f_tokens.len()
    }

    fn same_text(&self, other: &SentencePair) -> bool {
        self.e_tokens == other.e_tokens && self.f_tokens == other.f_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Equivalent,
    Divergent,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Equivalent => "equivalent",
            Label::Divergent => "divergent",
        }
    }

    /// 1.0 for equivalent, 0.0 for divergent.
    pub fn indicator(self) -> f64 {
        match self {
            Label::Equivalent => 1.0,
            Label::Divergent => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "equivalent" => Ok(Label::Equivalent),
            "divergent" => Ok(Label::Divergent),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub pair: SentencePair,
    pub label: Label,
}

impl LabeledPair {
    pub fn new(pair: SentencePair, label: Label) -> Self {
        Self { pair, label }
    }
}

/// Disjoint train/dev/test partition of a list.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Result of [`load_parallel`]: accepted pairs plus the number of lines
/// dropped because one side was empty after tokenization.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub pairs: Vec<SentencePair>,
    pub rejected: usize,
}

/// Splits on Unicode whitespace and lowercases. Nothing else.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Loads a two-file corpus, one sentence per line on each side.
///
/// Ids are assigned from a running counter over accepted pairs, so they are
/// always `0..pairs.len()`.
pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<LoadedCorpus> {
    let e_lines = read_lines(source_path)?;
    let f_lines = read_lines(target_path)?;
    if e_lines.len() != f_lines.len() {
        return Err(Error::Data(format!(
            "line count mismatch {} vs {} ({} / {})",
            e_lines.len(),
            f_lines.len(),
            source_path.display(),
            target_path.display()
        )));
    }
    let mut pairs = Vec::with_capacity(e_lines.len());
    let mut rejected = 0;
    for (e, f) in e_lines.iter().zip(&f_lines) {
        let (e_tokens, f_tokens) = (tokenize(e), tokenize(f));
        if e_tokens.is_empty() || f_tokens.is_empty() {
            rejected += 1;
            continue;
        }
        pairs.push(SentencePair::new(pairs.len(), e_tokens, f_tokens));
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} pair(s) with an empty side");
    }
    Ok(LoadedCorpus { pairs, rejected })
}

/// Keeps the first occurrence of every exact (e, f) token pair. Returns the
/// kept pairs and the number removed.
pub fn deduplicate(pairs: &[SentencePair]) -> (Vec<SentencePair>, usize) {
    let mut seen: HashSet<(&[String], &[String])> = HashSet::with_capacity(pairs.len());
    let mut kept = Vec::with_capacity(pairs.len());
    for p in pairs {
        if seen.insert((p.e_tokens.as_slice(), p.f_tokens.as_slice())) {
            kept.push(p.clone());
        }
    }
    let removed = pairs.len() - kept.len();
    (kept, removed)
}

/// Seeded shuffle-then-cut split. Dev and test sizes are floors; the
/// remainder goes to train.
pub fn split_corpus<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<CorpusSplit<T>> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_dev = (fractions[1] * n as f64).floor() as usize;
    let n_test = ((fractions[2] * n as f64).floor() as usize).min(n - n_dev);
    let n_train = n - n_dev - n_test;

    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut w = create(path)?;
    for line in lines {
        writeln!(w, "{}", line.as_ref()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn pair_tsv_line(p: &SentencePair) -> String {
    format!("{}\t{}\t{}", p.id, p.e_tokens.join(" "), p.f_tokens.join(" "))
}

/// Writes `id<TAB>e<TAB>f` lines.
pub fn write_pairs_tsv(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    write_lines(path, pairs.iter().map(pair_tsv_line))
}

/// Writes `id<TAB>e<TAB>f<TAB>label` lines.
pub fn write_labeled_tsv(path: &Path, pairs: &[LabeledPair]) -> Result<()> {
    write_lines(
        path,
        pairs
            .iter()
            .map(|lp| format!("{}\t{}", pair_tsv_line(&lp.pair), lp.label)),
    )
}

/// Writes the two-file corpus format.
pub fn write_parallel(source_path: &Path, target_path: &Path, pairs: &[SentencePair]) -> Result<()> {
    write_lines(source_path, pairs.iter().map(|p| p.e_tokens.join(" ")))?;
    write_lines(target_path, pairs.iter().map(|p| p.f_tokens.join(" ")))
}

fn parse_tsv_pair(path: &Path, lineno: usize, fields: &[&str]) -> Result<SentencePair> {
    let id = fields[0]
        .parse::<usize>()
        .map_err(|_| Error::parse(path, lineno, format!("bad pair id {:?}", fields[0])))?;
    let pair = SentencePair::new(id, tokenize(fields[1]), tokenize(fields[2]));
    if pair.e_tokens.is_empty() || pair.f_tokens.is_empty() {
        return Err(Error::parse(path, lineno, "empty sentence side"));
    }
    Ok(pair)
}

pub fn read_pairs_tsv(path: &Path) -> Result<Vec<SentencePair>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, i + 1, format!("expected 3 fields, found {}", fields.len())));
        }
        out.push(parse_tsv_pair(path, i + 1, &fields)?);
    }
    Ok(out)
}

pub fn read_labeled_tsv(path: &Path) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, i + 1, format!("expected 4 fields, found {}", fields.len())));
        }
        let pair = parse_tsv_pair(path, i + 1, &fields)?;
        let label = fields[3].parse().map_err(|e: String| Error::parse(path, i + 1, e))?;
        out.push(LabeledPair::new(pair, label));
    }
    Ok(out)
}

/// True if `a` and `b` hold the same token sequences, ignoring ids.
pub fn same_text(a: &SentencePair, b: &SentencePair) -> bool {
    a.same_text(b)
}
