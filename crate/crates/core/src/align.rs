//! IBM Model 1/2 word alignment, Viterbi decoding, symmetrization, and
//! dictionary extraction.
//!
//! Position 0 on the source side of every model is the NULL word. Target
//! words that align to NULL produce no link.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{write_lines, SentencePair};
use crate::dictionary::BilingualDictionary;
use crate::error::{Error, Result};
use crate::par;
use crate::vocab::Vocab;

pub const NULL_WORD: &str = "<null>";

/// Pairs per E-step work unit. Fixed so reductions never depend on thread count.
const EM_CHUNK: usize = 256;

/// Which side of a pair plays the source role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Source e, target f: models t(f|e).
    EToF,
    /// Source f, target e: models t(e|f).
    FToE,
}

impl Direction {
    pub fn source(self, pair: &SentencePair) -> &[String] {
        match self {
            Direction::EToF => &pair.e_tokens,
            Direction::FToE => &pair.f_tokens,
        }
    }

    pub fn target(self, pair: &SentencePair) -> &[String] {
        match self {
            Direction::EToF => &pair.f_tokens,
            Direction::FToE => &pair.e_tokens,
        }
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::EToF => Direction::FToE,
            Direction::FToE => Direction::EToF,
        }
    }

    /// Maps a (source position, target position) link into (e, f) space.
    fn to_ef(self, src: usize, tgt: usize) -> (usize, usize) {
        match self {
            Direction::EToF => (src, tgt),
            Direction::FToE => (tgt, src),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EToF => "e-f",
            Direction::FToE => "f-e",
        })
    }
}

/// Lexical translation probabilities t(target | source), stored sparsely
/// over co-occurring word pairs.
#[derive(Debug, Clone)]
pub struct TranslationTable {
    direction: Direction,
    src: Vocab,
    tgt: Vocab,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
}

/// Corpus re-encoded as ids; `src[0]` is always the NULL id.
struct Encoded {
    src: Vec<u32>,
    tgt: Vec<u32>,
}

impl TranslationTable {
    /// Uniform initialization over co-occurring vocabulary.
    fn uniform(pairs: &[SentencePair], direction: Direction) -> (Self, Vec<Encoded>) {
        let mut src = Vocab::new();
        let mut tgt = Vocab::new();
        src.intern(NULL_WORD);
        let encoded: Vec<Encoded> = pairs
            .iter()
            .map(|p| {
                let mut s = vec![0];
                s.extend(direction.source(p).iter().map(|w| src.intern(w)));
                let t = direction.target(p).iter().map(|w| tgt.intern(w)).collect();
                Encoded { src: s, tgt: t }
            })
            .collect();

        let mut cooc: Vec<HashSet<u32>> = vec![HashSet::new(); src.len()];
        for enc in &encoded {
            for &s in &enc.src {
                cooc[s as usize].extend(enc.tgt.iter().copied());
            }
        }
        let mut row_start = Vec::with_capacity(src.len() + 1);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        for row in cooc {
            row_start.push(cols.len());
            let mut row: Vec<u32> = row.into_iter().collect();
            row.sort_unstable();
            let p = 1.0 / row.len().max(1) as f64;
            probs.extend(std::iter::repeat(p).take(row.len()));
            cols.extend(row);
        }
        row_start.push(cols.len());
        (
            Self {
                direction,
                src,
                tgt,
                row_start,
                cols,
                probs,
            },
            encoded,
        )
    }

    /// Builds a table from explicit `(source, target, probability)` entries.
    /// Rows are stored as given; no normalization is applied.
    pub fn from_entries(direction: Direction, entries: &[(&str, &str, f64)]) -> Self {
        let mut src = Vocab::new();
        let mut tgt = Vocab::new();
        src.intern(NULL_WORD);
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new()];
        for &(s, t, p) in entries {
            let sid = src.intern(s) as usize;
            let tid = tgt.intern(t);
            if rows.len() <= sid {
                rows.resize(sid + 1, Vec::new());
            }
            rows[sid].push((tid, p));
        }
        let mut row_start = Vec::new();
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(t, _)| t);
            row.dedup_by_key(|&mut (t, _)| t);
            row_start.push(cols.len());
            for (t, p) in row {
                cols.push(t);
                probs.push(p);
            }
        }
        row_start.push(cols.len());
        Self {
            direction,
            src,
            tgt,
            row_start,
            cols,
            probs,
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    fn entry(&self, s: u32, t: u32) -> Option<usize> {
        let (lo, hi) = (self.row_start[s as usize], self.row_start[s as usize + 1]);
        self.cols[lo..hi].binary_search(&t).ok().map(|k| lo + k)
    }

    fn prob_ids(&self, s: u32, t: u32) -> f64 {
        self.entry(s, t).map_or(0.0, |k| self.probs[k])
    }

    /// t(target | source); zero for unseen pairs. Use [`NULL_WORD`] as the
    /// source for the NULL row.
    pub fn prob(&self, target: &str, source: &str) -> f64 {
        match (self.src.id(source), self.tgt.id(target)) {
            (Some(s), Some(t)) => self.prob_ids(s, t),
            _ => 0.0,
        }
    }

    /// Entries of one source row as `(target, probability)`.
    pub fn row(&self, source: &str) -> Vec<(&str, f64)> {
        let Some(s) = self.src.id(source) else {
            return Vec::new();
        };
        let (lo, hi) = (self.row_start[s as usize], self.row_start[s as usize + 1]);
        (lo..hi)
            .map(|k| (self.tgt.word(self.cols[k]), self.probs[k]))
            .collect()
    }

    /// Most probable translation of `source`; ties go to the earliest-seen target word.
    pub fn best(&self, source: &str) -> Option<(&str, f64)> {
        let mut best: Option<(u32, f64)> = None;
        let s = self.src.id(source)?;
        for k in self.row_start[s as usize]..self.row_start[s as usize + 1] {
            let (t, p) = (self.cols[k], self.probs[k]);
            if best.map_or(true, |(bt, bp)| p > bp || (p == bp && t < bt)) {
                best = Some((t, p));
            }
        }
        best.map(|(t, p)| (self.tgt.word(t), p))
    }

    /// Source vocabulary, NULL excluded.
    pub fn source_words(&self) -> impl Iterator<Item = &str> {
        self.src.words()[1..].iter().map(String::as_str)
    }

    pub fn source_vocab_len(&self) -> usize {
        self.src.len() - 1
    }

    /// Largest |Σ_w t(w|s) − 1| over all non-empty rows.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.src.len())
            .filter(|&s| self.row_start[s + 1] > self.row_start[s])
            .map(|s| {
                let sum: f64 = self.probs[self.row_start[s]..self.row_start[s + 1]].iter().sum();
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    fn normalize_from_counts(&mut self, counts: &[f64]) {
        for s in 0..self.src.len() {
            let (lo, hi) = (self.row_start[s], self.row_start[s + 1]);
            let total: f64 = counts[lo..hi].iter().sum();
            if total > 0.0 {
                for k in lo..hi {
                    self.probs[k] = counts[k] / total;
                }
            }
        }
    }

    fn encode(&self, pair: &SentencePair) -> (Vec<Option<u32>>, Vec<Option<u32>>) {
        let src = std::iter::once(Some(0))
            .chain(self.direction.source(pair).iter().map(|w| self.src.id(w)))
            .collect();
        let tgt = self.direction.target(pair).iter().map(|w| self.tgt.id(w)).collect();
        (src, tgt)
    }
}

/// Merges per-chunk sparse counts into `dense` in chunk order.
fn merge_counts(dense: &mut [f64], chunks: &[HashMap<usize, f64>]) {
    for chunk in chunks {
        for (&k, &v) in chunk {
            dense[k] += v;
        }
    }
}

fn ibm1_estep(table: &TranslationTable, chunk: &[Encoded]) -> (HashMap<usize, f64>, f64) {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    let mut ll = 0.0;
    let mut buf: Vec<(usize, f64)> = Vec::new();
    for enc in chunk {
        let norm = enc.src.len() as f64;
        for &t in &enc.tgt {
            buf.clear();
            let mut total = 0.0;
            for &s in &enc.src {
                let k = table.entry(s, t).expect("co-occurring entry");
                let p = table.probs[k];
                buf.push((k, p));
                total += p;
            }
            let total = total.max(f64::MIN_POSITIVE);
            ll += (total / norm).ln();
            for &(k, p) in &buf {
                *counts.entry(k).or_insert(0.0) += p / total;
            }
        }
    }
    (counts, ll)
}

fn ibm1_log_likelihood(table: &TranslationTable, encoded: &[Encoded]) -> f64 {
    par::map_chunks(encoded, EM_CHUNK, |chunk| ibm1_estep(table, chunk).1)
        .into_iter()
        .sum()
}

/// IBM Model 1 EM. Returns the table and the corpus log-likelihood before
/// the first iteration and after each one (`iterations + 1` values).
pub fn train_ibm1(
    pairs: &[SentencePair],
    iterations: usize,
    direction: Direction,
) -> Result<(TranslationTable, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot train an alignment model on an empty corpus".into()));
    }
    let (mut table, encoded) = TranslationTable::uniform(pairs, direction);
    let mut history = Vec::with_capacity(iterations + 1);
    for it in 0..iterations {
        let parts = par::map_chunks(&encoded, EM_CHUNK, |chunk| ibm1_estep(&table, chunk));
        let ll: f64 = parts.iter().map(|(_, ll)| ll).sum();
        history.push(ll);
        log::debug!("ibm1 {direction} iteration {it}: log-likelihood {ll:.4}");
        let mut dense = vec![0.0; table.probs.len()];
        let maps: Vec<_> = parts.into_iter().map(|(c, _)| c).collect();
        merge_counts(&mut dense, &maps);
        table.normalize_from_counts(&dense);
    }
    history.push(ibm1_log_likelihood(&table, &encoded));
    Ok((table, history))
}

/// Key of the position distribution: (target position, source length, target length).
type PosKey = (u32, u32, u32);

/// IBM Model 2: lexical table plus a position distribution
/// a(j | i, source length, target length), j = 0 being NULL.
#[derive(Debug, Clone)]
pub struct Ibm2Model {
    pub table: TranslationTable,
    align: HashMap<PosKey, Vec<f64>>,
    /// Log-likelihood before training and after each iteration.
    pub history: Vec<f64>,
}

impl Ibm2Model {
    /// A model with the given lexical table and uniform position distribution.
    pub fn from_table(table: TranslationTable) -> Self {
        Self {
            table,
            align: HashMap::new(),
            history: Vec::new(),
        }
    }

    pub fn direction(&self) -> Direction {
        self.table.direction
    }

    /// a(j | i, src_len, tgt_len); uniform for unseen length tuples.
    pub fn align_prob(&self, j: usize, i: usize, src_len: usize, tgt_len: usize) -> f64 {
        match self.align.get(&(i as u32, src_len as u32, tgt_len as u32)) {
            Some(dist) => dist.get(j).copied().unwrap_or(0.0),
            None if j <= src_len => 1.0 / (src_len + 1) as f64,
            None => 0.0,
        }
    }

    /// Largest |Σ_j a(j|i,ls,lt) − 1| over the learned tuples.
    pub fn max_align_normalization_error(&self) -> f64 {
        self.align
            .values()
            .map(|d| (d.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over corpus target positions of the expected |j/ls − i/lt|
    /// under the position distribution restricted to non-NULL j (1-based).
    pub fn mean_diagonal_distance(&self, pairs: &[SentencePair]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for p in pairs {
            let (ls, lt) = (self.direction().source(p).len(), self.direction().target(p).len());
            for i in 0..lt {
                let mass: f64 = (1..=ls).map(|j| self.align_prob(j, i, ls, lt)).sum();
                if mass <= 0.0 {
                    continue;
                }
                let d: f64 = (1..=ls)
                    .map(|j| {
                        self.align_prob(j, i, ls, lt)
                            * (j as f64 / ls as f64 - (i + 1) as f64 / lt as f64).abs()
                    })
                    .sum();
                total += d / mass;
                n += 1;
            }
        }
        total / n.max(1) as f64
    }
}

struct Ibm2Counts {
    lex: HashMap<usize, f64>,
    pos: HashMap<PosKey, Vec<f64>>,
    ll: f64,
}

fn ibm2_estep(model: &Ibm2Model, chunk: &[Encoded], collect: bool) -> Ibm2Counts {
    let mut out = Ibm2Counts {
        lex: HashMap::new(),
        pos: HashMap::new(),
        ll: 0.0,
    };
    let mut buf: Vec<(usize, f64)> = Vec::new();
    for enc in chunk {
        let ls = enc.src.len() - 1;
        let lt = enc.tgt.len();
        for (i, &t) in enc.tgt.iter().enumerate() {
            let key = (i as u32, ls as u32, lt as u32);
            let dist = &model.align[&key];
            buf.clear();
            let mut total = 0.0;
            for (j, &s) in enc.src.iter().enumerate() {
                let k = model.table.entry(s, t).expect("co-occurring entry");
                let p = model.table.probs[k] * dist[j];
                buf.push((k, p));
                total += p;
            }
            let total = total.max(f64::MIN_POSITIVE);
            out.ll += total.ln();
            if collect {
                let pos = out.pos.entry(key).or_insert_with(|| vec![0.0; ls + 1]);
                for (j, &(k, p)) in buf.iter().enumerate() {
                    let post = p / total;
                    *out.lex.entry(k).or_insert(0.0) += post;
                    pos[j] += post;
                }
            }
        }
    }
    out
}

/// IBM Model 2 EM starting from `init` (normally a Model 1 table) with a
/// uniform position distribution.
pub fn train_ibm2(pairs: &[SentencePair], iterations: usize, init: &TranslationTable) -> Result<Ibm2Model> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot train an alignment model on an empty corpus".into()));
    }
    let direction = init.direction;
    let (mut table, encoded) = TranslationTable::uniform(pairs, direction);
    let uncovered = table.src.words()[1..].iter().find(|w| init.src.id(w).is_none())
        .or_else(|| table.tgt.words().iter().find(|w| init.tgt.id(w).is_none()));
    if let Some(w) = uncovered {
        return Err(Error::Data(format!("initial table does not cover corpus word {w:?}")));
    }
    for s in 0..table.src.len() {
        let sw = table.src.word(s as u32).to_owned();
        for k in table.row_start[s]..table.row_start[s + 1] {
            let tw = table.tgt.word(table.cols[k]);
            table.probs[k] = init.prob(tw, &sw);
        }
    }

    let mut align: HashMap<PosKey, Vec<f64>> = HashMap::new();
    for enc in &encoded {
        let (ls, lt) = (enc.src.len() - 1, enc.tgt.len());
        for i in 0..lt {
            align
                .entry((i as u32, ls as u32, lt as u32))
                .or_insert_with(|| vec![1.0 / (ls + 1) as f64; ls + 1]);
        }
    }
    let mut model = Ibm2Model {
        table,
        align,
        history: Vec::with_capacity(iterations + 1),
    };

    for it in 0..iterations {
        let parts = par::map_chunks(&encoded, EM_CHUNK, |chunk| ibm2_estep(&model, chunk, true));
        let ll: f64 = parts.iter().map(|c| c.ll).sum();
        model.history.push(ll);
        log::debug!("ibm2 {direction} iteration {it}: log-likelihood {ll:.4}");

        let mut lex = vec![0.0; model.table.probs.len()];
        for part in &parts {
            for (&k, &v) in &part.lex {
                lex[k] += v;
            }
        }
        model.table.normalize_from_counts(&lex);

        let mut pos: HashMap<PosKey, Vec<f64>> = HashMap::new();
        for part in &parts {
            for (key, counts) in &part.pos {
                let acc = pos.entry(*key).or_insert_with(|| vec![0.0; counts.len()]);
                for (a, c) in acc.iter_mut().zip(counts) {
                    *a += c;
                }
            }
        }
        for (key, counts) in pos {
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                model.align.insert(key, counts.iter().map(|c| c / total).collect());
            }
        }
    }
    let ll: f64 = par::map_chunks(&encoded, EM_CHUNK, |chunk| ibm2_estep(&model, chunk, false).ll)
        .into_iter()
        .sum();
    model.history.push(ll);
    Ok(model)
}

/// Model 1 for `ibm1_iterations`, then Model 2 for `ibm2_iterations`.
pub fn train_model(
    pairs: &[SentencePair],
    direction: Direction,
    ibm1_iterations: usize,
    ibm2_iterations: usize,
) -> Result<Ibm2Model> {
    let (init, _) = train_ibm1(pairs, ibm1_iterations, direction)?;
    train_ibm2(pairs, ibm2_iterations, &init)
}

/// A set of (e index, f index) links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    links: BTreeSet<(usize, usize)>,
    e_len: usize,
    f_len: usize,
}

impl Alignment {
    pub fn new(e_len: usize, f_len: usize, links: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(e, f)) = links.iter().find(|&&(e, f)| e >= e_len || f >= f_len) {
            return Err(Error::Data(format!("link {e}-{f} outside a {e_len}x{f_len} pair")));
        }
        Ok(Self { links, e_len, f_len })
    }

    pub fn empty(e_len: usize, f_len: usize) -> Self {
        Self {
            links: BTreeSet::new(),
            e_len,
            f_len,
        }
    }

    pub fn links(&self) -> &BTreeSet<(usize, usize)> {
        &self.links
    }

    pub fn e_len(&self) -> usize {
        self.e_len
    }

    pub fn f_len(&self) -> usize {
        self.f_len
    }

    pub fn contains(&self, e: usize, f: usize) -> bool {
        self.links.contains(&(e, f))
    }

    pub fn is_subset(&self, other: &Alignment) -> bool {
        self.links.is_subset(&other.links)
    }

    /// Swaps the roles of the two sides.
    pub fn transpose(&self) -> Alignment {
        Alignment {
            links: self.links.iter().map(|&(e, f)| (f, e)).collect(),
            e_len: self.f_len,
            f_len: self.e_len,
        }
    }

    /// `i-j` links separated by spaces, in sorted order.
    pub fn to_line(&self) -> String {
        self.links
            .iter()
            .map(|(e, f)| format!("{e}-{f}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_line(line: &str, e_len: usize, f_len: usize) -> Result<Self> {
        let mut links = Vec::new();
        for tok in line.split_whitespace() {
            let (e, f) = tok
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| Error::Data(format!("malformed alignment link {tok:?}")))?;
            links.push((e, f));
        }
        Alignment::new(e_len, f_len, links)
    }
}

/// Result of decoding one pair.
#[derive(Debug, Clone)]
pub struct Viterbi {
    /// Links in (e, f) space regardless of model direction.
    pub alignment: Alignment,
    /// Tokens on either side unknown to the model.
    pub oov: usize,
}

/// Best source position for each target word under t·a. Ties go to the
/// smallest position; NULL wins ties, so words with no evidence stay unlinked.
pub fn viterbi_align(model: &Ibm2Model, pair: &SentencePair) -> Viterbi {
    let direction = model.direction();
    let (src, tgt) = model.table.encode(pair);
    let ls = src.len() - 1;
    let lt = tgt.len();
    let oov = src.iter().filter(|s| s.is_none()).count() + tgt.iter().filter(|t| t.is_none()).count();
    let mut links = Vec::new();
    for (i, t) in tgt.iter().enumerate() {
        let Some(t) = *t else { continue };
        let mut best_j = 0;
        let mut best = f64::NEG_INFINITY;
        for (j, s) in src.iter().enumerate() {
            let p = s.map_or(0.0, |s| model.table.prob_ids(s, t)) * model.align_prob(j, i, ls, lt);
            if p > best {
                best = p;
                best_j = j;
            }
        }
        if best_j > 0 {
            links.push(direction.to_ef(best_j - 1, i));
        }
    }
    Viterbi {
        alignment: Alignment::new(pair.e_len(), pair.f_len(), links).expect("links within bounds"),
        oov,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heuristic {
    Union,
    Intersection,
    GrowDiagFinalAnd,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::Union, Heuristic::Intersection, Heuristic::GrowDiagFinalAnd];

    pub fn as_str(self) -> &'static str {
        match self {
            Heuristic::Union => "union",
            Heuristic::Intersection => "intersection",
            Heuristic::GrowDiagFinalAnd => "grow-diag-final-and",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown symmetrization heuristic {s:?}")))
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Combines two directional alignments, both already in (e, f) space.
pub fn symmetrize(forward: &Alignment, reverse: &Alignment, heuristic: Heuristic) -> Result<Alignment> {
    if forward.e_len != reverse.e_len || forward.f_len != reverse.f_len {
        return Err(Error::Data(format!(
            "cannot symmetrize a {}x{} alignment with a {}x{} one",
            forward.e_len, forward.f_len, reverse.e_len, reverse.f_len
        )));
    }
    let (e_len, f_len) = (forward.e_len, forward.f_len);
    let union: BTreeSet<_> = forward.links.union(&reverse.links).copied().collect();
    let inter: BTreeSet<_> = forward.links.intersection(&reverse.links).copied().collect();
    let links = match heuristic {
        Heuristic::Union => union,
        Heuristic::Intersection => inter,
        Heuristic::GrowDiagFinalAnd => {
            let mut links = inter;
            let mut e_aligned = vec![false; e_len];
            let mut f_aligned = vec![false; f_len];
            for &(e, f) in &links {
                e_aligned[e] = true;
                f_aligned[f] = true;
            }
            // grow-diag
            loop {
                let mut added = false;
                for e in 0..e_len {
                    for f in 0..f_len {
                        if !links.contains(&(e, f)) {
                            continue;
                        }
                        for (de, df) in NEIGHBORS {
                            let (Some(ne), Some(nf)) = (e.checked_add_signed(de), f.checked_add_signed(df)) else {
                                continue;
                            };
                            if ne >= e_len || nf >= f_len {
                                continue;
                            }
                            if (!e_aligned[ne] || !f_aligned[nf]) && union.contains(&(ne, nf)) {
                                links.insert((ne, nf));
                                e_aligned[ne] = true;
                                f_aligned[nf] = true;
                                added = true;
                            }
                        }
                    }
                }
                if !added {
                    break;
                }
            }
            // final-and, forward then reverse
            for directional in [forward, reverse] {
                for &(e, f) in &directional.links {
                    if !e_aligned[e] && !f_aligned[f] {
                        links.insert((e, f));
                        e_aligned[e] = true;
                        f_aligned[f] = true;
                    }
                }
            }
            links
        }
    };
    Ok(Alignment { links, e_len, f_len })
}

/// Entries with t(w|s) ≥ `prob_threshold`, read from both directional models.
pub fn extract_dictionary(model_ef: &Ibm2Model, model_fe: &Ibm2Model, prob_threshold: f64) -> Result<BilingualDictionary> {
    if !(prob_threshold > 0.0 && prob_threshold <= 1.0) {
        return Err(Error::Config(format!("dictionary threshold {prob_threshold} outside (0, 1]")));
    }
    if model_ef.direction() != Direction::EToF || model_fe.direction() != Direction::FToE {
        return Err(Error::Config("extract_dictionary needs an e-f and an f-e model".into()));
    }
    let mut dict = BilingualDictionary::new();
    for model in [model_ef, model_fe] {
        for s in model.table.source_words() {
            for (t, p) in model.table.row(s) {
                if p >= prob_threshold {
                    dict.insert(model.direction(), s, t, p);
                }
            }
        }
    }
    Ok(dict)
}

/// Both directional models for a corpus.
#[derive(Debug, Clone)]
pub struct BidirectionalModels {
    pub ef: Ibm2Model,
    pub fe: Ibm2Model,
}

impl BidirectionalModels {
    pub fn train(pairs: &[SentencePair], ibm1_iterations: usize, ibm2_iterations: usize) -> Result<Self> {
        Ok(Self {
            ef: train_model(pairs, Direction::EToF, ibm1_iterations, ibm2_iterations)?,
            fe: train_model(pairs, Direction::FToE, ibm1_iterations, ibm2_iterations)?,
        })
    }

    /// Directional Viterbi alignments of one pair, both in (e, f) space.
    pub fn directional(&self, pair: &SentencePair) -> (Alignment, Alignment) {
        (viterbi_align(&self.ef, pair).alignment, viterbi_align(&self.fe, pair).alignment)
    }

    pub fn align(&self, pair: &SentencePair, heuristic: Heuristic) -> Alignment {
        let (fwd, rev) = self.directional(pair);
        symmetrize(&fwd, &rev, heuristic).expect("same pair")
    }

    /// All three symmetrizations of one pair.
    pub fn align_all_heuristics(&self, pair: &SentencePair) -> HashMap<Heuristic, Alignment> {
        let (fwd, rev) = self.directional(pair);
        Heuristic::ALL
            .into_iter()
            .map(|h| (h, symmetrize(&fwd, &rev, h).expect("same pair")))
            .collect()
    }

    /// Aligns a corpus in parallel, preserving order.
    pub fn align_corpus(&self, pairs: &[SentencePair], heuristic: Heuristic) -> Vec<Alignment> {
        par::map(pairs, |p| self.align(p, heuristic))
    }
}

pub fn write_alignments(path: &Path, alignments: &[Alignment]) -> Result<()> {
    write_lines(path, alignments.iter().map(Alignment::to_line))
}

/// Reads an alignment file; line i is checked against `pairs[i]`.
pub fn read_alignments(path: &Path, pairs: &[SentencePair]) -> Result<Vec<Alignment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != pairs.len() {
        return Err(Error::Data(format!(
            "{} has {} alignment lines for {} pairs",
            path.display(),
            lines.len(),
            pairs.len()
        )));
    }
    lines
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(i, (line, p))| {
            Alignment::parse_line(line, p.e_len(), p.f_len()).map_err(|e| Error::parse(path, i + 1, e.to_string()))
        })
        .collect()
}

/// Writes a model as text: direction, both vocabularies in id order, one
/// sparse row per source word, then the position distributions sorted by
/// key. Probabilities round-trip exactly.
pub fn save_model(path: &Path, model: &Ibm2Model) -> Result<()> {
    let t = &model.table;
    let mut lines = vec![
        format!("direction\t{}", t.direction),
        format!("source\t{}", t.src.words().join(" ")),
        format!("target\t{}", t.tgt.words().join(" ")),
    ];
    for s in 0..t.src.len() {
        let (lo, hi) = (t.row_start[s], t.row_start[s + 1]);
        let cells: Vec<String> = (lo..hi).map(|k| format!("{}:{}", t.cols[k], t.probs[k])).collect();
        lines.push(format!("row\t{s}\t{}", cells.join(" ")));
    }
    let mut keys: Vec<&PosKey> = model.align.keys().collect();
    keys.sort_unstable();
    for key in keys {
        let dist: Vec<String> = model.align[key].iter().map(f64::to_string).collect();
        lines.push(format!("pos\t{}\t{}\t{}\t{}", key.0, key.1, key.2, dist.join(" ")));
    }
    write_lines(path, lines)
}

pub fn load_model(path: &Path) -> Result<Ibm2Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut direction = None;
    let (mut src, mut tgt) = (Vocab::new(), Vocab::new());
    let (mut row_start, mut cols, mut probs) = (vec![0], Vec::new(), Vec::new());
    let mut align = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::parse(path, i + 1, msg.to_owned());
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad probability"));
        let int = |s: &str| s.parse::<u32>().map_err(|_| bad("bad integer"));
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["direction", d] => {
                direction = Some(match *d {
                    "e-f" => Direction::EToF,
                    "f-e" => Direction::FToE,
                    _ => return Err(bad("direction must be e-f or f-e")),
                })
            }
            ["source", words] => words.split(' ').for_each(|w| {
                src.intern(w);
            }),
            ["target", words] => words.split(' ').filter(|w| !w.is_empty()).for_each(|w| {
                tgt.intern(w);
            }),
            ["row", s, cells] => {
                if int(s)? as usize != row_start.len() - 1 {
                    return Err(bad("rows out of order"));
                }
                for cell in cells.split(' ').filter(|c| !c.is_empty()) {
                    let (t, p) = cell.split_once(':').ok_or_else(|| bad("expected target:prob"))?;
                    let t = int(t)?;
                    if t as usize >= tgt.len() {
                        return Err(bad("target id out of range"));
                    }
                    cols.push(t);
                    probs.push(num(p)?);
                }
                row_start.push(cols.len());
            }
            ["pos", a, b, c, dist] => {
                let dist = dist.split(' ').map(num).collect::<Result<Vec<_>>>()?;
                align.insert((int(a)?, int(b)?, int(c)?), dist);
            }
            _ => return Err(bad("unrecognized model line")),
        }
    }
    let direction = direction.ok_or_else(|| Error::parse(path, 0, "missing direction line"))?;
    if src.word(0) != NULL_WORD || row_start.len() != src.len() + 1 {
        return Err(Error::parse(path, 0, "source vocabulary and rows disagree"));
    }
    Ok(Ibm2Model {
        table: TranslationTable {
            direction,
            src,
            tgt,
            row_start,
            cols,
            probs,
        },
        align,
        history: Vec::new(),
    })
}

impl BidirectionalModels {
    pub fn model_path(dir: &Path, direction: Direction) -> std::path::PathBuf {
        dir.join(format!("model.{direction}.txt"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(&Self::model_path(dir, Direction::EToF), &self.ef)?;
        save_model(&Self::model_path(dir, Direction::FToE), &self.fe)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ef = load_model(&Self::model_path(dir, Direction::EToF))?;
        let fe = load_model(&Self::model_path(dir, Direction::FToE))?;
        if ef.direction() != Direction::EToF || fe.direction() != Direction::FToE {
            return Err(Error::Data(format!("{}: model directions are swapped", dir.display())));
        }
        Ok(Self { ef, fe })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: usize, e: &str, f: &str) -> SentencePair {
        SentencePair::from_text(id, e, f)
    }

    fn al(e_len: usize, f_len: usize, links: &[(usize, usize)]) -> Alignment {
        Alignment::new(e_len, f_len, links.iter().copied()).unwrap()
    }

    #[test]
    fn ibm1_two_pair_corpus_resolves_toward_a_x() {
        let corpus = [pair(0, "a b", "x y"), pair(1, "a", "x")];
        let (t, hist) = train_ibm1(&corpus, 20, Direction::EToF).unwrap();
        assert!(t.prob("x", "a") > 0.9, "{}", t.prob("x", "a"));
        assert!(t.max_normalization_error() < 1e-9);
        for w in hist.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn ibm1_single_pair_one_iteration() {
        // Only target word is x, so every source row (a and NULL) collapses onto it.
        let (t, _) = train_ibm1(&[pair(0, "a", "x")], 1, Direction::EToF).unwrap();
        assert_eq!(t.prob("x", "a"), 1.0);
        assert_eq!(t.prob("x", NULL_WORD), 1.0);
    }

    #[test]
    fn ibm1_zero_iterations_is_uniform_over_cooccurrence() {
        let corpus = [pair(0, "a b", "x y"), pair(1, "a", "z")];
        let (t, hist) = train_ibm1(&corpus, 0, Direction::EToF).unwrap();
        assert_eq!(hist.len(), 1);
        assert!((t.prob("x", "a") - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.prob("z", "a") - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.prob("x", "b") - 0.5).abs() < 1e-15);
        assert_eq!(t.prob("z", "b"), 0.0);
    }

    #[test]
    fn ibm1_empty_corpus_is_an_error() {
        assert!(train_ibm1(&[], 5, Direction::EToF).is_err());
    }

    #[test]
    fn ibm1_one_iteration_by_hand() {
        // Corpus {(a b | x y), (a | x)} from uniform init.
        // Rows: NULL→{x,y} 1/2 each, a→{x,y} 1/2 each, b→{x,y} 1/2 each.
        // Pair 1: each f word sees 3 sources with 1/2 → posterior 1/3 each.
        // Pair 2: x sees NULL, a with 1/2 → posterior 1/2 each.
        // c(x|a) = 1/3 + 1/2, c(y|a) = 1/3 → t(x|a) = (5/6)/(7/6) = 5/7.
        let corpus = [pair(0, "a b", "x y"), pair(1, "a", "x")];
        let (t, _) = train_ibm1(&corpus, 1, Direction::EToF).unwrap();
        assert!((t.prob("x", "a") - 5.0 / 7.0).abs() < 1e-12);
        assert!((t.prob("x", "b") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ibm2_zero_iterations_keeps_init() {
        let corpus = [pair(0, "a b", "x y"), pair(1, "a", "x")];
        let (init, _) = train_ibm1(&corpus, 3, Direction::EToF).unwrap();
        let m = train_ibm2(&corpus, 0, &init).unwrap();
        assert_eq!(m.table.prob("x", "a"), init.prob("x", "a"));
        assert!((m.align_prob(1, 0, 2, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.history.len(), 1);
    }

    #[test]
    fn viterbi_forced_argmax_and_null() {
        let t = TranslationTable::from_entries(Direction::EToF, &[("a", "x", 1.0)]);
        let m = Ibm2Model::from_table(t);
        let v = viterbi_align(&m, &pair(0, "a", "x"));
        assert_eq!(v.alignment, al(1, 1, &[(0, 0)]));
        assert_eq!(v.oov, 0);

        let t = TranslationTable::from_entries(Direction::EToF, &[(NULL_WORD, "x", 1.0), ("a", "y", 1.0)]);
        let v = viterbi_align(&Ibm2Model::from_table(t), &pair(0, "a", "x"));
        assert!(v.alignment.links().is_empty());
    }

    #[test]
    fn viterbi_tie_goes_to_earlier_position() {
        let t = TranslationTable::from_entries(Direction::EToF, &[("a", "x", 0.5), ("b", "x", 0.5)]);
        let v = viterbi_align(&Ibm2Model::from_table(t), &pair(0, "a b", "x"));
        assert_eq!(v.alignment, al(2, 1, &[(0, 0)]));
    }

    #[test]
    fn viterbi_reports_oov_and_transposes_reverse_links() {
        let t = TranslationTable::from_entries(Direction::FToE, &[("x", "a", 1.0)]);
        let v = viterbi_align(&Ibm2Model::from_table(t), &pair(0, "q a", "x"));
        // target e-side "q" is unknown; "a" (e index 1) links to f index 0.
        assert_eq!(v.alignment, al(2, 1, &[(1, 0)]));
        assert_eq!(v.oov, 1);
    }

    #[test]
    fn symmetrize_set_operations() {
        let fwd = al(2, 2, &[(0, 0), (1, 1)]);
        let rev = al(2, 2, &[(0, 0)]);
        assert_eq!(symmetrize(&fwd, &rev, Heuristic::Intersection).unwrap(), al(2, 2, &[(0, 0)]));
        assert_eq!(symmetrize(&fwd, &rev, Heuristic::Union).unwrap(), fwd);
    }

    #[test]
    fn grow_diag_final_and_hand_trace() {
        let fwd = al(2, 3, &[(0, 0), (1, 2)]);
        let rev = al(2, 3, &[(0, 0), (1, 1)]);
        let g = symmetrize(&fwd, &rev, Heuristic::GrowDiagFinalAnd).unwrap();
        assert_eq!(g, al(2, 3, &[(0, 0), (1, 1), (1, 2)]));
    }

    #[test]
    fn grow_diag_final_and_final_pass() {
        // No intersection; the final-and pass admits forward links whose
        // endpoints are both still unaligned.
        let fwd = al(3, 3, &[(0, 2), (2, 0)]);
        let rev = al(3, 3, &[(0, 0)]);
        let g = symmetrize(&fwd, &rev, Heuristic::GrowDiagFinalAnd).unwrap();
        assert_eq!(g, al(3, 3, &[(0, 2), (2, 0)]));
    }

    #[test]
    fn symmetrize_length_mismatch() {
        assert!(symmetrize(&al(2, 2, &[]), &al(2, 3, &[]), Heuristic::Union).is_err());
    }

    #[test]
    fn alignment_bounds_and_text() {
        assert!(Alignment::new(1, 1, [(1, 0)]).is_err());
        let a = al(3, 3, &[(2, 1), (0, 0)]);
        assert_eq!(a.to_line(), "0-0 2-1");
        assert_eq!(Alignment::parse_line("2-1 0-0 0-0", 3, 3).unwrap(), a);
        assert!(Alignment::parse_line("0_0", 3, 3).is_err());
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn dictionary_threshold_rule() {
        let ef = Ibm2Model::from_table(TranslationTable::from_entries(
            Direction::EToF,
            &[("a", "x", 0.95), ("a", "y", 0.05)],
        ));
        let fe = Ibm2Model::from_table(TranslationTable::from_entries(
            Direction::FToE,
            &[("x", "a", 0.6), ("x", "b", 0.4)],
        ));
        let d = extract_dictionary(&ef, &fe, 0.5).unwrap();
        assert_eq!(d.translations(Direction::EToF, "a").unwrap().keys().collect::<Vec<_>>(), vec!["x"]);
        assert_eq!(d.len(Direction::FToE), 1);
        let strict = extract_dictionary(&ef, &fe, 1.0).unwrap();
        assert!(strict.is_empty());
        assert!(extract_dictionary(&ef, &fe, 0.0).is_err());
        assert!(extract_dictionary(&fe, &ef, 0.5).is_err());
    }

    #[test]
    fn alignment_file_round_trip() {
        let pairs = [pair(0, "a b", "x y"), pair(1, "c", "z")];
        let als = vec![al(2, 2, &[(0, 0), (1, 1)]), al(1, 1, &[])];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        write_alignments(&path, &als).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0-0 1-1\n\n");
        assert_eq!(read_alignments(&path, &pairs).unwrap(), als);
        assert!(read_alignments(&path, &pairs[..1]).is_err());
    }

    fn arb_alignment_pair() -> impl Strategy<Value = (Alignment, Alignment)> {
        (1usize..8, 1usize..8).prop_flat_map(|(el, fl)| {
            let links = prop::collection::vec((0..el, 0..fl), 0..12);
            (links.clone(), links).prop_map(move |(a, b)| {
                (Alignment::new(el, fl, a).unwrap(), Alignment::new(el, fl, b).unwrap())
            })
        })
    }

    proptest! {
        #[test]
        fn symmetrization_containment((fwd, rev) in arb_alignment_pair()) {
            let i = symmetrize(&fwd, &rev, Heuristic::Intersection).unwrap();
            let g = symmetrize(&fwd, &rev, Heuristic::GrowDiagFinalAnd).unwrap();
            let u = symmetrize(&fwd, &rev, Heuristic::Union).unwrap();
            prop_assert!(i.is_subset(&g));
            prop_assert!(g.is_subset(&u));
        }
    }

    #[test]
    fn viterbi_is_stable_under_id_relabeling() {
        let corpus: Vec<_> = ["a b c|x y z", "a c|x z", "b|y", "c a|z x"]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (e, f) = s.split_once('|').unwrap();
                pair(i, e, f)
            })
            .collect();
        let m = train_model(&corpus, Direction::EToF, 5, 5).unwrap();
        for p in &corpus {
            let mut q = p.clone();
            q.id += 1000;
            assert_eq!(viterbi_align(&m, p).alignment, viterbi_align(&m, &q).alignment);
        }
    }

    #[test]
    fn model_round_trip() {
        let corpus: Vec<_> = ["a b c|x y z", "a c|x z", "b|y", "c a|z x w"]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (e, f) = s.split_once('|').unwrap();
                pair(i, e, f)
            })
            .collect();
        let models = BidirectionalModels::train(&corpus, 3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        models.save(dir.path()).unwrap();
        let back = BidirectionalModels::load(dir.path()).unwrap();
        for p in &corpus {
            assert_eq!(back.directional(p), models.directional(p));
        }
        for (a, b) in [(&models.ef, &back.ef), (&models.fe, &back.fe)] {
            for w in a.table.source_words() {
                assert_eq!(a.table.row(w), b.table.row(w));
            }
            assert_eq!(a.align, b.align);
        }
        let d1 = extract_dictionary(&models.ef, &models.fe, 0.3).unwrap();
        let d2 = extract_dictionary(&back.ef, &back.fe, 0.3).unwrap();
        assert_eq!(d1, d2);
    }
}
