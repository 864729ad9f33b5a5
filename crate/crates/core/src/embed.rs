//! Shared bilingual word vectors, alignment-projected skip-gram training,
//! and the mean-embedding cosine baseline.
//!
//! Both languages live in one table; keys carry an `e:` or `f:` prefix.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::Alignment;
use crate::autodiff::sigmoid;
use crate::corpus::{write_lines, SentencePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lang {
    E,
    F,
}

impl Lang {
    pub fn tag(self) -> &'static str {
        match self {
            Lang::E => "e:",
            Lang::F => "f:",
        }
    }

    pub fn tagged(self, token: &str) -> String {
        format!("{}{token}", self.tag())
    }

    fn of_key(key: &str) -> Option<Lang> {
        if key.starts_with("e:") {
            Some(Lang::E)
        } else if key.starts_with("f:") {
            Some(Lang::F)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Inserts a vector under an already-tagged key. Returns the previous
    /// vector, if any.
    pub fn insert(&mut self, tagged: &str, vector: Vec<f64>) -> Result<Option<Vec<f64>>> {
        if Lang::of_key(tagged).is_none() {
            return Err(Error::Data(format!("token {tagged:?} lacks an e: or f: tag")));
        }
        if vector.len() != self.dim {
            return Err(Error::Data(format!(
                "vector for {tagged:?} has {} components, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite component in vector for {tagged:?}")));
        }
        Ok(self.vectors.insert(tagged.to_owned(), vector))
    }

    pub fn get(&self, lang: Lang, token: &str) -> Option<&[f64]> {
        self.vectors.get(&lang.tagged(token)).map(Vec::as_slice)
    }

    pub fn get_tagged(&self, tagged: &str) -> Option<&[f64]> {
        self.vectors.get(tagged).map(Vec::as_slice)
    }

    /// Entries of one language as `(untagged token, vector)`.
    pub fn language(&self, lang: Lang) -> impl Iterator<Item = (&str, &[f64])> {
        let tag = lang.tag();
        self.vectors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(tag).map(|t| (t, v.as_slice())))
    }

    /// Token of `lang` whose vector has the highest cosine with `query`.
    pub fn nearest(&self, lang: Lang, query: &[f64]) -> Option<(&str, f64)> {
        let mut best: Option<(&str, f64)> = None;
        for (tok, v) in self.language(lang) {
            let c = cosine(query, v);
            if best.map_or(true, |(_, b)| c > b) {
                best = Some((tok, c));
            }
        }
        best
    }

    /// Writes the plain-text format with 6-decimal components.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = format!("{} {}", self.vectors.len(), self.dim);
        let rows = self.vectors.iter().map(|(k, v)| {
            let mut line = k.clone();
            for x in v {
                line.push_str(&format!(" {x:.6}"));
            }
            line
        });
        write_lines(path, std::iter::once(header).chain(rows))
    }
}

/// Reads the plain-text vector format: `<count> <dim>` then one
/// `<tagged_token> v1 ... v_dim` row per line.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::parse(path, 1, format!("malformed header {header:?}")))?;
    let [count, dim] = nums[..] else {
        return Err(Error::parse(path, 1, format!("malformed header {header:?}")));
    };
    let mut table = EmbeddingTable::new(dim).map_err(|e| Error::parse(path, 1, e.to_string()))?;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, i + 1, "non-numeric vector component"))?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {dim} values for {token:?}, found {}", values.len()),
            ));
        }
        if table
            .insert(token, values)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?
            .is_some()
        {
            log::warn!("{}:{}: duplicate token {token:?}, keeping the later vector", path.display(), i + 1);
        }
    }
    if table.len() != count {
        log::warn!("{}: header declares {count} vectors, found {}", path.display(), table.len());
    }
    Ok(table)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector {
    pub vector: Vec<f64>,
    /// Every token was out of vocabulary (the vector is zero).
    pub all_oov: bool,
}

/// Mean of the in-vocabulary token vectors.
pub fn sentence_embedding(tokens: &[String], table: &EmbeddingTable, lang: Lang) -> SentenceVector {
    let mut sum = vec![0.0; table.dim()];
    let mut n = 0usize;
    for t in tokens {
        if let Some(v) = table.get(lang, t) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    SentenceVector {
        vector: sum,
        all_oov: n == 0,
    }
}

/// Cosine between the mean embeddings of the two sides.
pub fn cosine_score(pair: &SentencePair, table: &EmbeddingTable) -> f64 {
    let e = sentence_embedding(&pair.e_tokens, table, Lang::E);
    let f = sentence_embedding(&pair.f_tokens, table, Lang::F);
    cosine(&e.vector, &f.vector)
}

/// Skip-gram hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            epochs: 5,
            window: 5,
            negatives: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

/// Unigram^0.75 sampler over the word ids of one language.
struct NoiseTable {
    ids: Vec<u32>,
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[(u32, usize)]) -> Self {
        let mut total = 0.0;
        let mut ids = Vec::with_capacity(counts.len());
        let mut cumulative = Vec::with_capacity(counts.len());
        for &(id, c) in counts {
            total += (c as f64).powf(0.75);
            ids.push(id);
            cumulative.push(total);
        }
        Self { ids, cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let r = rng.gen::<f64>() * self.cumulative.last().copied().unwrap_or(0.0);
        let k = self.cumulative.partition_point(|&c| c <= r).min(self.ids.len() - 1);
        self.ids[k]
    }
}

struct SkipGram {
    dim: usize,
    input: Vec<f64>,
    output: Vec<f64>,
    scratch: Vec<f64>,
}

impl SkipGram {
    /// One positive update plus `negatives` noise updates for (center, context).
    fn update(&mut self, center: u32, context: u32, noise: &NoiseTable, negatives: usize, lr: f64, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        let c = center as usize * d;
        self.scratch.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..=negatives {
            let (target, label) = if k == 0 {
                (context, 1.0)
            } else {
                let t = noise.sample(rng);
                if t == context {
                    continue;
                }
                (t, 0.0)
            };
            let o = target as usize * d;
            let score: f64 = (0..d).map(|i| self.input[c + i] * self.output[o + i]).sum();
            let g = (label - sigmoid(score)) * lr;
            for i in 0..d {
                self.scratch[i] += g * self.output[o + i];
                self.output[o + i] += g * self.input[c + i];
            }
        }
        for i in 0..d {
            self.input[c + i] += self.scratch[i];
        }
    }
}

/// Bilingual skip-gram with negative sampling over four streams: e→e and
/// f→f context windows, plus e→f and f→e contexts made of the words linked
/// to each window position in the other sentence. Deterministic in
/// `config.seed`.
pub fn train_bilingual_embeddings(
    pairs: &[SentencePair],
    alignments: &[Alignment],
    config: &EmbedConfig,
) -> Result<EmbeddingTable> {
    if config.dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if config.window == 0 {
        return Err(Error::Config("skip-gram window must be positive".into()));
    }
    if !alignments.is_empty() && alignments.len() != pairs.len() {
        return Err(Error::Data(format!(
            "{} alignments for {} pairs",
            alignments.len(),
            pairs.len()
        )));
    }
    let cross_lingual = alignments.iter().any(|a| !a.links().is_empty());
    if !cross_lingual {
        log::warn!("no alignment links; training monolingual streams only");
    }

    let mut index: HashMap<String, u32> = HashMap::new();
    let mut keys: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut encode = |lang: Lang, toks: &[String]| -> Vec<u32> {
        toks.iter()
            .map(|t| {
                let key = lang.tagged(t);
                let id = *index.entry(key.clone()).or_insert_with(|| {
                    keys.push(key);
                    counts.push(0);
                    (keys.len() - 1) as u32
                });
                counts[id as usize] += 1;
                id
            })
            .collect()
    };
    let encoded: Vec<(Vec<u32>, Vec<u32>)> = pairs
        .iter()
        .map(|p| (encode(Lang::E, &p.e_tokens), encode(Lang::F, &p.f_tokens)))
        .collect();

    let noise_for = |lang: Lang| {
        let c: Vec<(u32, usize)> = keys
            .iter()
            .enumerate()
            .filter(|(_, k)| Lang::of_key(k) == Some(lang))
            .map(|(i, _)| (i as u32, counts[i]))
            .collect();
        NoiseTable::new(&c)
    };
    let (noise_e, noise_f) = (noise_for(Lang::E), noise_for(Lang::F));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut model = SkipGram {
        dim: d,
        input: (0..keys.len() * d).map(|_| (rng.gen::<f64>() - 0.5) / d as f64).collect(),
        output: vec![0.0; keys.len() * d],
        scratch: vec![0.0; d],
    };

    let w = config.window;
    let total_steps = (config.epochs * pairs.len()).max(1) as f64;
    let mut step = 0usize;
    for _ in 0..config.epochs {
        for (pi, (e, f)) in encoded.iter().enumerate() {
            let lr = config.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
            step += 1;
            // monolingual streams
            for (sent, noise) in [(e, &noise_e), (f, &noise_f)] {
                for (i, &c) in sent.iter().enumerate() {
                    let lo = i.saturating_sub(w);
                    let hi = (i + w + 1).min(sent.len());
                    for j in lo..hi {
                        if j != i {
                            model.update(c, sent[j], noise, config.negatives, lr, &mut rng);
                        }
                    }
                }
            }
            if !cross_lingual {
                continue;
            }
            let links = alignments[pi].links();
            let mut e_to_f: Vec<Vec<usize>> = vec![Vec::new(); e.len()];
            let mut f_to_e: Vec<Vec<usize>> = vec![Vec::new(); f.len()];
            for &(ei, fi) in links {
                e_to_f[ei].push(fi);
                f_to_e[fi].push(ei);
            }
            // cross-lingual streams: the source window projected through the links
            for (src, tgt, proj, noise) in [(e, f, &e_to_f, &noise_f), (f, e, &f_to_e, &noise_e)] {
                for (i, &c) in src.iter().enumerate() {
                    let lo = i.saturating_sub(w);
                    let hi = (i + w + 1).min(src.len());
                    for j in (lo..hi).filter(|&j| j != i) {
                        for &k in &proj[j] {
                            model.update(c, tgt[k], noise, config.negatives, lr, &mut rng);
                        }
                    }
                }
            }
        }
    }

    let mut table = EmbeddingTable::new(d)?;
    for (i, key) in keys.iter().enumerate() {
        table.insert(key, model.input[i * d..(i + 1) * d].to_vec())?;
    }
    Ok(table)
}
