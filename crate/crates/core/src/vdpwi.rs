//! Cross-lingual pairwise word interaction model.
//!
//! A shared BiLSTM contextualizes both sentences, a 13-channel similarity
//! cube compares every (e, f) position pair, a focus mask emphasizes a
//! greedy matching of the most similar cells, and a small CNN maps the
//! padded cube to a (divergent, equivalent) distribution.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kl_divergence, kl_loss, read_checkpoint, write_checkpoint, Grads, Graph, Optimizer, Pairwise, ParamStore, Tensor, Var};
use crate::corpus::{Label, LabeledPair, SentencePair};
use crate::embed::{EmbeddingTable, Lang};
use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::par;

/// Channels per cube: 4 representation variants × 3 similarity kinds, plus
/// a constant indicator over valid cells.
pub const CUBE_CHANNELS: usize = 13;
pub const CHANNEL_INDICATOR: usize = 12;
/// Cosine of the concatenated forward/backward states.
pub const CHANNEL_CONCAT_COSINE: usize = 6;
/// Dot product of the concatenated forward/backward states.
pub const CHANNEL_CONCAT_DOT: usize = 8;
pub const FOCUS_WEIGHT: f64 = 1.0;
pub const UNFOCUSED_WEIGHT: f64 = 0.1;

const KINDS: [Pairwise; 3] = [Pairwise::Cosine, Pairwise::NegL2, Pairwise::Dot];

/// One convolution stage: `filters` k×k kernels (stride 1, same padding),
/// relu, then non-overlapping p×p max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl fmt::Display for ConvStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}/{}", self.filters, self.kernel, self.pool)
    }
}

/// Parses `filters x kernel / pool` stages separated by commas, e.g.
/// `16x3/4,32x3/4`.
pub fn parse_cnn_spec(s: &str) -> Result<Vec<ConvStage>> {
    s.split(',')
        .map(|stage| {
            let bad = || Error::Config(format!("bad conv stage {stage:?} (expected FILTERSxKERNEL/POOL)"));
            let (fk, pool) = stage.trim().split_once('/').ok_or_else(bad)?;
            let (filters, kernel) = fk.split_once('x').ok_or_else(bad)?;
            Ok(ConvStage {
                filters: filters.parse().map_err(|_| bad())?,
                kernel: kernel.parse().map_err(|_| bad())?,
                pool: pool.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn format_cnn_spec(stages: &[ConvStage]) -> String {
    stages.iter().map(ConvStage::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdpwiConfig {
    pub embedding_dim: usize,
    /// Per direction.
    pub lstm_hidden_dim: usize,
    /// Side of the square grid the cube is zero-padded to.
    pub grid: usize,
    pub cnn_spec: Vec<ConvStage>,
    pub fc_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Longer sentences keep their first `min(max_sentence_length, grid)` tokens.
    pub max_sentence_length: usize,
    /// Apply the similarity focus mask (disable for ablations).
    pub focus: bool,
}

impl Default for VdpwiConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 200,
            lstm_hidden_dim: 250,
            grid: 32,
            cnn_spec: vec![
                ConvStage {
                    filters: 128,
                    kernel: 3,
                    pool: 2
                };
                5
            ],
            fc_dim: 128,
            epochs: 25,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 1,
            max_sentence_length: 48,
            focus: true,
        }
    }
}

impl VdpwiConfig {
    /// Small preset for desk-scale runs.
    pub fn desk(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            lstm_hidden_dim: 64,
            grid: 16,
            cnn_spec: vec![
                ConvStage {
                    filters: 16,
                    kernel: 3,
                    pool: 4,
                },
                ConvStage {
                    filters: 32,
                    kernel: 3,
                    pool: 4,
                },
            ],
            fc_dim: 128,
            epochs: 10,
            learning_rate: 2e-3,
            ..Self::default()
        }
    }

    /// Minimal preset used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 4,
            lstm_hidden_dim: 3,
            grid: 8,
            cnn_spec: vec![ConvStage {
                filters: 2,
                kernel: 3,
                pool: 8,
            }],
            fc_dim: 4,
            epochs: 3,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("lstm_hidden_dim", self.lstm_hidden_dim),
            ("grid", self.grid),
            ("fc_dim", self.fc_dim),
            ("batch_size", self.batch_size),
            ("max_sentence_length", self.max_sentence_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vdpwi {name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("vdpwi learning rate {} must be positive", self.learning_rate)));
        }
        if self.cnn_spec.is_empty() {
            return Err(Error::Config("cnn_spec needs at least one stage".into()));
        }
        let mut side = self.grid;
        for s in &self.cnn_spec {
            if s.filters == 0 || s.kernel % 2 == 0 || s.pool == 0 {
                return Err(Error::Config(format!(
                    "conv stage {s}: filters must be positive, kernel odd, pool positive"
                )));
            }
            if side % s.pool != 0 {
                return Err(Error::Config(format!("conv stage {s}: pool does not divide grid side {side}")));
            }
            side /= s.pool;
        }
        if side != 1 {
            return Err(Error::Config(format!(
                "cnn_spec {} reduces a {}x{} grid to {side}x{side}, not 1x1",
                format_cnn_spec(&self.cnn_spec),
                self.grid,
                self.grid
            )));
        }
        Ok(())
    }

    /// Tokens kept per sentence.
    pub fn effective_length(&self) -> usize {
        self.max_sentence_length.min(self.grid)
    }

    pub fn to_header(&self) -> Vec<(String, String)> {
        [
            ("embedding_dim", self.embedding_dim.to_string()),
            ("lstm_hidden_dim", self.lstm_hidden_dim.to_string()),
            ("grid", self.grid.to_string()),
            ("cnn_spec", format_cnn_spec(&self.cnn_spec)),
            ("fc_dim", self.fc_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("max_sentence_length", self.max_sentence_length.to_string()),
            ("focus", self.focus.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    pub fn from_header(header: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint header lacks {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("checkpoint header {key} = {v:?} is invalid")))
        }
        let cfg = Self {
            embedding_dim: num("embedding_dim", get("embedding_dim")?)?,
            lstm_hidden_dim: num("lstm_hidden_dim", get("lstm_hidden_dim")?)?,
            grid: num("grid", get("grid")?)?,
            cnn_spec: parse_cnn_spec(get("cnn_spec")?)?,
            fc_dim: num("fc_dim", get("fc_dim")?)?,
            epochs: num("epochs", get("epochs")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            seed: num("seed", get("seed")?)?,
            max_sentence_length: num("max_sentence_length", get("max_sentence_length")?)?,
            focus: num("focus", get("focus")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-position BiLSTM outputs, both `[len, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextStates {
    pub forward: Tensor,
    pub backward: Tensor,
}

/// `[channels, e_len, f_len]` similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityCube {
    pub tensor: Tensor,
}

impl SimilarityCube {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn e_len(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn f_len(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.tensor.data()[(channel * self.e_len() + i) * self.f_len() + j]
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = self.e_len() * self.f_len();
        &self.tensor.data()[c * n..(c + 1) * n]
    }
}

/// A re-weighted cube and its `[e_len, f_len]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusCube {
    pub tensor: Tensor,
    pub mask: Vec<f64>,
}

/// Greedy one-to-one matching over cells ranked by `values` descending
/// (row-major order breaks ties). Also returns the smallest gap between
/// consecutive ranked values, which bounds how far the inputs can move
/// before the ranking changes.
fn greedy_pass(values: &[f64], e_len: usize, f_len: usize) -> (Vec<(usize, usize)>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let gap = order
        .windows(2)
        .map(|w| values[w[0]] - values[w[1]])
        .fold(f64::INFINITY, f64::min);
    let (mut used_e, mut used_f) = (vec![false; e_len], vec![false; f_len]);
    let mut cells = Vec::new();
    for idx in order {
        let (i, j) = (idx / f_len, idx % f_len);
        if !used_e[i] && !used_f[j] {
            used_e[i] = true;
            used_f[j] = true;
            cells.push((i, j));
        }
    }
    (cells, gap)
}

/// Focal cells from the two ranking passes (concat cosine, then concat dot).
pub fn focus_passes(cube: &SimilarityCube) -> [Vec<(usize, usize)>; 2] {
    let (m, n) = (cube.e_len(), cube.f_len());
    [
        greedy_pass(cube.channel(CHANNEL_CONCAT_COSINE), m, n).0,
        greedy_pass(cube.channel(CHANNEL_CONCAT_DOT), m, n).0,
    ]
}

fn focus_mask(cube_values: &[f64], e_len: usize, f_len: usize) -> (Vec<f64>, f64) {
    let n = e_len * f_len;
    let mut mask = vec![UNFOCUSED_WEIGHT; n];
    let mut margin = f64::INFINITY;
    for c in [CHANNEL_CONCAT_COSINE, CHANNEL_CONCAT_DOT] {
        let (cells, gap) = greedy_pass(&cube_values[c * n..(c + 1) * n], e_len, f_len);
        margin = margin.min(gap);
        for (i, j) in cells {
            mask[i * f_len + j] = FOCUS_WEIGHT;
        }
    }
    (mask, margin)
}

pub fn focus(cube: &SimilarityCube) -> FocusCube {
    let (m, n) = (cube.e_len(), cube.f_len());
    let (mask, _) = focus_mask(cube.tensor.data(), m, n);
    let data = cube
        .tensor
        .data()
        .chunks(m * n)
        .flat_map(|plane| plane.iter().zip(&mask).map(|(v, w)| v * w))
        .collect();
    FocusCube {
        tensor: Tensor::new(cube.tensor.shape().to_vec(), data).expect("same shape"),
        mask,
    }
}

/// Graph handles for every parameter, bound in store order.
struct Weights {
    lstm: [[Var; 3]; 2],
    conv: Vec<(Var, Var)>,
    fc: (Var, Var),
    out: (Var, Var),
}

impl Weights {
    fn bind(vars: &[Var], stages: usize) -> Self {
        let conv = (0..stages).map(|s| (vars[6 + 2 * s], vars[7 + 2 * s])).collect();
        let k = 6 + 2 * stages;
        Self {
            lstm: [[vars[0], vars[1], vars[2]], [vars[3], vars[4], vars[5]]],
            conv,
            fc: (vars[k], vars[k + 1]),
            out: (vars[k + 2], vars[k + 3]),
        }
    }
}

/// Runs one LSTM direction over the rows of `x` `[len, dim]`.
fn lstm(g: &mut Graph, x: Var, [wx, wh, b]: [Var; 3], hidden: usize) -> Result<Var> {
    let len = g.shape(x)[0];
    let xw = g.matmul(x, wx)?;
    let mut h = g.constant(&Tensor::zeros(&[1, hidden]));
    let mut c = h;
    let mut outs = Vec::with_capacity(len);
    for t in 0..len {
        let xt = g.slice(xw, 0, t, 1)?;
        let hw = g.matmul(h, wh)?;
        let z = g.add(xt, hw)?;
        let z = g.add(z, b)?;
        let zi = g.slice(z, 1, 0, hidden)?;
        let zf = g.slice(z, 1, hidden, hidden)?;
        let zo = g.slice(z, 1, 2 * hidden, hidden)?;
        let zg = g.slice(z, 1, 3 * hidden, hidden)?;
        let (i, f, o, cand) = (g.sigmoid(zi), g.sigmoid(zf), g.sigmoid(zo), g.tanh(zg));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        outs.push(h);
    }
    g.concat(&outs, 0)
}

fn bilstm(g: &mut Graph, x: Var, w: &Weights, hidden: usize) -> Result<(Var, Var)> {
    let fwd = lstm(g, x, w.lstm[0], hidden)?;
    let rev = g.reverse(x, 0)?;
    let bwd = lstm(g, rev, w.lstm[1], hidden)?;
    let bwd = g.reverse(bwd, 0)?;
    Ok((fwd, bwd))
}

/// Stacks the 12 similarity channels and the indicator into `[13, m, n]`.
fn cube(g: &mut Graph, (fe, be): (Var, Var), (ff, bf): (Var, Var)) -> Result<Var> {
    let (m, n) = (g.shape(fe)[0], g.shape(ff)[0]);
    let ce = g.concat(&[fe, be], 1)?;
    let cf = g.concat(&[ff, bf], 1)?;
    let se = g.add(fe, be)?;
    let sf = g.add(ff, bf)?;
    let mut planes = Vec::with_capacity(CUBE_CHANNELS);
    for (a, b) in [(fe, ff), (be, bf), (ce, cf), (se, sf)] {
        for kind in KINDS {
            let p = g.pairwise(a, b, kind)?;
            planes.push(g.reshape(p, &[1, m, n])?);
        }
    }
    planes.push(g.constant_from(&[1, m, n], vec![1.0; m * n])?);
    g.concat(&planes, 0)
}

/// Focus, pad, CNN, fully connected layers, softmax → `[2]`.
fn head(g: &mut Graph, cube: Var, w: &Weights, config: &VdpwiConfig) -> Result<Var> {
    let s = g.shape(cube).to_vec();
    let (m, n) = (s[1], s[2]);
    if m > config.grid || n > config.grid {
        return Err(Error::Config(format!(
            "{m}x{n} cube does not fit the {0}x{0} grid",
            config.grid
        )));
    }
    let mut x = cube;
    if config.focus {
        let (mask, margin) = focus_mask(g.value(cube), m, n);
        g.note_kink(margin);
        let mask = g.constant_from(&[m, n], mask)?;
        x = g.mul(x, mask)?;
    }
    let x = g.pad2d(x, config.grid, config.grid)?;
    let mut x = g.reshape(x, &[1, CUBE_CHANNELS, config.grid, config.grid])?;
    for (stage, &(k, b)) in config.cnn_spec.iter().zip(&w.conv) {
        x = g.conv2d(x, k, Some(b), 1, stage.kernel / 2)?;
        x = g.relu(x);
        x = g.maxpool2d(x, stage.pool, stage.pool)?;
    }
    let last = config.cnn_spec.last().expect("validated").filters;
    let x = g.reshape(x, &[1, last])?;
    let x = g.matmul(x, w.fc.0)?;
    let x = g.add(x, w.fc.1)?;
    let x = g.relu(x);
    let x = g.matmul(x, w.out.0)?;
    let x = g.add(x, w.out.1)?;
    let x = g.softmax(x, 1)?;
    g.reshape(x, &[2])
}

/// Gold distribution over (divergent, equivalent).
pub fn gold_distribution(label: Label) -> [f64; 2] {
    match label {
        Label::Divergent => [1.0, 0.0],
        Label::Equivalent => [0.0, 1.0],
    }
}

/// Statistics for one training epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean KL over the training set (running mean during the epoch).
    pub train_loss: f64,
    pub validation_pearson: Option<f64>,
    pub validation_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct VdpwiModel {
    config: VdpwiConfig,
    params: ParamStore,
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect()).expect("valid shape")
}

impl VdpwiModel {
    /// Randomly initialized model (Xavier-uniform weights, forget-gate
    /// bias 1, other biases 0).
    pub fn new(config: VdpwiConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.embedding_dim, config.lstm_hidden_dim);
        let mut params = ParamStore::new();
        for dir in ["fwd", "bwd"] {
            params.add(format!("lstm.{dir}.wx"), xavier(&mut rng, vec![d, 4 * h], d, h));
            params.add(format!("lstm.{dir}.wh"), xavier(&mut rng, vec![h, 4 * h], h, h));
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            params.add(format!("lstm.{dir}.b"), Tensor::vector(b));
        }
        let mut channels = CUBE_CHANNELS;
        for (s, stage) in config.cnn_spec.iter().enumerate() {
            let k2 = stage.kernel * stage.kernel;
            params.add(
                format!("conv{s}.w"),
                xavier(
                    &mut rng,
                    vec![stage.filters, channels, stage.kernel, stage.kernel],
                    channels * k2,
                    stage.filters * k2,
                ),
            );
            params.add(format!("conv{s}.b"), Tensor::vector(vec![0.0; stage.filters]));
            channels = stage.filters;
        }
        params.add("fc.w", xavier(&mut rng, vec![channels, config.fc_dim], channels, config.fc_dim));
        params.add("fc.b", Tensor::vector(vec![0.0; config.fc_dim]));
        params.add("out.w", xavier(&mut rng, vec![config.fc_dim, 2], config.fc_dim, 2));
        params.add("out.b", Tensor::vector(vec![0.0; 2]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &VdpwiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn weights(&self, g: &mut Graph) -> Weights {
        let vars: Vec<Var> = self.params.iter().map(|(id, _, _)| g.param(&self.params, id)).collect();
        Weights::bind(&vars, self.config.cnn_spec.len())
    }

    /// `[len, embedding_dim]` input rows; OOV tokens get zero vectors and
    /// sentences are truncated to the effective length.
    pub fn sentence_matrix(&self, tokens: &[String], lang: Lang, embeddings: &EmbeddingTable) -> Result<Tensor> {
        let d = self.config.embedding_dim;
        if embeddings.dim() != d {
            return Err(Error::Config(format!(
                "embeddings have dimension {}, model expects {d}",
                embeddings.dim()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Data("cannot score an empty sentence".into()));
        }
        let keep = tokens.len().min(self.config.effective_length());
        let mut data = Vec::with_capacity(keep * d);
        for t in &tokens[..keep] {
            match embeddings.get(lang, t) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(std::iter::repeat(0.0).take(d)),
            }
        }
        Tensor::new(vec![keep, d], data)
    }

    fn inputs(&self, pair: &SentencePair, embeddings: &EmbeddingTable) -> Result<(Tensor, Tensor)> {
        Ok((
            self.sentence_matrix(&pair.e_tokens, Lang::E, embeddings)?,
            self.sentence_matrix(&pair.f_tokens, Lang::F, embeddings)?,
        ))
    }

    fn forward(&self, g: &mut Graph, w: &Weights, e: &Tensor, f: &Tensor) -> Result<Var> {
        let h = self.config.lstm_hidden_dim;
        let ex = g.constant(e);
        let fx = g.constant(f);
        let se = bilstm(g, ex, w, h)?;
        let sf = bilstm(g, fx, w, h)?;
        let c = cube(g, se, sf)?;
        head(g, c, w, &self.config)
    }

    /// BiLSTM states for a `[len, embedding_dim]` sequence.
    pub fn contextualize(&self, tokens: &Tensor) -> Result<ContextStates> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.config.embedding_dim {
            return Err(Error::shape(
                "contextualize",
                format!("{s:?} for embedding dim {}", self.config.embedding_dim),
            ));
        }
        let mut g = Graph::new();
        let w = self.weights(&mut g);
        let x = g.constant(tokens);
        let (fwd, bwd) = bilstm(&mut g, x, &w, self.config.lstm_hidden_dim)?;
        Ok(ContextStates {
            forward: g.to_tensor(fwd),
            backward: g.to_tensor(bwd),
        })
    }

    /// (divergent, equivalent) probabilities for a focus cube (or a plain
    /// cube when focus is disabled), zero-padded to the grid.
    pub fn cnn_score(&self, cube: &Tensor) -> Result<[f64; 2]> {
        let s = cube.shape();
        if s.len() != 3 || s[0] != CUBE_CHANNELS {
            return Err(Error::shape("cnn_score", format!("cube {s:?}")));
        }
        let mut g = Graph::new();
        let w = self.weights(&mut g);
        let x = g.constant(cube);
        let cfg = VdpwiConfig {
            focus: false,
            ..self.config.clone()
        };
        let p = head(&mut g, x, &w, &cfg)?;
        let v = g.value(p);
        Ok([v[0], v[1]])
    }

    pub fn predict(&self, pair: &SentencePair, embeddings: &EmbeddingTable) -> Result<[f64; 2]> {
        let (e, f) = self.inputs(pair, embeddings)?;
        self.predict_inputs(&e, &f)
    }

    fn predict_inputs(&self, e: &Tensor, f: &Tensor) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let w = self.weights(&mut g);
        let p = self.forward(&mut g, &w, e, f)?;
        let v = g.value(p);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite model output".into()));
        }
        Ok([v[0], v[1]])
    }

    /// Equivalent-class probability.
    pub fn score_pair(&self, pair: &SentencePair, embeddings: &EmbeddingTable) -> Result<f64> {
        Ok(self.predict(pair, embeddings)?[1])
    }

    pub fn score_pairs(&self, pairs: &[SentencePair], embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
        par::map(pairs, |p| self.score_pair(p, embeddings)).into_iter().collect()
    }

    /// KL loss and parameter gradients for one example.
    fn example_grads(&self, e: &Tensor, f: &Tensor, label: Label) -> Result<(f64, Grads)> {
        let mut g = Graph::new();
        let w = self.weights(&mut g);
        let p = self.forward(&mut g, &w, e, f)?;
        let loss = kl_loss(&mut g, p, &gold_distribution(label))?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite training loss".into()));
        }
        Ok((value, g.gradients(loss, self.params.len())?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.config.to_header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        let config = VdpwiConfig::from_header(&ckpt.header)?;
        let reference = Self::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = ckpt.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Config(format!(
                "{}: parameters do not match the configuration in its header",
                path.display()
            )));
        }
        Ok(Self {
            config,
            params: ckpt.params,
        })
    }
}

/// Gradient-checkable loss: inputs are `[e, f, params...]` in store order.
pub fn loss_with_inputs(
    config: &VdpwiConfig,
    g: &mut Graph,
    vars: &[Var],
    label: Label,
) -> Result<Var> {
    let w = Weights::bind(&vars[2..], config.cnn_spec.len());
    let h = config.lstm_hidden_dim;
    let se = bilstm(g, vars[0], &w, h)?;
    let sf = bilstm(g, vars[1], &w, h)?;
    let c = cube(g, se, sf)?;
    let p = head(g, c, &w, config)?;
    kl_loss(g, p, &gold_distribution(label))
}

/// Builds the similarity cube from two sets of BiLSTM states.
pub fn build_similarity_cube(e: &ContextStates, f: &ContextStates) -> Result<SimilarityCube> {
    let mut g = Graph::new();
    let vars: Vec<Var> = [&e.forward, &e.backward, &f.forward, &f.backward]
        .into_iter()
        .map(|t| g.constant(t))
        .collect();
    if g.shape(vars[0]) != g.shape(vars[1]) || g.shape(vars[2]) != g.shape(vars[3]) {
        return Err(Error::shape("build_similarity_cube", "forward/backward shapes differ"));
    }
    let c = cube(&mut g, (vars[0], vars[1]), (vars[2], vars[3]))?;
    Ok(SimilarityCube { tensor: g.to_tensor(c) })
}

fn mean_loss(model: &VdpwiModel, inputs: &[(Tensor, Tensor)], labels: &[Label]) -> Result<f64> {
    let losses: Vec<Result<f64>> = par::map_range(inputs.len(), |k| {
        let p = model.predict_inputs(&inputs[k].0, &inputs[k].1)?;
        Ok(kl_divergence(&p, &gold_distribution(labels[k])))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / inputs.len() as f64)
}

/// Trains with Adam on per-example KL loss, keeping the epoch snapshot with
/// the best validation Pearson correlation (later epochs win ties; an
/// undefined correlation counts as −1).
pub fn train(
    dataset: &[LabeledPair],
    validation: &[LabeledPair],
    config: &VdpwiConfig,
    embeddings: &EmbeddingTable,
) -> Result<(VdpwiModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut model = VdpwiModel::new(config.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let limit = config.effective_length();
    let truncated = dataset
        .iter()
        .filter(|x| x.pair.e_len() > limit || x.pair.f_len() > limit)
        .count();
    if truncated > 0 {
        log::info!("truncating {truncated} training pairs to {limit} tokens");
    }
    let inputs: Vec<(Tensor, Tensor)> = dataset
        .iter()
        .map(|x| model.inputs(&x.pair, embeddings))
        .collect::<Result<_>>()?;
    let labels: Vec<Label> = dataset.iter().map(|x| x.label).collect();
    let val_inputs: Vec<(Tensor, Tensor)> = validation
        .iter()
        .map(|x| model.inputs(&x.pair, embeddings))
        .collect::<Result<_>>()?;
    let val_gold: Vec<f64> = validation.iter().map(|x| x.label.indicator()).collect();

    let validate = |model: &VdpwiModel| -> Result<(Vec<f64>, Option<f64>)> {
        let scores: Vec<Result<[f64; 2]>> =
            par::map(&val_inputs, |(e, f)| model.predict_inputs(e, f));
        let scores = scores.into_iter().map(|s| s.map(|p| p[1])).collect::<Result<Vec<_>>>()?;
        let r = pearson(&scores, &val_gold);
        Ok((scores, r))
    };

    let (scores0, r0) = validate(&model)?;
    let mut report = TrainReport {
        epochs: vec![EpochStats {
            epoch: 0,
            train_loss: mean_loss(&model, &inputs, &labels)?,
            validation_pearson: r0,
            validation_scores: scores0,
        }],
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut opt = Optimizer::adam(config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Grads)>> = par::map(batch, |&k| {
                model.example_grads(&inputs[k].0, &inputs[k].1, labels[k])
            });
            let mut total = Grads::empty(model.params.len());
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                total.add(&grads);
            }
            total.scale(1.0 / batch.len() as f64);
            model.params.accumulate(&total);
            opt.step(&mut model.params)?;
        }
        let (scores, r) = validate(&model)?;
        let effective = match r {
            Some(v) => v,
            None => {
                log::warn!("epoch {epoch}: validation Pearson undefined, treated as -1");
                -1.0
            }
        };
        log::info!(
            "epoch {epoch}: train KL {:.6}, validation Pearson {effective:.4}",
            epoch_loss / dataset.len() as f64
        );
        if best.as_ref().map_or(true, |(b, _)| effective >= *b) {
            best = Some((effective, model.params.clone()));
            report.best_epoch = epoch;
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / dataset.len() as f64,
            validation_pearson: r,
            validation_scores: scores,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use rand::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn states(rng: &mut ChaCha8Rng, len: usize, h: usize) -> ContextStates {
        ContextStates {
            forward: random_tensor(rng, &[len, h]),
            backward: random_tensor(rng, &[len, h]),
        }
    }

    fn cube_from(channel_values: &[(usize, &[f64])], m: usize, n: usize) -> SimilarityCube {
        let mut data = vec![0.0; CUBE_CHANNELS * m * n];
        for (c, vals) in channel_values {
            data[c * m * n..(c + 1) * m * n].copy_from_slice(vals);
        }
        SimilarityCube {
            tensor: Tensor::new(vec![CUBE_CHANNELS, m, n], data).unwrap(),
        }
    }

    /// Textbook LSTM step with plain loops.
    fn reference_lstm(x: &[Vec<f64>], wx: &Tensor, wh: &Tensor, b: &Tensor, h: usize) -> Vec<Vec<f64>> {
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        let mut out = Vec::new();
        for xt in x {
            let mut z = b.data().to_vec();
            for (k, zk) in z.iter_mut().enumerate() {
                for (p, xv) in xt.iter().enumerate() {
                    *zk += xv * wx.data()[p * 4 * h + k];
                }
                for (p, hv) in hs.iter().enumerate() {
                    *zk += hv * wh.data()[p * 4 * h + k];
                }
            }
            for u in 0..h {
                let i = sigmoid(z[u]);
                let f = sigmoid(z[h + u]);
                let o = sigmoid(z[2 * h + u]);
                let gg = z[3 * h + u].tanh();
                cs[u] = f * cs[u] + i * gg;
                hs[u] = o * cs[u].tanh();
            }
            out.push(hs.clone());
        }
        out
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn config_validation() {
        VdpwiConfig::default().validate().unwrap();
        VdpwiConfig::desk(50).validate().unwrap();
        VdpwiConfig::tiny().validate().unwrap();
        let bad = VdpwiConfig {
            cnn_spec: vec![ConvStage {
                filters: 4,
                kernel: 3,
                pool: 2,
            }],
            ..VdpwiConfig::tiny()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("not 1x1"));
        assert_eq!(VdpwiConfig::default().effective_length(), 32);
        let spec = parse_cnn_spec("16x3/4,32x3/4").unwrap();
        assert_eq!(spec, VdpwiConfig::desk(8).cnn_spec);
        assert_eq!(format_cnn_spec(&spec), "16x3/4,32x3/4");
        let cfg = VdpwiConfig::desk(8);
        assert_eq!(VdpwiConfig::from_header(&cfg.to_header()).unwrap(), cfg);
    }

    #[test]
    fn lstm_matches_reference() {
        let model = VdpwiModel::new(VdpwiConfig::tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[4, 4]);
        let st = model.contextualize(&x).unwrap();
        let p = model.params();
        let get = |n: &str| p.get(p.id(n).unwrap()).clone();
        let fwd = reference_lstm(&rows(&x), &get("lstm.fwd.wx"), &get("lstm.fwd.wh"), &get("lstm.fwd.b"), 3);
        let mut xr = rows(&x);
        xr.reverse();
        let mut bwd = reference_lstm(&xr, &get("lstm.bwd.wx"), &get("lstm.bwd.wh"), &get("lstm.bwd.b"), 3);
        bwd.reverse();
        for (a, b) in rows(&st.forward).iter().flatten().zip(fwd.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in rows(&st.backward).iter().flatten().zip(bwd.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut model = VdpwiModel::new(VdpwiConfig::tiny(), 1).unwrap();
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = model.contextualize(&random_tensor(&mut rng, &[3, 4])).unwrap();
        assert!(st.forward.data().iter().chain(st.backward.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_and_reversal_symmetry() {
        let mut model = VdpwiModel::new(VdpwiConfig::tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = random_tensor(&mut rng, &[1, 4]);
        let st = model.contextualize(&x1).unwrap();
        assert_eq!(st.forward.shape(), &[1, 3]);

        // With tied directions, reversing the input swaps the two state
        // sequences (each reversed).
        let p = model.params_mut();
        for part in ["wx", "wh", "b"] {
            let src = p.get(p.id(&format!("lstm.fwd.{part}")).unwrap()).clone();
            let dst = p.id(&format!("lstm.bwd.{part}")).unwrap();
            p.get_mut(dst).data_mut().copy_from_slice(src.data());
        }
        let x = random_tensor(&mut rng, &[5, 4]);
        let mut xr_rows = rows(&x);
        xr_rows.reverse();
        let xr = Tensor::new(vec![5, 4], xr_rows.concat()).unwrap();
        let a = model.contextualize(&x).unwrap();
        let b = model.contextualize(&xr).unwrap();
        let mut bf = rows(&b.forward);
        bf.reverse();
        let mut bb = rows(&b.backward);
        bb.reverse();
        for (u, v) in rows(&a.backward).iter().flatten().zip(bf.iter().flatten()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
        for (u, v) in rows(&a.forward).iter().flatten().zip(bb.iter().flatten()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn cube_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = states(&mut rng, 3, 5);
        let f = states(&mut rng, 4, 5);
        let c = build_similarity_cube(&e, &f).unwrap();
        assert_eq!(c.tensor.shape(), &[13, 3, 4]);

        // identical states at (0, 0)
        let mut f2 = f.clone();
        f2.forward.data_mut()[..5].copy_from_slice(&e.forward.data()[..5]);
        f2.backward.data_mut()[..5].copy_from_slice(&e.backward.data()[..5]);
        let c = build_similarity_cube(&e, &f2).unwrap();
        for variant in 0..4 {
            assert_abs_diff_eq!(c.get(variant * 3, 0, 0), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(c.get(variant * 3 + 1, 0, 0), 0.0, epsilon = 1e-12);
        }
        assert!((0..12).all(|i| c.get(CHANNEL_INDICATOR, i / 4, i % 4) == 1.0));

        // scaling f doubles dot channels and leaves cosine channels alone
        let scaled = ContextStates {
            forward: Tensor::new(f.forward.shape().to_vec(), f.forward.data().iter().map(|v| 2.0 * v).collect()).unwrap(),
            backward: Tensor::new(f.backward.shape().to_vec(), f.backward.data().iter().map(|v| 2.0 * v).collect()).unwrap(),
        };
        let a = build_similarity_cube(&e, &f).unwrap();
        let b = build_similarity_cube(&e, &scaled).unwrap();
        for variant in 0..4 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_abs_diff_eq!(a.get(variant * 3, i, j), b.get(variant * 3, i, j), epsilon = 1e-12);
                    assert_abs_diff_eq!(2.0 * a.get(variant * 3 + 2, i, j), b.get(variant * 3 + 2, i, j), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn focus_examples() {
        let one = cube_from(&[(CHANNEL_CONCAT_COSINE, &[0.3]), (CHANNEL_CONCAT_DOT, &[0.3])], 1, 1);
        assert_eq!(focus(&one).mask, vec![1.0]);

        let c = cube_from(
            &[
                (CHANNEL_CONCAT_COSINE, &[0.9, 0.1, 0.2, 0.8]),
                (CHANNEL_CONCAT_DOT, &[0.9, 0.1, 0.2, 0.8]),
            ],
            2,
            2,
        );
        assert_eq!(focus(&c).mask, vec![1.0, 0.1, 0.1, 1.0]);

        let flat = cube_from(&[(CHANNEL_CONCAT_COSINE, &[0.5; 6]), (CHANNEL_CONCAT_DOT, &[0.5; 6])], 2, 3);
        let fc = focus(&flat);
        assert_eq!(fc.mask.iter().filter(|&&w| w == 1.0).count(), 2);
        assert_eq!(fc.mask, vec![1.0, 0.1, 0.1, 0.1, 1.0, 0.1]);
    }

    #[test]
    fn focus_weights_every_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = SimilarityCube {
            tensor: random_tensor(&mut rng, &[13, 3, 2]),
        };
        let fc = focus(&c);
        for ch in 0..13 {
            for i in 0..3 {
                for j in 0..2 {
                    let w = fc.mask[i * 2 + j];
                    assert_eq!(fc.tensor.data()[(ch * 3 + i) * 2 + j], c.get(ch, i, j) * w);
                }
            }
        }
    }

    #[test]
    fn cnn_output_properties() {
        let mut model = VdpwiModel::new(VdpwiConfig::desk(4), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cube = random_tensor(&mut rng, &[13, 3, 5]);
        let p = model.cnn_score(&cube).unwrap();
        assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-12);

        // Permuting channels changes the output.
        let plane = 15;
        let mut permuted = cube.data().to_vec();
        permuted.rotate_left(plane);
        let q = model.cnn_score(&Tensor::new(vec![13, 3, 5], permuted).unwrap()).unwrap();
        assert!((p[1] - q[1]).abs() > 1e-9);

        assert!(model.cnn_score(&random_tensor(&mut rng, &[13, 17, 2])).is_err());

        let p = model.params_mut();
        for n in ["out.w", "out.b"] {
            let id = p.id(n).unwrap();
            p.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(model.cnn_score(&cube).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = VdpwiModel::new(VdpwiConfig::tiny(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = VdpwiModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = VdpwiConfig::tiny();
        let model = VdpwiModel::new(cfg.clone(), 0).unwrap();
        let mut shapes = vec![vec![3, 4], vec![4, 4]];
        shapes.extend(model.params().iter().map(|(_, _, t)| t.shape().to_vec()));
        for (seed, label) in [(1, Label::Equivalent), (2, Label::Divergent)] {
            let check = grad_check(|g, v| loss_with_inputs(&cfg, g, v, label), &shapes, 1e-6, seed).unwrap();
            assert!(check.max_relative_error < 1e-3, "{check:?}");
        }
    }

    proptest! {
        #[test]
        fn cube_transposes_under_swap(m in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = states(&mut rng, m, 3);
            let f = states(&mut rng, n, 3);
            let ef = build_similarity_cube(&e, &f).unwrap();
            let fe = build_similarity_cube(&f, &e).unwrap();
            for c in 0..CUBE_CHANNELS {
                for i in 0..m {
                    for j in 0..n {
                        prop_assert!((ef.get(c, i, j) - fe.get(c, j, i)).abs() < 1e-12);
                    }
                }
            }
            for c in (0..12).step_by(3) {
                for i in 0..m {
                    for j in 0..n {
                        prop_assert!(ef.get(c, i, j).abs() <= 1.0 + 1e-12);
                        prop_assert!(ef.get(c + 1, i, j) <= 0.0);
                    }
                }
            }
        }

        #[test]
        fn focus_mask_invariants(m in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = SimilarityCube { tensor: random_tensor(&mut rng, &[13, m, n]) };
            let fc = focus(&c);
            prop_assert!(fc.mask.iter().all(|&w| w == FOCUS_WEIGHT || w == UNFOCUSED_WEIGHT));
            for pass in focus_passes(&c) {
                prop_assert_eq!(pass.len(), m.min(n));
                let mut es: Vec<usize> = pass.iter().map(|c| c.0).collect();
                let mut fs: Vec<usize> = pass.iter().map(|c| c.1).collect();
                es.sort_unstable();
                es.dedup();
                fs.sort_unstable();
                fs.dedup();
                prop_assert_eq!(es.len(), pass.len());
                prop_assert_eq!(fs.len(), pass.len());
                for (i, j) in pass {
                    prop_assert_eq!(fc.mask[i * n + j], FOCUS_WEIGHT);
                }
            }
            let focal = fc.mask.iter().filter(|&&w| w == FOCUS_WEIGHT).count();
            prop_assert!(focal >= m.min(n) && focal <= 2 * m.min(n));
        }
    }
}
