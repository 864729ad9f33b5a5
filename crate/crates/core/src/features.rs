//! Alignment and dictionary features for the parallel/non-parallel
//! baseline, and the logistic-regression classifier trained on them.

use std::collections::HashMap;
use std::path::Path;

use crate::align::{Alignment, BidirectionalModels, Direction, Heuristic};
use crate::corpus::{write_lines, Label, SentencePair};
use crate::datagen::coverage;
use crate::dictionary::BilingualDictionary;
use crate::error::{Error, Result};
use crate::par;

/// Alignment features per side and heuristic.
pub const SIDE_FEATURES: usize = 7;
const SIDE_NAMES: [&str; SIDE_FEATURES] = [
    "unaligned_count",
    "unaligned_ratio",
    "fertility1",
    "fertility2",
    "fertility3",
    "longest_unaligned_run",
    "longest_aligned_run",
];

/// Feature names in extraction order for the given heuristics.
pub fn feature_names(heuristics: &[Heuristic]) -> Vec<String> {
    let mut names: Vec<String> = ["len_f", "len_e", "ratio_f_e", "ratio_e_f"].map(String::from).to_vec();
    for h in heuristics {
        for side in ["e", "f"] {
            names.extend(SIDE_NAMES.iter().map(|n| format!("{}.{side}.{n}", h.as_str())));
        }
    }
    names.push("coverage_e_f".into());
    names.push("coverage_f_e".into());
    names
}

fn runs(flags: &[bool], value: bool) -> usize {
    let (mut best, mut cur) = (0, 0);
    for &f in flags {
        cur = if f == value { cur + 1 } else { 0 };
        best = best.max(cur);
    }
    best
}

/// The seven per-side features given each position's link count.
fn side_features(fertility: &[usize]) -> [f64; SIDE_FEATURES] {
    let aligned: Vec<bool> = fertility.iter().map(|&c| c > 0).collect();
    let unaligned = aligned.iter().filter(|a| !**a).count();
    let mut top = fertility.to_vec();
    top.sort_unstable_by(|a, b| b.cmp(a));
    top.resize(top.len().max(3), 0);
    [
        unaligned as f64,
        if fertility.is_empty() {
            0.0
        } else {
            unaligned as f64 / fertility.len() as f64
        },
        top[0] as f64,
        top[1] as f64,
        top[2] as f64,
        runs(&aligned, false) as f64,
        runs(&aligned, true) as f64,
    ]
}

/// Feature vector for one pair: 4 length features, 14 alignment features per
/// heuristic (e side then f side), and the two coverage fractions.
pub fn extract_features(
    pair: &SentencePair,
    alignments: &HashMap<Heuristic, Alignment>,
    dictionary: &BilingualDictionary,
    heuristics: &[Heuristic],
) -> Result<Vec<f64>> {
    let (le, lf) = (pair.e_len(), pair.f_len());
    if le == 0 || lf == 0 {
        return Err(Error::Data(format!("pair {} has an empty side", pair.id)));
    }
    let mut out = vec![lf as f64, le as f64, lf as f64 / le as f64, le as f64 / lf as f64];
    for h in heuristics {
        let a = alignments
            .get(h)
            .ok_or_else(|| Error::Data(format!("missing alignment for heuristic {}", h.as_str())))?;
        if a.e_len() != le || a.f_len() != lf {
            return Err(Error::Data(format!(
                "pair {}: alignment is {}x{}, sentences are {le}x{lf}",
                pair.id,
                a.e_len(),
                a.f_len()
            )));
        }
        let (mut fe, mut ff) = (vec![0; le], vec![0; lf]);
        for &(i, j) in a.links() {
            fe[i] += 1;
            ff[j] += 1;
        }
        out.extend(side_features(&fe));
        out.extend(side_features(&ff));
    }
    out.push(coverage(&pair.e_tokens, &pair.f_tokens, dictionary, Direction::EToF));
    out.push(coverage(&pair.e_tokens, &pair.f_tokens, dictionary, Direction::FToE));
    Ok(out)
}

/// Aligns and featurizes every pair, in parallel.
pub fn extract_all(
    pairs: &[SentencePair],
    models: &BidirectionalModels,
    dictionary: &BilingualDictionary,
    heuristics: &[Heuristic],
) -> Result<Vec<Vec<f64>>> {
    par::map(pairs, |p| {
        extract_features(p, &models.align_all_heuristics(p), dictionary, heuristics)
    })
    .into_iter()
    .collect()
}

/// TSV with a header row: `id` followed by the feature names.
pub fn write_features_tsv(path: &Path, names: &[String], ids: &[usize], rows: &[Vec<f64>]) -> Result<()> {
    let header = std::iter::once(format!("id\t{}", names.join("\t")));
    let body = ids.iter().zip(rows).map(|(id, r)| {
        let vals: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
        format!("{id}\t{}", vals.join("\t"))
    });
    write_lines(path, header.chain(body))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConfig {
    pub l2_strength: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1e-4,
            epochs: 500,
            learning_rate: 0.1,
        }
    }
}

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub train_accuracy: f64,
    /// Regularized training loss after each epoch.
    pub loss_history: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    crate::autodiff::sigmoid(z)
}

fn standardize(rows: &[Vec<f64>], mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().zip(mean.iter().zip(std)).map(|(x, (m, s))| (x - m) / s).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean log loss plus `l2/2·|w|²`.
fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, l2: f64) -> f64 {
    let data: f64 = z
        .iter()
        .zip(y)
        .map(|(x, &t)| {
            let s = dot(w, x) + b;
            // log(1 + e^s) − t·s, computed stably
            s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s
        })
        .sum::<f64>()
        / z.len() as f64;
    data + 0.5 * l2 * dot(w, w)
}

/// Full-batch gradient descent from zero weights. A step that would
/// increase the loss is undone and the learning rate halved, so the
/// recorded loss never increases.
pub fn train_linear(names: &[String], rows: &[Vec<f64>], labels: &[Label], config: &LinearConfig) -> Result<LinearModel> {
    if rows.len() != labels.len() {
        return Err(Error::Data(format!("{} feature rows for {} labels", rows.len(), labels.len())));
    }
    let eq = labels.iter().filter(|&&l| l == Label::Equivalent).count();
    if eq == 0 || eq == labels.len() {
        return Err(Error::Data("linear classifier needs both classes in the training data".into()));
    }
    let dim = names.len();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Data(format!("feature row of length {} for {dim} names", r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|k| {
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = standardize(rows, &mean, &std);
    let y: Vec<f64> = labels.iter().map(|l| l.indicator()).collect();

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let mut lr = config.learning_rate;
    let mut loss = objective(&z, &y, &w, b, config.l2_strength);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut gw: Vec<f64> = w.iter().map(|wk| config.l2_strength * wk).collect();
        let mut gb = 0.0;
        for (x, &t) in z.iter().zip(&y) {
            let err = (sigmoid(dot(&w, x) + b) - t) / n;
            gb += err;
            gw.iter_mut().zip(x).for_each(|(g, xk)| *g += err * xk);
        }
        loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(wk, g)| wk - lr * g).collect();
            let b2 = b - lr * gb;
            let l2 = objective(&z, &y, &w2, b2, config.l2_strength);
            if l2 <= loss || lr < 1e-12 {
                if l2 <= loss {
                    (w, b, loss) = (w2, b2, l2);
                }
                break;
            }
            lr /= 2.0;
            log::debug!("training loss increased; learning rate halved to {lr}");
        }
        history.push(loss);
    }
    let mut model = LinearModel {
        names: names.to_vec(),
        weights: w,
        bias: b,
        mean,
        std,
        train_accuracy: 0.0,
        loss_history: history,
    };
    model.train_accuracy = accuracy(&model, rows, labels)?;
    Ok(model)
}

pub fn accuracy(model: &LinearModel, rows: &[Vec<f64>], labels: &[Label]) -> Result<f64> {
    let mut correct = 0;
    for (r, &l) in rows.iter().zip(labels) {
        let predicted = if score_linear(model, r)? >= 0.5 {
            Label::Equivalent
        } else {
            Label::Divergent
        };
        correct += usize::from(predicted == l);
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Equivalent-class probability.
pub fn score_linear(model: &LinearModel, features: &[f64]) -> Result<f64> {
    if features.len() != model.weights.len() {
        return Err(Error::Data(format!(
            "{} features for a model over {}",
            features.len(),
            model.weights.len()
        )));
    }
    let s: f64 = features
        .iter()
        .zip(&model.weights)
        .zip(model.mean.iter().zip(&model.std))
        .map(|((x, w), (m, sd))| w * (x - m) / sd)
        .sum();
    Ok(sigmoid(s + model.bias))
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join("\t")
}

impl LinearModel {
    /// Tab-separated rows: names, weights, mean, std, then bias and
    /// training accuracy.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_lines(
            path,
            [
                format!("names\t{}", self.names.join("\t")),
                format!("weights\t{}", join(&self.weights)),
                format!("mean\t{}", join(&self.mean)),
                format!("std\t{}", join(&self.std)),
                format!("bias\t{}", self.bias),
                format!("train_accuracy\t{}", self.train_accuracy),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut fields: HashMap<&str, (usize, Vec<&str>)> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let key = parts.next().unwrap_or_default();
            fields.insert(key, (i + 1, parts.collect()));
        }
        let get = |key: &str| {
            fields
                .get(key)
                .ok_or_else(|| Error::parse(path, 0, format!("missing {key} row")))
        };
        let nums = |key: &str| -> Result<Vec<f64>> {
            let (line, vals) = get(key)?;
            vals.iter()
                .map(|v| v.parse().map_err(|_| Error::parse(path, *line, format!("bad number {v:?}"))))
                .collect()
        };
        let model = Self {
            names: get("names")?.1.iter().map(|s| s.to_string()).collect(),
            weights: nums("weights")?,
            mean: nums("mean")?,
            std: nums("std")?,
            bias: nums("bias")?.first().copied().unwrap_or_default(),
            train_accuracy: nums("train_accuracy")?.first().copied().unwrap_or_default(),
            loss_history: Vec::new(),
        };
        let d = model.names.len();
        if model.weights.len() != d || model.mean.len() != d || model.std.len() != d {
            return Err(Error::parse(path, 0, "weights, mean and std must match the feature names"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use Heuristic::*;

    fn pair(le: usize, lf: usize) -> SentencePair {
        SentencePair::new(
            0,
            (0..le).map(|i| format!("e{i}")).collect(),
            (0..lf).map(|i| format!("f{i}")).collect(),
        )
    }

    fn all_same(a: &Alignment) -> HashMap<Heuristic, Alignment> {
        Heuristic::ALL.iter().map(|&h| (h, a.clone())).collect()
    }

    #[test]
    fn layout_has_48_features() {
        let names = feature_names(&Heuristic::ALL);
        assert_eq!(names.len(), 48);
        let a = Alignment::new(2, 2, [(0, 0)]).unwrap();
        let v = extract_features(&pair(2, 2), &all_same(&a), &BilingualDictionary::new(), &Heuristic::ALL).unwrap();
        assert_eq!(v.len(), 48);
    }

    #[test]
    fn side_feature_examples() {
        let p = pair(2, 2);
        let a = Alignment::new(2, 2, [(0, 0), (0, 1), (1, 1)]).unwrap();
        let v = extract_features(&p, &all_same(&a), &BilingualDictionary::new(), &[Union]).unwrap();
        // e side block starts after the 4 length features
        assert_eq!(&v[4..11], &[0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 2.0]);

        let p = pair(3, 2);
        let v = extract_features(&p, &all_same(&Alignment::empty(3, 2)), &BilingualDictionary::new(), &[Union]).unwrap();
        assert_eq!(&v[4..11], &[3.0, 1.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        assert_eq!(&v[..4], &[2.0, 3.0, 2.0 / 3.0, 1.5]);

        let p = pair(4, 4);
        let a = Alignment::new(4, 4, [(0, 0), (3, 3)]).unwrap();
        let v = extract_features(&p, &all_same(&a), &BilingualDictionary::new(), &[Union]).unwrap();
        assert_eq!((v[9], v[10]), (2.0, 1.0));
    }

    #[test]
    fn missing_heuristic_is_named() {
        let mut m = all_same(&Alignment::empty(2, 2));
        m.remove(&Intersection);
        let err = extract_features(&pair(2, 2), &m, &BilingualDictionary::new(), &Heuristic::ALL).unwrap_err();
        assert!(err.to_string().contains("intersection"));
    }

    #[test]
    fn coverage_features() {
        let mut d = BilingualDictionary::new();
        d.insert(Direction::EToF, "e0", "f0", 1.0);
        d.insert(Direction::FToE, "f0", "e0", 1.0);
        let v = extract_features(&pair(2, 4), &all_same(&Alignment::empty(2, 4)), &d, &[]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v[4..], &[0.5, 0.25]);
    }

    fn toy() -> (Vec<String>, Vec<Vec<f64>>, Vec<Label>) {
        let names = vec!["a".to_owned(), "b".to_owned()];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let x = i as f64 / 10.0;
            rows.push(vec![x, 1.0 - x * 0.3]);
            labels.push(if x > 1.0 { Label::Equivalent } else { Label::Divergent });
        }
        (names, rows, labels)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (names, rows, labels) = toy();
        let cfg = LinearConfig {
            epochs: 200,
            ..Default::default()
        };
        let m = train_linear(&names, &rows, &labels, &cfg).unwrap();
        assert_eq!(m.train_accuracy, 1.0);
        assert!(m.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(accuracy(&m, &rows, &labels).unwrap(), m.train_accuracy);
        assert_eq!(m, train_linear(&names, &rows, &labels, &cfg).unwrap());
    }

    #[test]
    fn regularization_shrinks_weights() {
        let (names, rows, labels) = toy();
        let norms: Vec<f64> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&l2| {
                let cfg = LinearConfig {
                    l2_strength: l2,
                    ..Default::default()
                };
                let m = train_linear(&names, &rows, &labels, &cfg).unwrap();
                dot(&m.weights, &m.weights).sqrt()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn single_class_rejected() {
        let (names, rows, _) = toy();
        assert!(train_linear(&names, &rows, &vec![Label::Equivalent; 20], &LinearConfig::default()).is_err());
    }

    #[test]
    fn scoring_examples() {
        let mut m = LinearModel {
            names: vec!["a".into()],
            weights: vec![0.0],
            bias: 0.0,
            mean: vec![0.0],
            std: vec![1.0],
            train_accuracy: 0.0,
            loss_history: Vec::new(),
        };
        assert_eq!(score_linear(&m, &[3.0]).unwrap(), 0.5);
        m.weights = vec![2.0];
        assert!(score_linear(&m, &[5.0]).unwrap() > 0.5);
        let mut last = 0.0;
        for b in [-2.0, -1.0, 0.0, 1.0] {
            m.bias = b;
            let s = score_linear(&m, &[0.3]).unwrap();
            assert!(s >= last);
            last = s;
        }
        assert!(score_linear(&m, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let (names, rows, labels) = toy();
        let m = train_linear(&names, &rows, &labels, &LinearConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lin.tsv");
        m.save(&p).unwrap();
        let back = LinearModel::load(&p).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.bias, m.bias);
        assert_eq!(back.std, m.std);
        for r in &rows {
            assert_abs_diff_eq!(score_linear(&back, r).unwrap(), score_linear(&m, r).unwrap());
        }
    }

    fn arb_alignment() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize)>)> {
        (1usize..7, 1usize..7).prop_flat_map(|(m, n)| {
            (Just(m), Just(n), prop::collection::vec((0..m, 0..n), 0..12))
        })
    }

    proptest! {
        #[test]
        fn link_order_is_irrelevant((m, n, links) in arb_alignment()) {
            let p = pair(m, n);
            let d = BilingualDictionary::new();
            let a = Alignment::new(m, n, links.clone()).unwrap();
            let mut rev = links;
            rev.reverse();
            let b = Alignment::new(m, n, rev).unwrap();
            prop_assert_eq!(
                extract_features(&p, &all_same(&a), &d, &Heuristic::ALL).unwrap(),
                extract_features(&p, &all_same(&b), &d, &Heuristic::ALL).unwrap()
            );
        }

        #[test]
        fn subset_alignment_has_smaller_fertilities(
            (m, n, links) in arb_alignment(),
            keep in prop::collection::vec(any::<bool>(), 12),
        ) {
            let p = pair(m, n);
            let d = BilingualDictionary::new();
            let sub: Vec<_> = links.iter().zip(&keep).filter(|(_, k)| **k).map(|(l, _)| *l).collect();
            let big = extract_features(&p, &all_same(&Alignment::new(m, n, links.clone()).unwrap()), &d, &[Union]).unwrap();
            let small = extract_features(&p, &all_same(&Alignment::new(m, n, sub).unwrap()), &d, &[Union]).unwrap();
            for side in 0..2 {
                let base = 4 + side * SIDE_FEATURES;
                for k in 2..5 {
                    prop_assert!(small[base + k] <= big[base + k]);
                }
                prop_assert!(small[base + 2] >= small[base + 3] && small[base + 3] >= small[base + 4]);
                prop_assert!((0.0..=1.0).contains(&small[base + 1]));
            }
        }
    }
}
