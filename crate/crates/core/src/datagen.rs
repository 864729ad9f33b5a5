//! Noisy synthetic supervision: parallel pairs are positives, filtered
//! Cartesian-product pairs are negatives.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::Direction;
use crate::corpus::{Label, LabeledPair, SentencePair};
use crate::dictionary::BilingualDictionary;
use crate::error::{Error, Result};
use crate::par;

/// Filters applied to Cartesian-product candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeFilter {
    /// Upper bound on max(|e|,|f|) / min(|e|,|f|).
    pub max_length_ratio: f64,
    pub min_coverage: f64,
    /// Require coverage in both directions (otherwise e→f only).
    pub bidirectional: bool,
    /// Pair each positive only with this many nearest ids; `None` is the full product.
    pub window: Option<usize>,
}

impl Default for NegativeFilter {
    fn default() -> Self {
        Self {
            max_length_ratio: 2.0,
            min_coverage: 0.5,
            bidirectional: true,
            window: Some(1000),
        }
    }
}

impl NegativeFilter {
    pub fn length_ok(&self, e_len: usize, f_len: usize) -> bool {
        let (lo, hi) = (e_len.min(f_len), e_len.max(f_len));
        lo > 0 && hi as f64 / lo as f64 <= self.max_length_ratio
    }

    pub fn accepts(&self, e: &[String], f: &[String], dict: &BilingualDictionary) -> bool {
        self.length_ok(e.len(), f.len())
            && coverage(e, f, dict, Direction::EToF) >= self.min_coverage
            && (!self.bidirectional || coverage(e, f, dict, Direction::FToE) >= self.min_coverage)
    }
}

/// Fraction of tokens on the `direction` source side that have a dictionary
/// translation occurring in the other side. Duplicate tokens count
/// separately; an empty source side gives 0.
pub fn coverage(e_tokens: &[String], f_tokens: &[String], dict: &BilingualDictionary, direction: Direction) -> f64 {
    let (src, other) = match direction {
        Direction::EToF => (e_tokens, f_tokens),
        Direction::FToE => (f_tokens, e_tokens),
    };
    if src.is_empty() {
        return 0.0;
    }
    let other: HashSet<&str> = other.iter().map(String::as_str).collect();
    let covered = src.iter().filter(|w| dict.translated_in(direction, w, &other)).count();
    covered as f64 / src.len() as f64
}

fn candidate_range(i: usize, n: usize, window: Option<usize>) -> std::ops::Range<usize> {
    match window {
        Some(w) if w + 1 < n => {
            let lo = i.saturating_sub(w / 2);
            let hi = (lo + w + 1).min(n);
            hi - (w + 1)..hi
        }
        _ => 0..n,
    }
}

/// Filtered Cartesian-product negatives (e_i, f_j), i ≠ j, in lexicographic
/// (i, j) order. Output ids are positions in the returned list.
pub fn generate_negatives(
    positives: &[SentencePair],
    dict: &BilingualDictionary,
    filter: &NegativeFilter,
) -> Result<Vec<SentencePair>> {
    if positives.is_empty() {
        return Err(Error::Data("negative generation needs at least one positive".into()));
    }
    if dict.is_empty() {
        return Err(Error::Data("negative generation needs a non-empty dictionary".into()));
    }
    let n = positives.len();
    let seen: HashSet<(&[String], &[String])> = positives
        .iter()
        .map(|p| (p.e_tokens.as_slice(), p.f_tokens.as_slice()))
        .collect();
    let rows = par::map_range(n, |i| {
        let e = &positives[i].e_tokens;
        candidate_range(i, n, filter.window)
            .filter(|&j| j != i)
            .filter(|&j| {
                let f = &positives[j].f_tokens;
                filter.accepts(e, f, dict) && !seen.contains(&(e.as_slice(), f.as_slice()))
            })
            .collect::<Vec<_>>()
    });
    let mut out = Vec::new();
    for (i, js) in rows.into_iter().enumerate() {
        for j in js {
            out.push(SentencePair::new(
                out.len(),
                positives[i].e_tokens.clone(),
                positives[j].f_tokens.clone(),
            ));
        }
    }
    Ok(out)
}

/// Labeled training data at a fixed class ratio.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub examples: Vec<LabeledPair>,
    pub positive_count: usize,
    pub negative_count: usize,
    pub generation_seed: u64,
}

impl SyntheticDataset {
    /// negatives / positives.
    pub fn achieved_ratio(&self) -> f64 {
        self.negative_count as f64 / self.positive_count.max(1) as f64
    }
}

/// Seeded uniform sample of `count` pairs (all of them if fewer), in id order.
pub fn sample_positives(pairs: &[SentencePair], count: usize, seed: u64) -> Vec<SentencePair> {
    if count >= pairs.len() {
        return pairs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, pairs.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Disjoint positive samples for training, development and test.
#[derive(Debug, Clone)]
pub struct PositiveSplits {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Draws `test` then `dev` then up to `train` pairs from a seeded
/// permutation of the corpus; each split is returned in id order. The
/// training sample shrinks (with a warning) when the corpus is too small.
pub fn partition_positives(
    pairs: &[SentencePair],
    train: usize,
    dev: usize,
    test: usize,
    seed: u64,
) -> Result<PositiveSplits> {
    if pairs.len() <= dev + test {
        return Err(Error::Data(format!(
            "corpus of {} pairs cannot hold {dev} dev and {test} test positives plus training data",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let available = pairs.len() - dev - test;
    if available < train {
        log::warn!("only {available} pairs left for training positives ({train} requested)");
    }
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pairs[i].clone()).collect::<Vec<_>>()
    };
    Ok(PositiveSplits {
        test: take(&order[..test]),
        dev: take(&order[test..test + dev]),
        train: take(&order[test + dev..test + dev + train.min(available)]),
    })
}

/// Labels positives Equivalent and a seeded sample of `ratio × |positives|`
/// negatives Divergent, then shuffles. Example ids are renumbered to their
/// position in the shuffled output.
pub fn assemble_dataset(
    positives: &[SentencePair],
    negative_pool: &[SentencePair],
    ratio: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if ratio < 1 {
        return Err(Error::Config("positive:negative ratio must be at least 1".into()));
    }
    if positives.is_empty() {
        return Err(Error::Data("cannot assemble a dataset without positives".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = ratio * positives.len();
    let negatives: Vec<&SentencePair> = if negative_pool.len() <= wanted {
        negative_pool.iter().collect()
    } else {
        let mut idx = index::sample(&mut rng, negative_pool.len(), wanted).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &negative_pool[i]).collect()
    };
    if negatives.len() < wanted {
        let achieved = negatives.len() as f64 / positives.len() as f64;
        log::warn!("negative pool exhausted: achieved ratio 1:{}", fmt_ratio(achieved));
    }
    let mut examples: Vec<LabeledPair> = positives
        .iter()
        .map(|p| LabeledPair::new(p.clone(), Label::Equivalent))
        .chain(negatives.iter().map(|p| LabeledPair::new((*p).clone(), Label::Divergent)))
        .collect();
    examples.shuffle(&mut rng);
    for (i, ex) in examples.iter_mut().enumerate() {
        ex.pair.id = i;
    }
    Ok(SyntheticDataset {
        examples,
        positive_count: positives.len(),
        negative_count: negatives.len(),
        generation_seed: seed,
    })
}

fn fmt_ratio(r: f64) -> String {
    if (r - r.round()).abs() < 1e-9 {
        format!("{}", r.round() as i64)
    } else {
        format!("{r:.2}")
    }
}

/// Negative generation plus assembly in one call.
pub fn build_dataset(
    positives: &[SentencePair],
    dict: &BilingualDictionary,
    filter: &NegativeFilter,
    ratio: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    let pool = generate_negatives(positives, dict, filter)?;
    log::info!("{} negative candidates survive filtering", pool.len());
    assemble_dataset(positives, &pool, ratio, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        crate::corpus::tokenize(s)
    }

    fn dict(entries: &[(&str, &str)]) -> BilingualDictionary {
        let mut d = BilingualDictionary::new();
        for &(e, f) in entries {
            d.insert(Direction::EToF, e, f, 1.0);
            d.insert(Direction::FToE, f, e, 1.0);
        }
        d
    }

    #[test]
    fn coverage_examples() {
        let d = dict(&[("a", "x"), ("b", "y")]);
        assert_eq!(coverage(&toks("a b"), &toks("x y"), &d, Direction::EToF), 1.0);
        assert_eq!(coverage(&toks("a b"), &toks("x z"), &d, Direction::EToF), 0.5);
        assert!((coverage(&toks("a a b"), &toks("x"), &d, Direction::EToF) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&[], &toks("x"), &d, Direction::EToF), 0.0);
        assert_eq!(coverage(&toks("a b"), &toks("x"), &d, Direction::FToE), 1.0);
    }

    #[test]
    fn length_ratio_rule() {
        let f = NegativeFilter::default();
        assert!(!f.length_ok(10, 25));
        assert!(f.length_ok(10, 20));
        assert!(f.length_ok(20, 10));
    }

    #[test]
    fn low_coverage_rejected() {
        let d = dict(&[("a", "x"), ("b", "y")]);
        let e = toks("a b c d g h");
        let f = toks("x y p q r s");
        assert!((coverage(&e, &f, &d, Direction::EToF) - 1.0 / 3.0).abs() < 1e-15);
        assert!(!NegativeFilter::default().accepts(&e, &f, &d));
    }

    #[test]
    fn cartesian_count() {
        // Shared vocabulary so every candidate survives the filters.
        let d = dict(&[("a", "x"), ("b", "y")]);
        let pos: Vec<_> = (0..3).map(|i| SentencePair::new(i, toks("a b"), toks(if i == 0 { "x y" } else { "y x" }))).collect();
        let filter = NegativeFilter::default();
        // Candidates equal to a positive are excluded, so use distinct sides.
        let pos2: Vec<_> = vec![
            SentencePair::new(0, toks("a b"), toks("x y")),
            SentencePair::new(1, toks("b a"), toks("y x")),
            SentencePair::new(2, toks("a a b"), toks("x x y")),
        ];
        let negs = generate_negatives(&pos2, &d, &NegativeFilter { window: None, ..filter.clone() }).unwrap();
        assert_eq!(negs.len(), 6);
        assert_eq!(negs[0].e_tokens, toks("a b"));
        assert_eq!(negs[0].f_tokens, toks("y x"));
        // Identical (e,f) to a positive is never a negative.
        let negs = generate_negatives(&pos, &d, &filter).unwrap();
        assert!(negs.iter().all(|n| pos.iter().all(|p| !crate::corpus::same_text(p, n))));
    }

    #[test]
    fn generation_preconditions() {
        let d = dict(&[("a", "x")]);
        assert!(generate_negatives(&[], &d, &NegativeFilter::default()).is_err());
        let p = [SentencePair::from_text(0, "a", "x")];
        assert!(generate_negatives(&p, &BilingualDictionary::new(), &NegativeFilter::default()).is_err());
    }

    #[test]
    fn window_bounds() {
        assert_eq!(candidate_range(0, 10, Some(4)), 0..5);
        assert_eq!(candidate_range(5, 10, Some(4)), 3..8);
        assert_eq!(candidate_range(9, 10, Some(4)), 5..10);
        assert_eq!(candidate_range(3, 10, Some(100)), 0..10);
    }

    fn pairs(n: usize) -> Vec<SentencePair> {
        (0..n).map(|i| SentencePair::from_text(i, &format!("e{i}"), &format!("f{i}"))).collect()
    }

    #[test]
    fn assemble_ratios() {
        let ds = assemble_dataset(&pairs(5000), &pairs(30000), 5, 1).unwrap();
        assert_eq!((ds.positive_count, ds.negative_count), (5000, 25000));
        let ds = assemble_dataset(&pairs(10), &pairs(20), 5, 1).unwrap();
        assert_eq!(ds.negative_count, 20);
        assert_eq!(ds.achieved_ratio(), 2.0);
        let ds = assemble_dataset(&pairs(10), &pairs(20), 1, 1).unwrap();
        assert_eq!(ds.negative_count, 10);
        assert_eq!(ds.examples.len(), 20);
        assert!(assemble_dataset(&[], &pairs(20), 1, 1).is_err());
        assert!(assemble_dataset(&pairs(3), &pairs(20), 0, 1).is_err());
    }

    #[test]
    fn assemble_is_deterministic() {
        let a = assemble_dataset(&pairs(50), &pairs(400), 5, 9).unwrap();
        let b = assemble_dataset(&pairs(50), &pairs(400), 5, 9).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = assemble_dataset(&pairs(50), &pairs(400), 5, 10).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn sample_positives_is_subset() {
        let all = pairs(100);
        let s = sample_positives(&all, 10, 3);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0].id < w[1].id));
        assert_eq!(sample_positives(&all, 1000, 3).len(), 100);
    }

    proptest! {
        #[test]
        fn negatives_respect_filters(seed in 0u64..1000) {
            let c = crate::synth::cipher_corpus(&crate::synth::CipherConfig {
                pairs: 40, vocab: 8, min_len: 2, max_len: 6, noise: 0.1, zipf: 1.0, seed,
            });
            let mut d = BilingualDictionary::new();
            for (s, t) in &c.cipher {
                d.insert(Direction::EToF, s, t, 1.0);
                d.insert(Direction::FToE, t, s, 1.0);
            }
            let negs = generate_negatives(&c.pairs, &d, &NegativeFilter::default()).unwrap();
            for n in &negs {
                let (el, fl) = (n.e_len() as f64, n.f_len() as f64);
                prop_assert!(el.max(fl) / el.min(fl) <= 2.0);
                // independent recount
                for (src, other, dir) in [(&n.e_tokens, &n.f_tokens, Direction::EToF), (&n.f_tokens, &n.e_tokens, Direction::FToE)] {
                    let hits = src.iter().filter(|w| {
                        d.translations(dir, w).map_or(false, |ts| ts.keys().any(|t| other.contains(t)))
                    }).count();
                    prop_assert!(2 * hits >= src.len());
                }
                prop_assert!(c.pairs.iter().all(|p| !crate::corpus::same_text(p, n)));
            }
        }
    }

    #[test]
    fn partitions_are_disjoint() {
        let all: Vec<SentencePair> = (0..50).map(|i| SentencePair::from_text(i, "a", "b")).collect();
        let s = partition_positives(&all, 100, 5, 7, 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (38, 5, 7));
        let mut ids: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert!(partition_positives(&all, 1, 25, 25, 3).is_err());
    }
}
