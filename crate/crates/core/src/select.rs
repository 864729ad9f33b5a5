//! Score files and top-fraction data selection.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_lines, write_parallel, SentencePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub pair_id: usize,
    pub score: f64,
}

/// `pair_id<TAB>score` with six decimals.
pub fn write_scores(path: &Path, scores: &[ScoredPair]) -> Result<()> {
    write_lines(path, scores.iter().map(|s| format!("{}\t{:.6}", s.pair_id, s.score)))
}

/// Parses a score file. Duplicate ids and non-finite scores are errors.
pub fn read_scores(path: &Path) -> Result<Vec<ScoredPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected pair_id<TAB>score"))?;
        let pair_id = id
            .parse::<usize>()
            .map_err(|_| Error::parse(path, i + 1, format!("bad pair id {id:?}")))?;
        let score = score
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|s| s.is_finite())
            .ok_or_else(|| Error::parse(path, i + 1, format!("score {score:?} is not a finite number")))?;
        if !seen.insert(pair_id) {
            return Err(Error::parse(path, i + 1, format!("duplicate pair id {pair_id}")));
        }
        out.push(ScoredPair { pair_id, score });
    }
    Ok(out)
}

/// Reads a score file and checks every id against the corpus.
pub fn ingest_scores(path: &Path, pairs: &[SentencePair]) -> Result<Vec<ScoredPair>> {
    let scores = read_scores(path)?;
    let ids: HashSet<usize> = pairs.iter().map(|p| p.id).collect();
    if let Some(s) = scores.iter().find(|s| !ids.contains(&s.pair_id)) {
        return Err(Error::Data(format!(
            "{}: pair id {} is not in the corpus",
            path.display(),
            s.pair_id
        )));
    }
    Ok(scores)
}

/// ⌈keep_fraction · n⌉, ignoring floating-point noise in the product.
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    let x = keep_fraction * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Ids of the `keep_count` best-scored pairs, ties going to smaller ids.
pub fn select_ids(pairs: &[SentencePair], scores: &[ScoredPair], keep_fraction: f64) -> Result<HashSet<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} must be in (0, 1]")));
    }
    let by_id: HashMap<usize, f64> = scores.iter().map(|s| (s.pair_id, s.score)).collect();
    let missing = pairs.iter().filter(|p| !by_id.contains_key(&p.id)).count();
    if missing > 0 {
        return Err(Error::Data(format!("{missing} pairs have no score")));
    }
    let mut ranked: Vec<(usize, f64)> = pairs.iter().map(|p| (p.id, by_id[&p.id])).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = keep_count(pairs.len(), keep_fraction);
    Ok(ranked[..k].iter().map(|&(id, _)| id).collect())
}

/// Keeps the top `⌈keep_fraction · N⌉` pairs by score, in corpus order.
pub fn select_top(pairs: &[SentencePair], scores: &[ScoredPair], keep_fraction: f64) -> Result<Vec<SentencePair>> {
    let keep = select_ids(pairs, scores, keep_fraction)?;
    Ok(pairs.iter().filter(|p| keep.contains(&p.id)).cloned().collect())
}

/// Uniform random scores, for the random-downsampling baseline.
pub fn random_scores(pairs: &[SentencePair], seed: u64) -> Vec<ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| ScoredPair {
            pair_id: p.id,
            score: rng.gen(),
        })
        .collect()
}

/// Writes the kept pairs as a two-file corpus plus a sidecar of kept ids.
pub fn write_selection(source: &Path, target: &Path, ids_path: &Path, kept: &[SentencePair]) -> Result<()> {
    write_parallel(source, target, kept)?;
    write_lines(ids_path, kept.iter().map(|p| p.id.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(n: usize) -> Vec<SentencePair> {
        (0..n).map(|i| SentencePair::from_text(i, "a", "b")).collect()
    }

    fn scored(values: &[f64]) -> Vec<ScoredPair> {
        values
            .iter()
            .enumerate()
            .map(|(pair_id, &score)| ScoredPair { pair_id, score })
            .collect()
    }

    #[test]
    fn score_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        std::fs::write(&p, "0\t0.91\n1\t0.20\n").unwrap();
        let s = ingest_scores(&p, &corpus(2)).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1], ScoredPair { pair_id: 1, score: 0.2 });
        assert!(ingest_scores(&p, &corpus(1)).unwrap_err().to_string().contains("pair id 1"));

        std::fs::write(&p, "0\t0.5\n0\t0.4\n").unwrap();
        assert!(read_scores(&p).unwrap_err().to_string().contains("duplicate"));
        std::fs::write(&p, "0\t0.5\n1\tNaN\n").unwrap();
        assert!(read_scores(&p).unwrap_err().to_string().contains(":2:"));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        write_scores(&p, &scored(&[0.25, 1.0 / 3.0])).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0\t0.250000\n1\t0.333333\n");
    }

    #[test]
    fn selection_examples() {
        let c = corpus(10);
        let s = scored(&[0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4, 0.6, 0.0]);
        let kept = select_top(&c, &s, 0.5).unwrap();
        let ids: Vec<usize> = kept.iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![1, 3, 4, 6, 8]);
        assert_eq!(select_top(&c, &s, 1.0).unwrap(), c);
        assert!(select_top(&c, &s, 0.0).is_err());
        assert!(select_top(&c, &s[..9], 0.5).unwrap_err().to_string().contains("1 pairs"));
    }

    #[test]
    fn boundary_ties_prefer_smaller_ids() {
        let c = corpus(4);
        let kept = select_ids(&c, &scored(&[0.5, 0.5, 0.5, 0.9]), 0.5).unwrap();
        assert_eq!(kept, HashSet::from([3, 0]));
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(10001, 0.5), 5001);
        assert_eq!(keep_count(120_000, 0.9), 108_000);
        assert_eq!(keep_count(10, 0.25), 3);
        assert_eq!(keep_count(3, 1.0), 3);
    }

    #[test]
    fn random_scores_are_seeded() {
        let c = corpus(5);
        assert_eq!(random_scores(&c, 4), random_scores(&c, 4));
        assert_ne!(random_scores(&c, 4), random_scores(&c, 5));
    }

    proptest! {
        #[test]
        fn dominance_and_monotone_invariance(
            values in prop::collection::vec(0u32..50, 1..80),
            keep in 0.01f64..=1.0,
        ) {
            let vals: Vec<f64> = values.iter().map(|&v| v as f64 / 10.0).collect();
            let c = corpus(vals.len());
            let kept = select_ids(&c, &scored(&vals), keep).unwrap();
            prop_assert_eq!(kept.len(), keep_count(vals.len(), keep));
            let min_kept = kept.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
            let max_dropped = (0..vals.len()).filter(|i| !kept.contains(i)).map(|i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
            let transformed: Vec<f64> = vals.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(kept, select_ids(&c, &scored(&transformed), keep).unwrap());
        }
    }
}
