//! Generated cipher corpora with known ground truth.
//!
//! Each source word has exactly one target translation (a random
//! permutation of the vocabulary). Target sentences are word-by-word
//! translations in the same order, corrupted by per-token noise: with
//! probability `noise` a token is substituted by a random target word,
//! dropped, or followed by an inserted random target word (one third each).
//! Source words are drawn from a Zipf distribution over the vocabulary so
//! that, as in natural text, a few words are frequent.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SentencePair;

#[derive(Debug, Clone)]
pub struct CipherConfig {
    pub pairs: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Zipf exponent of the source word distribution; 0 gives uniform.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for CipherConfig {
    fn default() -> Self {
        Self {
            pairs: 2000,
            vocab: 50,
            min_len: 3,
            max_len: 12,
            noise: 0.1,
            zipf: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CipherCorpus {
    pub pairs: Vec<SentencePair>,
    /// Source word → its target translation.
    pub cipher: BTreeMap<String, String>,
}

pub fn source_word(k: usize) -> String {
    format!("s{k}")
}

pub fn target_word(k: usize) -> String {
    format!("t{k}")
}

/// Generates a cipher corpus. Deterministic in `config.seed`.
pub fn cipher_corpus(config: &CipherConfig) -> CipherCorpus {
    assert!(config.vocab > 0 && config.min_len > 0 && config.min_len <= config.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut perm: Vec<usize> = (0..config.vocab).collect();
    perm.shuffle(&mut rng);
    let cipher: BTreeMap<String, String> = perm
        .iter()
        .enumerate()
        .map(|(k, &t)| (source_word(k), target_word(t)))
        .collect();

    let weights = (1..=config.vocab).map(|r| (r as f64).powf(-config.zipf));
    let word_dist = WeightedIndex::new(weights).expect("positive weights");

    let mut pairs = Vec::with_capacity(config.pairs);
    while pairs.len() < config.pairs {
        let len = rng.gen_range(config.min_len..=config.max_len);
        let src: Vec<usize> = (0..len).map(|_| word_dist.sample(&mut rng)).collect();
        let mut tgt = Vec::with_capacity(len + 2);
        for &k in &src {
            if rng.gen_bool(config.noise) {
                match rng.gen_range(0..3) {
                    0 => tgt.push(target_word(rng.gen_range(0..config.vocab))),
                    1 => {}
                    _ => {
                        tgt.push(target_word(perm[k]));
                        tgt.push(target_word(rng.gen_range(0..config.vocab)));
                    }
                }
            } else {
                tgt.push(target_word(perm[k]));
            }
        }
        if tgt.is_empty() {
            continue;
        }
        let e = src.into_iter().map(source_word).collect();
        pairs.push(SentencePair::new(pairs.len(), e, tgt));
    }
    CipherCorpus { pairs, cipher }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = CipherConfig {
            pairs: 200,
            ..Default::default()
        };
        let a = cipher_corpus(&cfg);
        let b = cipher_corpus(&cfg);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.cipher.len(), 50);
        for (i, p) in a.pairs.iter().enumerate() {
            assert_eq!(p.id, i);
            assert!((3..=12).contains(&p.e_len()));
            assert!(!p.f_tokens.is_empty());
        }
        let mut targets: Vec<_> = a.cipher.values().collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), 50);
    }

    #[test]
    fn noiseless_is_exact_translation() {
        let c = cipher_corpus(&CipherConfig {
            pairs: 20,
            noise: 0.0,
            ..Default::default()
        });
        for p in &c.pairs {
            let t: Vec<String> = p.e_tokens.iter().map(|w| c.cipher[w].clone()).collect();
            assert_eq!(t, p.f_tokens);
        }
    }
}
