use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::align::Direction;
use crate::corpus::write_lines;
use crate::error::{Error, Result};

type Entries = BTreeMap<String, BTreeMap<String, f64>>;

/// Word → translation-set maps in both directions, with the probability that
/// admitted each entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BilingualDictionary {
    e_to_f: Entries,
    f_to_e: Entries,
}

impl BilingualDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    fn side(&self, direction: Direction) -> &Entries {
        match direction {
            Direction::EToF => &self.e_to_f,
            Direction::FToE => &self.f_to_e,
        }
    }

    pub fn insert(&mut self, direction: Direction, src: &str, tgt: &str, prob: f64) {
        let side = match direction {
            Direction::EToF => &mut self.e_to_f,
            Direction::FToE => &mut self.f_to_e,
        };
        side.entry(src.to_owned()).or_default().insert(tgt.to_owned(), prob);
    }

    pub fn translations(&self, direction: Direction, word: &str) -> Option<&BTreeMap<String, f64>> {
        self.side(direction).get(word)
    }

    /// True if some translation of `word` is in `other`.
    pub fn translated_in(&self, direction: Direction, word: &str, other: &HashSet<&str>) -> bool {
        self.translations(direction, word)
            .is_some_and(|ts| ts.keys().any(|t| other.contains(t.as_str())))
    }

    /// Number of (src, tgt) entries in one direction.
    pub fn len(&self, direction: Direction) -> usize {
        self.side(direction).values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len(Direction::EToF) == 0 && self.len(Direction::FToE) == 0
    }

    /// Iterates `(src, tgt, prob)` in sorted order.
    pub fn entries(&self, direction: Direction) -> impl Iterator<Item = (&str, &str, f64)> {
        self.side(direction).iter().flat_map(|(s, ts)| {
            ts.iter().map(move |(t, &p)| (s.as_str(), t.as_str(), p))
        })
    }

    /// Writes one direction as `src<TAB>tgt<TAB>probability`.
    pub fn write_tsv(&self, direction: Direction, path: &Path) -> Result<()> {
        write_lines(
            path,
            self.entries(direction)
                .map(|(s, t, p)| format!("{s}\t{t}\t{p:.6}")),
        )
    }

    /// Reads one direction into `self`.
    pub fn read_tsv(&mut self, direction: Direction, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, i + 1, "expected src<TAB>tgt<TAB>probability"));
            }
            let p: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad probability {:?}", fields[2])))?;
            self.insert(direction, fields[0], fields[1], p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let mut d = BilingualDictionary::new();
        d.insert(Direction::EToF, "a", "x", 0.95);
        d.insert(Direction::EToF, "a", "y", 0.5);
        d.insert(Direction::FToE, "x", "a", 0.75);
        let dir = tempfile::tempdir().unwrap();
        let (pe, pf) = (dir.path().join("ef"), dir.path().join("fe"));
        d.write_tsv(Direction::EToF, &pe).unwrap();
        d.write_tsv(Direction::FToE, &pf).unwrap();
        assert_eq!(std::fs::read_to_string(&pe).unwrap(), "a\tx\t0.950000\na\ty\t0.500000\n");
        let mut back = BilingualDictionary::new();
        back.read_tsv(Direction::EToF, &pe).unwrap();
        back.read_tsv(Direction::FToE, &pf).unwrap();
        assert_eq!(back, d);
        let other: HashSet<&str> = ["y"].into_iter().collect();
        assert!(d.translated_in(Direction::EToF, "a", &other));
        assert!(!d.translated_in(Direction::FToE, "x", &other));
    }
}
