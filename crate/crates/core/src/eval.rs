//! Threshold tuning, per-class precision/recall/F, majority-vote label
//! aggregation, and Fleiss' kappa.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{write_lines, Label};
use crate::error::{Error, Result};

/// How the two class F-scores combine into the overall F.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FMode {
    /// Weighted by gold support.
    #[default]
    Weighted,
    Macro,
}

impl FromStr for FMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(FMode::Weighted),
            "macro" => Ok(FMode::Macro),
            other => Err(Error::Config(format!("unknown F mode {other:?} (weighted|macro)"))),
        }
    }
}

impl fmt::Display for FMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FMode::Weighted => "weighted",
            FMode::Macro => "macro",
        })
    }
}

/// Confusion counts with Equivalent as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(predictions: &[Label], gold: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (p, g) in predictions.iter().zip(gold) {
            match (p, g) {
                (Label::Equivalent, Label::Equivalent) => c.tp += 1,
                (Label::Equivalent, Label::Divergent) => c.fp += 1,
                (Label::Divergent, Label::Equivalent) => c.fn_ += 1,
                (Label::Divergent, Label::Divergent) => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize, what: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(what.to_owned());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub equivalent: ClassMetrics,
    pub divergent: ClassMetrics,
    pub overall_f: f64,
    pub confusion: Confusion,
    pub mode: FMode,
    /// Metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

impl EvalReport {
    pub fn from_confusion(c: Confusion, mode: FMode) -> Self {
        let mut undefined = Vec::new();
        let ep = ratio(c.tp, c.tp + c.fp, "equivalent.precision", &mut undefined);
        let er = ratio(c.tp, c.tp + c.fn_, "equivalent.recall", &mut undefined);
        let dp = ratio(c.tn, c.tn + c.fn_, "divergent.precision", &mut undefined);
        let dr = ratio(c.tn, c.tn + c.fp, "divergent.recall", &mut undefined);
        let equivalent = ClassMetrics {
            precision: ep,
            recall: er,
            f1: harmonic(ep, er),
            support: c.tp + c.fn_,
        };
        let divergent = ClassMetrics {
            precision: dp,
            recall: dr,
            f1: harmonic(dp, dr),
            support: c.tn + c.fp,
        };
        let total = (equivalent.support + divergent.support) as f64;
        let overall_f = match mode {
            FMode::Weighted => {
                (equivalent.f1 * equivalent.support as f64 + divergent.f1 * divergent.support as f64) / total
            }
            FMode::Macro => (equivalent.f1 + divergent.f1) / 2.0,
        };
        Self {
            equivalent,
            divergent,
            overall_f,
            confusion: c,
            mode,
            undefined,
        }
    }

    /// `metric<TAB>value` lines.
    pub fn to_kv(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, m) in [("equivalent", &self.equivalent), ("divergent", &self.divergent)] {
            out.push(format!("{name}.precision\t{:.6}", m.precision));
            out.push(format!("{name}.recall\t{:.6}", m.recall));
            out.push(format!("{name}.f1\t{:.6}", m.f1));
            out.push(format!("{name}.support\t{}", m.support));
        }
        out.push(format!("overall_f\t{:.6}", self.overall_f));
        out.push(format!("overall_f.mode\t{}", self.mode));
        let c = self.confusion;
        out.push(format!("confusion.tp\t{}", c.tp));
        out.push(format!("confusion.fp\t{}", c.fp));
        out.push(format!("confusion.fn\t{}", c.fn_));
        out.push(format!("confusion.tn\t{}", c.tn));
        out
    }

    pub fn write_kv(&self, path: &Path) -> Result<()> {
        write_lines(path, self.to_kv())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>8}", "class", "P", "R", "F", "support")?;
        for (name, m) in [("equivalent", &self.equivalent), ("divergent", &self.divergent)] {
            writeln!(
                f,
                "{name:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.precision, m.recall, m.f1, m.support
            )?;
        }
        write!(f, "overall F ({}): {:.4}", self.mode, self.overall_f)?;
        if !self.undefined.is_empty() {
            write!(f, "\nundefined (reported as 0): {}", self.undefined.join(", "))?;
        }
        Ok(())
    }
}

pub fn prf_report(predictions: &[Label], gold: &[Label], mode: FMode) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Data("cannot evaluate an empty gold set".into()));
    }
    Ok(EvalReport::from_confusion(Confusion::from_labels(predictions, gold), mode))
}

/// Equivalent iff `score >= threshold`.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<Label> {
    scores
        .iter()
        .map(|&s| if s >= threshold { Label::Equivalent } else { Label::Divergent })
        .collect()
}

/// Candidate thresholds: −∞, midpoints between consecutive distinct scores, +∞.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::with_capacity(sorted.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

fn check_both_classes(labels: &[Label]) -> Result<()> {
    let eq = labels.iter().filter(|&&l| l == Label::Equivalent).count();
    if eq == 0 || eq == labels.len() {
        return Err(Error::Data("threshold tuning needs both classes in the labels".into()));
    }
    Ok(())
}

/// Threshold maximizing overall F; ties go to the larger threshold.
///
/// Sweeps candidates in increasing order while moving items from the
/// predicted-equivalent side to the predicted-divergent side.
pub fn tune_threshold(scores: &[f64], labels: &[Label], mode: FMode) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_both_classes(labels)?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Threshold −∞: everything predicted equivalent.
    let n_eq = labels.iter().filter(|&&l| l == Label::Equivalent).count();
    let mut c = Confusion {
        tp: n_eq,
        fp: labels.len() - n_eq,
        fn_: 0,
        tn: 0,
    };
    let mut best = (EvalReport::from_confusion(c, mode).overall_f, f64::NEG_INFINITY);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            match labels[order[k]] {
                Label::Equivalent => {
                    c.tp -= 1;
                    c.fn_ += 1;
                }
                Label::Divergent => {
                    c.fp -= 1;
                    c.tn += 1;
                }
            }
            k += 1;
        }
        let threshold = if k < order.len() {
            s + (scores[order[k]] - s) / 2.0
        } else {
            f64::INFINITY
        };
        let f = EvalReport::from_confusion(c, mode).overall_f;
        if f >= best.0 {
            best = (f, threshold);
        }
    }
    Ok(best.1)
}

/// Per-item category counts from `raters_per_item` annotators.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix {
    /// `[equivalent, divergent]` counts per item.
    rows: Vec<[usize; 2]>,
    raters: usize,
}

impl AnnotationMatrix {
    pub fn new(rows: Vec<[usize; 2]>) -> Result<Self> {
        let raters = rows
            .first()
            .map(|r| r[0] + r[1])
            .ok_or_else(|| Error::Data("annotation matrix has no items".into()))?;
        if raters < 2 {
            return Err(Error::Data(format!("need at least 2 raters per item, found {raters}")));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r[0] + r[1] != raters) {
            return Err(Error::Data(format!(
                "item {i} has {} ratings, expected {raters}",
                r[0] + r[1]
            )));
        }
        Ok(Self { rows, raters })
    }

    pub fn rows(&self) -> &[[usize; 2]] {
        &self.rows
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads `item_id<TAB>count_equivalent<TAB>count_divergent` rows.
pub fn read_annotations(path: &Path) -> Result<(Vec<String>, AnnotationMatrix)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, i + 1, format!("bad count {s:?}")))
        };
        if f.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected item_id<TAB>equivalent<TAB>divergent"));
        }
        ids.push(f[0].to_owned());
        rows.push([parse(f[1])?, parse(f[2])?]);
    }
    Ok((ids, AnnotationMatrix::new(rows)?))
}

/// Majority label and its vote count for every item.
pub fn majority_vote(matrix: &AnnotationMatrix) -> Result<Vec<(Label, usize)>> {
    matrix
        .rows
        .iter()
        .enumerate()
        .map(|(i, &[eq, div])| match eq.cmp(&div) {
            std::cmp::Ordering::Greater => Ok((Label::Equivalent, eq)),
            std::cmp::Ordering::Less => Ok((Label::Divergent, div)),
            std::cmp::Ordering::Equal => Err(Error::Data(format!(
                "item {i}: tie with even raters ({eq} vs {div})"
            ))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// All ratings fell in one category, so chance agreement is 1 and κ is
    /// defined as 1.
    pub degenerate: bool,
}

/// Fleiss' κ = (P̄ − P̄e) / (1 − P̄e).
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<Kappa> {
    let n_items = matrix.rows.len();
    if n_items < 2 {
        return Err(Error::Data("Fleiss' kappa needs at least 2 items".into()));
    }
    let n = matrix.raters as f64;
    let total = n_items as f64 * n;
    let p_eq = matrix.rows.iter().map(|r| r[0]).sum::<usize>() as f64 / total;
    let p_div = 1.0 - p_eq;
    let p_e = p_eq * p_eq + p_div * p_div;
    let p_bar = matrix
        .rows
        .iter()
        .map(|r| {
            let sq = (r[0] * r[0] + r[1] * r[1]) as f64;
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / n_items as f64;
    if p_e >= 1.0 {
        return Ok(Kappa {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (p_bar - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx.sqrt() * syy.sqrt()))
    }
}
