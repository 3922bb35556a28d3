//! ROUGE-1/2/L, surplus-repeat rate, and the frequency-estimation confusion grid.

use std::collections::HashMap;
use std::fmt;

use log::warn;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::vocab::is_special;
use crate::wfe::{quantize, TrueFrequency};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::One, RougeVariant::Two, RougeVariant::L];
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RougeVariant::One => "ROUGE-1",
            RougeVariant::Two => "ROUGE-2",
            RougeVariant::L => "ROUGE-L",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Recall,
    F1,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Recall => "R",
            Basis::F1 => "F",
        })
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Basis::Recall),
            "f1" => Ok(Basis::F1),
            other => Err(Error::Config(format!("unknown ROUGE basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(matched: usize, cand: usize, reference: usize) -> Self {
        let recall = if reference == 0 { 0.0 } else { matched as f64 / reference as f64 };
        let precision = if cand == 0 { 0.0 } else { matched as f64 / cand as f64 };
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        RougeScore {
            recall,
            precision,
            f1,
        }
    }

    pub fn get(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Recall => self.recall,
            Basis::F1 => self.f1,
        }
    }
}

/// Longest prefix of `text` that fits in `limit` bytes without splitting a character.
pub fn truncate_bytes(text: &str, limit: usize) -> &str {
    if text.len() <= limit {
        return text;
    }
    let mut end = limit;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

fn ngrams<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_default() += 1;
        }
    }
    counts
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Scores one candidate against one reference; both are space-separated tokens.
pub fn rouge_pair(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let c = ngrams(&cand, n);
            let r = ngrams(&refr, n);
            let matched = r
                .iter()
                .map(|(g, &rc)| rc.min(c.get(g).copied().unwrap_or(0)))
                .sum();
            RougeScore::from_counts(matched, c.values().sum(), r.values().sum())
        }
        RougeVariant::L => RougeScore::from_counts(lcs_len(&cand, &refr), cand.len(), refr.len()),
    }
}

/// Mean score over aligned pairs. Candidates are cut to `byte_limit` bytes first.
pub fn rouge(
    candidates: &[String],
    references: &[String],
    variant: RougeVariant,
    basis: Basis,
    byte_limit: Option<usize>,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        if r.split_whitespace().next().is_none() {
            warn!("reference {} is empty; scored as 0", i + 1);
            continue;
        }
        let c = match byte_limit {
            Some(limit) => truncate_bytes(c, limit),
            None => c.as_str(),
        };
        total += rouge_pair(c, r, variant).get(basis);
    }
    Ok(total / candidates.len() as f64)
}

/// Fraction of non-special tokens that repeat an earlier token of the same output.
pub fn repeat_rate(outputs: &[Vec<usize>]) -> f64 {
    let mut surplus = 0usize;
    let mut total = 0usize;
    for out in outputs {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &t in out.iter().filter(|&&t| !is_special(t)) {
            *counts.entry(t).or_default() += 1;
            total += 1;
        }
        surplus += counts.values().map(|&c| c - 1).sum::<usize>();
    }
    if total == 0 {
        0.0
    } else {
        surplus as f64 / total as f64
    }
}

/// Same as [`repeat_rate`] over whitespace-tokenized text.
pub fn repeat_rate_text(outputs: &[String]) -> f64 {
    let mut surplus = 0usize;
    let mut total = 0usize;
    for out in outputs {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in out.split_whitespace() {
            *counts.entry(t).or_default() += 1;
            total += 1;
        }
        surplus += counts.values().map(|&c| c - 1).sum::<usize>();
    }
    if total == 0 {
        0.0
    } else {
        surplus as f64 / total as f64
    }
}

pub const ROW_LABELS: [&str; 3] = ["1", "2", ">=3"];
pub const COL_LABELS: [&str; 5] = ["0", "1", "2", "3", ">=4"];

/// Rows bucket the true count a* (1, 2, >=3); columns the quantized estimate (0..3, >=4).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 5]; 3],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: u64, estimate: u64) {
        if truth == 0 {
            return;
        }
        let row = (truth.min(3) - 1) as usize;
        let col = estimate.min(4) as usize;
        self.counts[row][col] += 1;
    }

    /// Adds every word with a* >= 1 of one example.
    pub fn add_example(&mut self, a_hat: &[f64], truth: &TrueFrequency) -> Result<()> {
        if a_hat.len() != truth.counts.len() {
            return Err(Error::dim("confusion", &[a_hat.len()], &[truth.counts.len()]));
        }
        for (q, &t) in quantize(a_hat).into_iter().zip(&truth.counts) {
            self.add(t as u64, q);
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..3).map(|r| self.counts[r][r + 1]).sum()
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "true\\est")?;
        for c in COL_LABELS {
            write!(f, "\t{c}")?;
        }
        writeln!(f)?;
        for (label, row) in ROW_LABELS.iter().zip(&self.counts) {
            write!(f, "{label}")?;
            for v in row {
                write!(f, "\t{v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Buckets every word with a* >= 1 of every pair against its quantized estimate.
pub fn wfe_confusion(model: &Seq2Seq, corpus: &ParallelCorpus) -> Result<ConfusionMatrix> {
    let mut grid = ConfusionMatrix::default();
    let m = model.config().tgt_vocab_size;
    for (src, tgt) in &corpus.pairs {
        let est = model.wfe_estimate(&model.encode(src)?)?;
        grid.add_example(&est.a_hat, &TrueFrequency::from_target(tgt, m)?)?;
    }
    Ok(grid)
}
