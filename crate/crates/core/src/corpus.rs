//! Parallel corpora: text files, id-encoded pairs, and the synthetic
//! keyword-compression task used for desk-scale training.
//!
//! Synthetic task: the target is a handful of distinct content words, each
//! repeated 1 or 2 times (drawn from `{1, 1, 1, 2}`); the source is the same
//! token sequence with filler words scattered in between. Every target token
//! therefore occurs in its source, and true frequencies are mostly 1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextCorpus {
    pub pairs: Vec<TextPair>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `source<TAB>target` per line, tokens separated by single spaces.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}", p.source, p.target);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("line {}: missing TAB separator", n + 1)))?;
            let (src, tgt) = (normalize(src), normalize(tgt));
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::Input(format!("line {}: empty side", n + 1)));
            }
            pairs.push(TextPair {
                source: src,
                target: tgt,
            });
        }
        Ok(TextCorpus { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
        TextCorpus::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(format!("writing corpus {}", path.display()), e))
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|p| {
                    let mut tgt = tgt_vocab.encode(&p.target);
                    tgt.push(EOS);
                    (src_vocab.encode(&p.source), tgt)
                })
                .collect(),
        }
    }

    /// Leading 80% / next 10% / last 10%, each split nonempty.
    pub fn split(&self) -> Result<(TextCorpus, TextCorpus, TextCorpus)> {
        let n = self.pairs.len();
        if n < 3 {
            return Err(Error::Input(format!("need at least 3 pairs to split, have {n}")));
        }
        let tenth = (n / 10).max(1);
        let train = n - 2 * tenth;
        let part = |a: usize, b: usize| TextCorpus {
            pairs: self.pairs[a..b].to_vec(),
        };
        Ok((part(0, train), part(train, train + tenth), part(train + tenth, n)))
    }
}

fn normalize(side: &str) -> String {
    side.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Id-encoded pairs; every target ends with EOS.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub content_words: usize,
    pub filler_words: usize,
    pub min_content: usize,
    pub max_content: usize,
    /// At most this many fillers before each target token (and at the end).
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pairs: 2000,
            content_words: 40,
            filler_words: 20,
            min_content: 3,
            max_content: 6,
            max_fillers: 2,
            seed: 7,
        }
    }
}

pub const REPEAT_CHOICES: [usize; 4] = [1, 1, 1, 2];

pub fn content_word(i: usize) -> String {
    format!("w{i:02}")
}

pub fn filler_word(i: usize) -> String {
    format!("f{i:02}")
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<TextCorpus> {
    if cfg.content_words + cfg.filler_words < 20 {
        return Err(Error::Config(format!(
            "synthetic vocabulary needs at least 20 words, got {}",
            cfg.content_words + cfg.filler_words
        )));
    }
    if cfg.filler_words == 0 || cfg.min_content == 0 || cfg.min_content > cfg.max_content {
        return Err(Error::Config("invalid synthetic content/filler sizes".into()));
    }
    if cfg.max_content > cfg.content_words {
        return Err(Error::Config(format!(
            "max_content {} exceeds content vocabulary {}",
            cfg.max_content, cfg.content_words
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut pool: Vec<usize> = (0..cfg.content_words).collect();
    let mut pairs = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let k = cfg.min_content + rng.below(cfg.max_content - cfg.min_content + 1);
        // partial Fisher-Yates: the first k slots become a uniform k-subset
        for i in 0..k {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        let mut target = Vec::new();
        for &w in &pool[..k] {
            let reps = REPEAT_CHOICES[rng.below(REPEAT_CHOICES.len())];
            for _ in 0..reps {
                target.push(content_word(w));
            }
        }
        let mut source = Vec::new();
        for tok in &target {
            for _ in 0..rng.below(cfg.max_fillers + 1) {
                source.push(filler_word(rng.below(cfg.filler_words)));
            }
            source.push(tok.clone());
        }
        for _ in 0..rng.below(cfg.max_fillers + 1) {
            source.push(filler_word(rng.below(cfg.filler_words)));
        }
        pairs.push(TextPair {
            source: source.join(" "),
            target: target.join(" "),
        });
    }
    Ok(TextCorpus { pairs })
}
