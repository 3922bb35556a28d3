use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

pub fn is_special(id: usize) -> bool {
    id <= UNK
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, name) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*name) {
                return Err(Error::Input(format!(
                    "vocabulary must start with {RESERVED:?}, line {} is {:?}",
                    i + 1,
                    tokens.get(i)
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Keeps the `max_size - 3` most frequent tokens (ties in lexicographic
    /// order) after the reserved BOS, EOS and UNK entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t.to_string()))
            .collect();
        Vocabulary::from_tokens(tokens).expect("reserved prefix and unique tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, leaving out BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Vocabulary::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_and_unk() {
        let v = Vocabulary::build(["a a b"], 4);
        assert_eq!(v.tokens(), &["<s>", "</s>", "<unk>", "a"]);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = Vocabulary::build(["b a"], 10);
        assert_eq!(&v.tokens()[3..], &["a", "b"]);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocabulary::build(["x y z", "z y"], 100);
        let text = "z x y z";
        assert_eq!(v.decode(&v.encode(text)), text);
    }

    #[test]
    fn file_roundtrip_and_validation() {
        let v = Vocabulary::build(["p q r"], 100);
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::parse("<s>\n</s>\n<unk>\nx\nx\n").is_err());
    }
}
