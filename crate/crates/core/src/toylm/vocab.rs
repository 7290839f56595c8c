use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const KG_EMBEDDING: &str = "<KG_EMBEDDING>";
pub const SPECIALS: [&str; 5] = [PAD, BOS, EOS, UNK, KG_EMBEDDING];

/// Word-level vocabulary; specials occupy the first ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Whitespace split with `? . , !` and a trailing `'s` peeled off as their
/// own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        let mut word = piece;
        let mut tail = Vec::new();
        while let Some(c) = word.chars().last().filter(|c| "?.,!".contains(*c)) {
            tail.push(c.to_string());
            word = &word[..word.len() - c.len_utf8()];
        }
        if let Some(stem) = word.strip_suffix("'s").filter(|s| !s.is_empty()) {
            out.push(stem.to_string());
            out.push("'s".to_string());
        } else if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.add(s);
        }
        for w in words {
            v.add(w.as_ref());
        }
        v
    }

    /// Vocabulary over every token of `texts`, in first-seen order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new(std::iter::empty::<&str>());
        for t in texts {
            for w in tokenize(t) {
                v.add(&w);
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }

    pub fn placeholder(&self) -> usize {
        4
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "tokens": self.tokens })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.to_json())?).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_value(value["tokens"].clone())?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary does not start with the special tokens".into()));
        }
        let mut v = Self::new(std::iter::empty::<&str>());
        for t in &tokens[SPECIALS.len()..] {
            v.add(t);
        }
        if v.len() != tokens.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}
