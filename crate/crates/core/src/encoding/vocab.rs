use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const UNK: u32 = 2;
const SPECIALS: [&str; 3] = ["[CLS]", "[SEP]", "[UNK]"];

/// Lower-cased word tokens; every non-alphanumeric, non-space character
/// is its own token. Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || (ch == '\'' && !word.is_empty()) {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Word-level vocabulary with three reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Keeps the `max_size - 3` most frequent tokens (ties broken
    /// lexicographically) so the result is independent of input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t))
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let v: Vocab = serde_json::from_reader(BufReader::new(f))?;
        if v.tokens.len() < SPECIALS.len() || v.tokens[..3] != SPECIALS {
            return Err(Error::Checkpoint(format!(
                "{} is not a vocabulary file",
                path.display()
            )));
        }
        Ok(v)
    }
}
