//! Token-id to text mapping read from `{"id": u32, "text": "..."}` JSONL.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::corpus::TokenId;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabEntry {
    id: TokenId,
    text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    texts: HashMap<TokenId, String>,
}

impl Vocabulary {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (TokenId, String)>) -> Self {
        Vocabulary {
            texts: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// One past the largest token id, 0 when empty.
    pub fn id_bound(&self) -> u32 {
        self.texts.keys().max().map_or(0, |&m| m + 1)
    }

    pub fn text(&self, token: TokenId) -> Option<&str> {
        self.texts.get(&token).map(String::as_str)
    }

    /// Concatenates token texts.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, FeatureError> {
        let mut s = String::new();
        for &t in tokens {
            s.push_str(self.text(t).ok_or(FeatureError::MissingToken(t))?);
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, FeatureError> {
        let mut texts = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: VocabEntry = serde_json::from_str(line)
                .map_err(|e| FeatureError::Format(format!("vocabulary line {}: {e}", i + 1)))?;
            texts.insert(e.id, e.text);
        }
        Ok(Vocabulary { texts })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text =
            fs::read_to_string(path).map_err(|e| FeatureError::Io(path.display().to_string(), e))?;
        Vocabulary::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let io = |e| FeatureError::Io(path.display().to_string(), e);
        let mut ids: Vec<_> = self.texts.keys().copied().collect();
        ids.sort_unstable();
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for id in ids {
            let e = VocabEntry {
                id,
                text: self.texts[&id].clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&e).unwrap()).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_and_missing() {
        let v = Vocabulary::parse("{\"id\": 0, \"text\": \"Go\"}\n{\"id\": 1, \"text\": \" \"}\n").unwrap();
        assert_eq!(v.decode(&[0, 1, 0]).unwrap(), "Go Go");
        assert!(matches!(v.decode(&[0, 5]), Err(FeatureError::MissingToken(5))));
    }
}
