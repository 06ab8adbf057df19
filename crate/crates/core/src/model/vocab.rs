//! Token inventory and tokenizer.
//!
//! Character tokenization is the default. Any token-inventory file (one
//! token per line, e.g. a BPE piece list) is accepted; encoding is
//! greedy longest-match over the inventory.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const SPACE_TOKEN: &str = "<space>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    by_token: HashMap<String, usize>,
    #[serde(skip)]
    max_token_chars: usize,
}

impl Vocab {
    /// Build from a plain token list. The four specials are prepended if
    /// the list does not already start with them.
    pub fn from_tokens(mut tokens: Vec<String>) -> Result<Vocab> {
        let specials = [BLANK_TOKEN, UNK_TOKEN, SOS_TOKEN, EOS_TOKEN];
        let has_specials = tokens.len() >= 4 && tokens[..4].iter().map(String::as_str).eq(specials);
        if !has_specials {
            let mut all: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
            all.extend(tokens);
            tokens = all;
        }
        let mut by_token = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidConfig("empty token in vocab".into()));
            }
            if by_token.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {t:?}")));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocab {
            tokens,
            by_token,
            max_token_chars,
        })
    }

    /// Character vocabulary over the given texts; space becomes `<space>`.
    pub fn char_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let mut chars: Vec<char> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .filter(|c| *c != ' ')
            .collect();
        chars.sort();
        chars.dedup();
        let mut tokens = vec![SPACE_TOKEN.to_string()];
        tokens.extend(chars.into_iter().map(|c| c.to_string()));
        Vocab::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.by_token = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.max_token_chars = self.tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    /// Greedy longest-match encoding. Unknown spans encode as `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let chars: Vec<char> = text.chars().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i] == ' ' {
                ids.push(self.id(SPACE_TOKEN).unwrap_or(UNK));
                i += 1;
                continue;
            }
            let mut matched = 0;
            let mut matched_id = UNK;
            let max = self.max_token_chars.min(chars.len() - i);
            for len in (1..=max).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if let Some(id) = self.by_token.get(&cand) {
                    matched = len;
                    matched_id = *id;
                    break;
                }
            }
            if matched == 0 {
                ids.push(UNK);
                i += 1;
            } else {
                ids.push(matched_id);
                i += matched;
            }
        }
        ids
    }

    /// Detokenize, skipping blank/sos/eos and mapping `<space>` to ' '.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BLANK || id == SOS || id == EOS {
                continue;
            }
            let t = self.token(id);
            if t == SPACE_TOKEN {
                out.push(' ');
            } else {
                out.push_str(t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_round_trips() {
        let v = Vocab::char_vocab(["tan bol", "miru sel"]).unwrap();
        let text = "bol tan miru";
        let ids = v.encode(text);
        assert!(ids.iter().all(|&i| i >= 4), "no specials in encoded text");
        assert_eq!(v.decode(&ids), text);
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn specials_are_fixed() {
        let v = Vocab::char_vocab(["ab"]).unwrap();
        assert_eq!(v.token(BLANK), BLANK_TOKEN);
        assert_eq!(v.token(UNK), UNK_TOKEN);
        assert_eq!(v.token(SOS), SOS_TOKEN);
        assert_eq!(v.token(EOS), EOS_TOKEN);
    }

    #[test]
    fn unknown_chars_become_unk() {
        let v = Vocab::char_vocab(["ab"]).unwrap();
        let ids = v.encode("aZb");
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn inventory_file_round_trip_with_multichar_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bpe.vocab");
        std::fs::write(&path, "ta\nn\nbo\nl\n").unwrap();
        let v = Vocab::load(&path).unwrap();
        // Greedy longest match picks "ta"+"n".
        let ids = v.encode("tan");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.token(ids[0]), "ta");
        assert_eq!(v.token(ids[1]), "n");
        v.save(&dir.path().join("out.vocab")).unwrap();
        let v2 = Vocab::load(&dir.path().join("out.vocab")).unwrap();
        assert_eq!(v2.size(), v.size());
    }
}
