//! Word-level tokenizer with single-character fallback.
//!
//! Text is split on whitespace. A word that is in the vocabulary becomes one
//! token; otherwise it is spelled out character by character, where the first
//! character uses a word-initial form (`▁c`) and the rest use continuation
//! forms (`##c`). Detokenization joins word-initial tokens with single spaces
//! and appends continuation tokens without a space, so the scheme round-trips
//! any text whose characters are covered by the alphabet.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";

const INIT_MARK: char = '\u{2581}'; // ▁
const CONT_MARK: &str = "##";

/// An ordered token inventory with reserved BOS/EOS/PAD ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabSpec {
    pub tokens: Vec<String>,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    #[serde(skip)]
    word_index: std::sync::OnceLock<std::collections::HashMap<String, u32>>,
}

impl PartialEq for VocabSpec {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.bos == other.bos
            && self.eos == other.eos
            && self.pad == other.pad
    }
}

impl Eq for VocabSpec {}

impl VocabSpec {
    /// Builds a vocabulary from corpus text: every whitespace-separated word
    /// plus word-initial and continuation forms of every character seen, with
    /// printable ASCII always included as the fallback alphabet.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut words = std::collections::BTreeSet::new();
        let mut chars = std::collections::BTreeSet::new();
        for c in 0x20u8..0x7f {
            chars.insert(c as char);
        }
        for text in texts {
            for word in text.as_ref().split_whitespace() {
                for c in word.chars() {
                    chars.insert(c);
                }
                if !word.starts_with(INIT_MARK) && !word.starts_with(CONT_MARK) {
                    words.insert(word.to_string());
                }
            }
        }
        let mut tokens =
            vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), PAD_TOKEN.to_string()];
        for c in &chars {
            tokens.push(format!("{INIT_MARK}{c}"));
        }
        for c in &chars {
            tokens.push(format!("{CONT_MARK}{c}"));
        }
        tokens.extend(words);
        VocabSpec { tokens, bos: 0, eos: 1, pad: 2, word_index: Default::default() }
    }

    /// Builds a vocabulary holding only the given word tokens (plus the
    /// specials), without the character-fallback alphabet. Intended for
    /// compact fixtures; text containing other words will fail to encode.
    pub fn from_tokens(words: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let set: std::collections::BTreeSet<String> =
            words.into_iter().map(|w| w.as_ref().to_string()).collect();
        let mut tokens =
            vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), PAD_TOKEN.to_string()];
        tokens.extend(set);
        VocabSpec { tokens, bos: 0, eos: 1, pad: 2, word_index: Default::default() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len() as u32;
        for id in [self.bos, self.eos, self.pad] {
            if id >= n {
                return Err(Error::Vocab(format!("special id {id} out of range (|V|={n})")));
            }
        }
        if self.bos == self.eos || self.bos == self.pad || self.eos == self.pad {
            return Err(Error::Vocab("special ids must be distinct".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tokens {
            if !seen.insert(t) {
                return Err(Error::Vocab(format!("duplicate token text {t:?}")));
            }
        }
        Ok(())
    }

    fn index(&self) -> &std::collections::HashMap<String, u32> {
        self.word_index.get_or_init(|| {
            self.tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as u32))
                .collect()
        })
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index().get(token).copied()
    }

    /// Encodes text into token ids (no BOS/EOS framing).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let index = self.index();
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = index.get(word) {
                // Words that happen to spell a special token are spelled out
                // character by character instead.
                if id != self.bos && id != self.eos && id != self.pad {
                    ids.push(id);
                    continue;
                }
            }
            for (i, c) in word.chars().enumerate() {
                let tok = if i == 0 {
                    format!("{INIT_MARK}{c}")
                } else {
                    format!("{CONT_MARK}{c}")
                };
                match index.get(&tok) {
                    Some(&id) => ids.push(id),
                    None => {
                        return Err(Error::Vocab(format!(
                            "character {c:?} not covered by the vocabulary alphabet"
                        )))
                    }
                }
            }
        }
        Ok(ids)
    }

    /// Decodes ids back into text. Special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::Vocab(format!("token id {id} out of range")))?;
            if id == self.bos || id == self.eos || id == self.pad {
                continue;
            }
            if let Some(rest) = tok.strip_prefix(CONT_MARK) {
                out.push_str(rest);
            } else if let Some(rest) = tok.strip_prefix(INIT_MARK) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let n = self.tokens.len() as u32;
        for &id in ids {
            if id >= n {
                return Err(Error::Vocab(format!("token id {id} out of range (|V|={n})")));
            }
        }
        Ok(())
    }
}
