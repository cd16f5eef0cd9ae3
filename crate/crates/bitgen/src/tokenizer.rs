//! Toy tokenizers: byte-level text, a character vocabulary, and small
//! symbol sets for the synthetic grammars. Ids are dense in [0, V); the
//! special ids sit above the content range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TokenizerSpec {
    /// 256 byte values plus bos/eos/fallback: V = 259, so codes are 9 bits.
    Byte,
    /// A fixed character alphabet; each char is one token.
    Char { alphabet: String },
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub spec: TokenizerSpec,
    chars: Vec<char>,
}

impl Tokenizer {
    pub fn new(spec: TokenizerSpec) -> Result<Self> {
        let chars = match &spec {
            TokenizerSpec::Byte => Vec::new(),
            TokenizerSpec::Char { alphabet } => {
                let mut chars: Vec<char> = alphabet.chars().collect();
                let before = chars.len();
                chars.sort_unstable();
                chars.dedup();
                if chars.len() != before {
                    return Err(Error::Config("char alphabet contains duplicates".into()));
                }
                if chars.is_empty() {
                    return Err(Error::Config("char alphabet is empty".into()));
                }
                chars
            }
        };
        Ok(Self { spec, chars })
    }

    /// Byte mode reserves a distinct fallback id (V=259); char mode keeps
    /// the vocabulary tight (bos and eos only, fallback lands on eos) so
    /// small alphabets get the shortest possible codes.
    pub fn vocab_size(&self) -> u32 {
        match &self.spec {
            TokenizerSpec::Byte => 259,
            TokenizerSpec::Char { .. } => self.chars.len() as u32 + 2,
        }
    }

    pub fn bos_id(&self) -> u32 {
        match &self.spec {
            TokenizerSpec::Byte => 256,
            TokenizerSpec::Char { .. } => self.chars.len() as u32,
        }
    }

    pub fn eos_id(&self) -> u32 {
        self.bos_id() + 1
    }

    pub fn fallback_id(&self) -> u32 {
        match &self.spec {
            TokenizerSpec::Byte => 258,
            TokenizerSpec::Char { .. } => self.eos_id(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match &self.spec {
            TokenizerSpec::Byte => Ok(text.bytes().map(u32::from).collect()),
            TokenizerSpec::Char { .. } => text
                .chars()
                .map(|c| {
                    self.chars
                        .binary_search(&c)
                        .map(|i| i as u32)
                        .map_err(|_| Error::Domain(format!("character {c:?} not in alphabet")))
                })
                .collect(),
        }
    }

    /// Ids outside the content range (specials, fallback hits) are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        match &self.spec {
            TokenizerSpec::Byte => {
                let bytes: Vec<u8> = ids
                    .iter()
                    .filter(|&&id| id < 256)
                    .map(|&id| id as u8)
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TokenizerSpec::Char { .. } => ids
                .iter()
                .filter_map(|&id| self.chars.get(id as usize))
                .collect(),
        }
    }
}

/// Symbol set for the a^n b^n grammar: V = 4, 2-bit codes.
pub fn anbn_tokenizer() -> Tokenizer {
    Tokenizer::new(TokenizerSpec::Char {
        alphabet: "ab".into(),
    })
    .unwrap()
}

/// Symbol set for 3-digit addition strings: digits plus '+' and '='.
pub fn addition_tokenizer() -> Tokenizer {
    Tokenizer::new(TokenizerSpec::Char {
        alphabet: "0123456789+=".into(),
    })
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mode_roundtrips_text() {
        let tok = Tokenizer::new(TokenizerSpec::Byte).unwrap();
        let text = "hello, wörld";
        let ids = tok.encode(text).unwrap();
        assert_eq!(tok.decode(&ids), text);
        assert_eq!(tok.vocab_size(), 259);
        assert_eq!(tok.bos_id(), 256);
        assert_eq!(tok.eos_id(), 257);
        assert_eq!(tok.fallback_id(), 258);
    }

    #[test]
    fn char_mode_is_dense_and_ordered() {
        let tok = anbn_tokenizer();
        assert_eq!(tok.vocab_size(), 4);
        assert_eq!(tok.fallback_id(), tok.eos_id());
        assert_eq!(tok.encode("abba").unwrap(), vec![0, 1, 1, 0]);
        assert_eq!(tok.decode(&[0, 1, 1, 0]), "abba");
    }

    #[test]
    fn decode_skips_specials() {
        let tok = anbn_tokenizer();
        let ids = vec![tok.bos_id(), 0, 0, tok.eos_id()];
        assert_eq!(tok.decode(&ids), "aa");
    }

    #[test]
    fn unknown_char_is_rejected() {
        let tok = anbn_tokenizer();
        assert!(tok.encode("abc").is_err());
    }

    #[test]
    fn duplicate_alphabet_is_rejected() {
        assert!(Tokenizer::new(TokenizerSpec::Char {
            alphabet: "aab".into()
        })
        .is_err());
    }
}
