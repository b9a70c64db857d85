//! Word-level tokenizer over the synthetic task's closed vocabulary, with
//! byte fallback for anything out of vocabulary.
//!
//! Tokenization splits on whitespace; detokenization joins with single
//! spaces, so round-trips are lossless for single-space-separated text.
//! Unknown words are emitted as runs of byte tokens and reassembled on
//! decode, so arbitrary input survives the round-trip.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
/// Terminates a byte-fallback run, preserving word boundaries.
pub const WORD_SEP: u32 = 2;
const BYTE_BASE: u32 = 3;
const WORD_BASE: u32 = BYTE_BASE + 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    /// word → id (ids start at WORD_BASE)
    words: BTreeMap<String, u32>,
    #[serde(skip)]
    rev: Vec<String>,
}

impl Vocab {
    pub fn build(word_list: &[&str]) -> Vocab {
        let mut words = BTreeMap::new();
        let mut next = WORD_BASE;
        for w in word_list {
            if !words.contains_key(*w) {
                words.insert(w.to_string(), next);
                next += 1;
            }
        }
        let mut v = Vocab {
            words,
            rev: Vec::new(),
        };
        v.rebuild_rev();
        v
    }

    fn rebuild_rev(&mut self) {
        let n = self.words.len();
        self.rev = vec![String::new(); n];
        for (w, &id) in &self.words {
            self.rev[(id - WORD_BASE) as usize] = w.clone();
        }
    }

    pub fn size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.words.get(w).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.words.get(word) {
                Some(&id) => ids.push(id),
                None => {
                    for b in word.as_bytes() {
                        ids.push(BYTE_BASE + *b as u32);
                    }
                    ids.push(WORD_SEP);
                }
            }
        }
        ids
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut byte_run: Vec<u8> = Vec::new();
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                byte_run.push((id - BYTE_BASE) as u8);
                continue;
            }
            if !byte_run.is_empty() {
                parts.push(String::from_utf8_lossy(&byte_run).into_owned());
                byte_run.clear();
            }
            if id == WORD_SEP {
                continue;
            }
            let ix = (id - WORD_BASE) as usize;
            if ix < self.rev.len() {
                parts.push(self.rev[ix].clone());
            }
        }
        if !byte_run.is_empty() {
            parts.push(String::from_utf8_lossy(&byte_run).into_owned());
        }
        parts.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, u32> = self.words.iter().map(|(w, &i)| (w.as_str(), i)).collect();
        std::fs::write(path, serde_json::to_vec_pretty(&map)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "vocabulary file {}",
                path.display()
            )));
        }
        let words: BTreeMap<String, u32> = serde_json::from_slice(&std::fs::read(path)?)?;
        let mut v = Vocab {
            words,
            rev: Vec::new(),
        };
        v.rebuild_rev();
        Ok(v)
    }
}

/// One tokenized input: an optional visual prefix, prompt tokens, and any
/// right padding. τ (the extraction/injection site) is the index of the last
/// non-visual, non-padding prompt token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// Text token ids (prompt, then any already-generated continuation).
    pub token_ids: Vec<u32>,
    pub visual_prefix_len: usize,
    /// Number of leading text tokens that form the prompt.
    pub prompt_len: usize,
    pub pad_len: usize,
}

impl TokenSequence {
    pub fn prompt(vocab: &Vocab, text: &str, visual_prefix_len: usize) -> TokenSequence {
        let ids = vocab.tokenize(text);
        let n = ids.len();
        TokenSequence {
            token_ids: ids,
            visual_prefix_len,
            prompt_len: n,
            pad_len: 0,
        }
    }

    /// Total embedded length (visual prefix + text).
    pub fn embedded_len(&self) -> usize {
        self.visual_prefix_len + self.token_ids.len()
    }

    /// Index of the last non-visual, non-padding prompt token in the
    /// embedded sequence.
    pub fn tau(&self) -> Result<usize> {
        if self.prompt_len == 0 || self.prompt_len > self.token_ids.len() {
            return Err(Error::Data(
                "tau undefined: prompt has no non-padding tokens".into(),
            ));
        }
        Ok(self.visual_prefix_len + self.prompt_len - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["pedestrian", "crossing", "the", "road", "red", "light"])
    }

    #[test]
    fn empty_round_trip() {
        let v = vocab();
        let ids = v.tokenize("");
        assert!(ids.is_empty());
        assert_eq!(v.detokenize(&ids), "");
    }

    #[test]
    fn in_vocab_round_trip() {
        let v = vocab();
        let ids = v.tokenize("pedestrian crossing");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.detokenize(&ids), "pedestrian crossing");
    }

    #[test]
    fn out_of_vocab_round_trips_via_bytes() {
        let v = vocab();
        let ids = v.tokenize("pedestrian zebra-crossing ahead");
        assert_eq!(v.detokenize(&ids), "pedestrian zebra-crossing ahead");
        // fallback produced byte tokens
        assert!(ids.iter().any(|&i| (BYTE_BASE..WORD_BASE).contains(&i)));
    }

    #[test]
    fn save_load_identical(){
        let dir = tempfile::tempdir().unwrap();
        let v = vocab();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let v2 = Vocab::load(&p).unwrap();
        assert_eq!(v.size(), v2.size());
        assert_eq!(v2.tokenize("red light"), v.tokenize("red light"));
    }

    #[test]
    fn tau_points_at_last_prompt_token() {
        let v = vocab();
        let seq = TokenSequence::prompt(&v, "red light", 4);
        assert_eq!(seq.tau().unwrap(), 5);
    }

    #[test]
    fn tau_errors_on_empty_prompt() {
        let v = vocab();
        let seq = TokenSequence::prompt(&v, "", 4);
        assert!(seq.tau().is_err());
    }
}
