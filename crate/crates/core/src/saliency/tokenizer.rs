//! Byte-level BPE tokenizer compatible with CLIP's `merges.txt`.
//!
//! The vocabulary is derived from the merge list the same way CLIP builds
//! it: 256 byte symbols, the same symbols with an end-of-word marker, one
//! entry per merge, then the two special tokens.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;

use super::SaliencyError;

pub const CONTEXT_LENGTH: usize = 77;
/// Number of merges used by CLIP's released tokenizer.
pub const CLIP_MERGES: usize = 49152 - 256 - 2;
const START: &str = "<|startoftext|>";
const END: &str = "<|endoftext|>";

/// GPT-2 style reversible byte to printable-char table.
fn bytes_to_unicode() -> Vec<(u8, char)> {
    let mut bs: Vec<u32> = (b'!' as u32..=b'~' as u32).chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    bs.into_iter()
        .zip(cs)
        .map(|(b, c)| (b as u8, char::from_u32(c).expect("valid code point")))
        .collect()
}

#[derive(Debug)]
pub struct ClipTokenizer {
    byte_encoder: HashMap<u8, char>,
    ranks: HashMap<(String, String), usize>,
    encoder: HashMap<String, u32>,
    pattern: Regex,
    memo: Mutex<HashMap<String, Vec<String>>>,
    pub start_id: u32,
    pub end_id: u32,
}

impl ClipTokenizer {
    pub fn from_merges(merges: &[(String, String)]) -> Self {
        let table = bytes_to_unicode();
        let mut vocab: Vec<String> = table.iter().map(|(_, c)| c.to_string()).collect();
        vocab.extend(table.iter().map(|(_, c)| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(START.into());
        vocab.push(END.into());
        let encoder: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        ClipTokenizer {
            byte_encoder: table.into_iter().collect(),
            ranks,
            start_id: encoder[START],
            end_id: encoder[END],
            encoder,
            pattern: Regex::new(
                r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
            )
            .expect("valid pattern"),
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// Parse a `merges.txt` (first line is a version header), keeping the
    /// first `limit` merges.
    pub fn from_merges_text(text: &str, limit: usize) -> Result<Self, SaliencyError> {
        let mut merges = Vec::new();
        for line in text.lines().skip(1).take(limit) {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| SaliencyError::Registry(format!("malformed merge line {line:?}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Self::from_merges(&merges))
    }

    pub fn from_merges_file(path: &Path) -> Result<Self, SaliencyError> {
        Self::from_merges_text(&std::fs::read_to_string(path)?, CLIP_MERGES)
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        if let Some(hit) = self.memo.lock().expect("memo lock").get(token) {
            return hit.clone();
        }
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min();
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        self.memo.lock().expect("memo lock").insert(token.to_string(), word.clone());
        word
    }

    /// Token ids without the start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[&b]).collect();
            for piece in self.bpe(&mapped) {
                ids.push(self.encoder[&piece]);
            }
        }
        ids
    }

    /// `[start, tokens.., end]` zero-padded to `context`; errors when too long.
    pub fn encode_padded(&self, text: &str, context: usize) -> Result<(Vec<u32>, usize), SaliencyError> {
        let body = self.encode(text);
        let total = body.len() + 2;
        if total > context {
            return Err(SaliencyError::TextTooLong { tokens: total, limit: context });
        }
        let mut ids = Vec::with_capacity(context);
        ids.push(self.start_id);
        ids.extend(body);
        ids.push(self.end_id);
        let eos = ids.len() - 1;
        ids.resize(context, 0);
        Ok((ids, eos))
    }
}
