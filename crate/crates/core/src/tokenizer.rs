//! Lowercasing word-piece tokenizer with byte fallback.
//!
//! Text is lowercased and split into words at whitespace, with every ASCII
//! punctuation character its own word and `[sep]` kept whole. Each word is
//! covered greedily by the longest vocabulary entries (`##` marks a
//! continuation piece). A word that cannot be covered becomes one `<0xNN>`
//! token per UTF-8 byte.

use std::collections::HashMap;

use crate::error::{invalid, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["[pad]", "[bos]", "[eos]", "[sep]"];
const BYTE_BASE: u32 = SPECIALS.len() as u32;
const FIRST_WORD: usize = SPECIALS.len() + 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Tokenizer {
    /// Specials, the 256 byte tokens, then `entries` in order (duplicates
    /// dropped). Entries are lowercased.
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..=255u8).map(byte_token));
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for e in entries {
            let e = e.as_ref().to_lowercase();
            if e.is_empty() || e == "##" || index.contains_key(&e) {
                continue;
            }
            index.insert(e.clone(), tokens.len() as u32);
            tokens.push(e);
        }
        Self { tokens, index }
    }

    /// Rebuild from a stored table; the reserved prefix must be intact.
    pub fn from_table(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < FIRST_WORD {
            return invalid(format!("token table has {} entries, need at least {FIRST_WORD}", tokens.len()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return invalid(format!("token {i} should be {s}, found {:?}", tokens[i]));
            }
        }
        for b in 0..=255u8 {
            if tokens[BYTE_BASE as usize + b as usize] != byte_token(b) {
                return invalid(format!("byte token {b} missing from table"));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return invalid(format!("token {i} is empty or spans lines"));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return invalid(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn table(&self) -> &[String] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn words(text: &str) -> Vec<String> {
        let lower = text.to_lowercase();
        let mut words = Vec::new();
        let mut cur = String::new();
        let mut rest = lower.as_str();
        while let Some(c) = rest.chars().next() {
            if rest.starts_with("[sep]") {
                flush(&mut cur, &mut words);
                words.push("[sep]".into());
                rest = &rest[5..];
                continue;
            }
            if c.is_whitespace() {
                flush(&mut cur, &mut words);
            } else if c.is_ascii_punctuation() {
                flush(&mut cur, &mut words);
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        flush(&mut cur, &mut words);
        words
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in Self::words(text) {
            self.encode_word(&w, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if word == "[sep]" {
            out.push(SEP);
            return;
        }
        let start_len = out.len();
        let mut pos = 0;
        while pos < word.len() {
            let mut found = None;
            let mut end = word.len();
            while end > pos {
                if word.is_char_boundary(end) {
                    let piece = &word[pos..end];
                    let key = if pos == 0 { piece.to_string() } else { format!("##{piece}") };
                    if let Some(&id) = self.index.get(&key) {
                        if id as usize >= FIRST_WORD {
                            found = Some((id, end));
                            break;
                        }
                    }
                }
                end -= 1;
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    pos = end;
                }
                None => {
                    out.truncate(start_len);
                    out.extend(word.bytes().map(|b| BYTE_BASE + b as u32));
                    return;
                }
            }
        }
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace; `[pad]`, `[bos]`
    /// and `[eos]` are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush_bytes = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..BYTE_BASE + 256).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush_bytes(&mut bytes, &mut words);
            match id {
                PAD | BOS | EOS => {}
                SEP => words.push("[SEP]".into()),
                _ => match self.token(id) {
                    Some(t) => match t.strip_prefix("##") {
                        Some(cont) if !words.is_empty() => words.last_mut().expect("nonempty").push_str(cont),
                        Some(cont) => words.push(cont.to_string()),
                        None => words.push(t.to_string()),
                    },
                    None => words.push("\u{FFFD}".into()),
                },
            }
        }
        flush_bytes(&mut bytes, &mut words);
        words.join(" ")
    }
}

fn flush(cur: &mut String, words: &mut Vec<String>) {
    if !cur.is_empty() {
        words.push(std::mem::take(cur));
    }
}
