//! Byte-fallback BPE tokenizer.
//!
//! Text is split into chunks at every space that follows a non-space byte, so
//! a chunk carries its leading whitespace. Within a chunk, encoding starts
//! from single bytes and repeatedly merges the adjacent pair whose
//! concatenation is the highest-scoring piece. Chunks never interact, which
//! makes the token count of `a + " ..."` the sum of the two counts whenever
//! `a` does not end in a space.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BOS: u32 = 2;
const NUM_SPECIAL: u32 = 3;
const BYTE_OFFSET: u32 = NUM_SPECIAL;
/// Smallest legal vocabulary: the specials plus every byte.
pub const MIN_VOCAB: usize = 256 + NUM_SPECIAL as usize;

const HEADER: &str = "KGCTX-VOCAB v1";
const SPECIAL_NAMES: [&str; 3] = ["pad", "eos", "bos"];

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    /// Byte content per id; empty for specials.
    pieces: Vec<Vec<u8>>,
    scores: Vec<f32>,
    lookup: HashMap<Vec<u8>, u32>,
}

fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    let mut i = 1;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        while i < bytes.len() {
            if bytes[i] == b' ' && bytes[i - 1] != b' ' {
                let c = &bytes[start..i];
                start = i;
                i += 1;
                return Some(c);
            }
            i += 1;
        }
        let c = &bytes[start..];
        start = bytes.len();
        Some(c)
    })
}

impl Tokenizer {
    /// Byte-level vocabulary with no merges.
    pub fn byte_level() -> Self {
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL as usize];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let scores = vec![0.0; pieces.len()];
        Self::from_parts(pieces, scores)
    }

    fn from_parts(pieces: Vec<Vec<u8>>, scores: Vec<f32>) -> Self {
        let lookup = pieces
            .iter()
            .enumerate()
            .skip(MIN_VOCAB)
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Tokenizer {
            pieces,
            scores,
            lookup,
        }
    }

    /// Learns up to `vocab_size - 259` merges from `corpus`. Stops early when
    /// no adjacent pair occurs at least twice.
    pub fn train<'a, I>(corpus: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} is below the minimum {MIN_VOCAB}"
            )));
        }
        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        let mut any = false;
        for text in corpus {
            any |= !text.is_empty();
            for c in chunks(text.as_bytes()) {
                *counts.entry(c).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Validation("tokenizer corpus is empty".into()));
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(c, n)| (c.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(), n))
            .collect();
        words.sort();

        let mut tok = Self::byte_level();
        while tok.pieces.len() < vocab_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += n;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            let mut merged = tok.pieces[l as usize].clone();
            merged.extend_from_slice(&tok.pieces[r as usize]);
            let id = match tok.lookup.get(&merged) {
                Some(&id) => id,
                None => {
                    let id = tok.pieces.len() as u32;
                    tok.scores.push(-((id as usize - MIN_VOCAB) as f32) - 1.0);
                    tok.lookup.insert(merged.clone(), id);
                    tok.pieces.push(merged);
                    id
                }
            };
            for (w, _) in &mut words {
                if w.len() < 2 {
                    continue;
                }
                let mut out = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(id);
                        i += 2;
                    } else {
                        out.push(w[i]);
                        i += 1;
                    }
                }
                *w = out;
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
        if !self.lookup.is_empty() {
            let mut buf = Vec::new();
            loop {
                let mut best: Option<(usize, u32, f32)> = None;
                for i in 0..syms.len().saturating_sub(1) {
                    buf.clear();
                    buf.extend_from_slice(&self.pieces[syms[i] as usize]);
                    buf.extend_from_slice(&self.pieces[syms[i + 1] as usize]);
                    if let Some(&id) = self.lookup.get(&buf) {
                        let s = self.scores[id as usize];
                        if best.is_none_or(|(_, _, bs)| s > bs) {
                            best = Some((i, id, s));
                        }
                    }
                }
                let Some((i, id, _)) = best else { break };
                syms[i] = id;
                syms.remove(i + 1);
            }
        }
        out.extend_from_slice(&syms);
    }

    /// Encodes text; never produces special ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for c in chunks(text.as_bytes()) {
            self.encode_chunk(c, &mut out);
        }
        out
    }

    /// Encodes a decoder target with a leading space, so an answer tokenizes
    /// the same way as the mention does inside an input.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        self.encode(&format!(" {text}"))
    }

    /// Inverse of [`Tokenizer::encode_target`].
    pub fn decode_target(&self, ids: &[u32]) -> Result<String> {
        let s = self.decode(ids)?;
        Ok(match s.strip_prefix(' ') {
            Some(rest) => rest.to_owned(),
            None => s,
        })
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Concatenated bytes of `ids`, skipping specials.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let p = self.pieces.get(id as usize).ok_or_else(|| Error::Lookup {
                kind: "token id",
                id: id.to_string(),
            })?;
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    /// Decodes ids to text. Invalid UTF-8 (possible for arbitrary id
    /// sequences) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Longest prefix of `text` that encodes to at most `budget` tokens and
    /// ends on a token boundary of the original encoding.
    pub fn truncate(&self, text: &str, budget: usize) -> String {
        let ids = self.encode(text);
        if ids.len() <= budget {
            return text.to_owned();
        }
        let mut keep = budget;
        loop {
            let bytes = self.decode_bytes(&ids[..keep]).expect("ids from encode");
            let mut end = bytes.len();
            while end > 0 && !text.is_char_boundary(end) {
                end -= 1;
            }
            let cand = &text[..end];
            if self.count_tokens(cand) <= budget || keep == 0 {
                return cand.to_owned();
            }
            keep -= 1;
        }
    }

    /// Serializes to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (i, (p, s)) in self.pieces.iter().zip(&self.scores).enumerate() {
            if i < NUM_SPECIAL as usize {
                let _ = writeln!(out, "special:{} {s}", SPECIAL_NAMES[i]);
            } else {
                for b in p {
                    let _ = write!(out, "{b:02x}");
                }
                let _ = writeln!(out, " {s}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format(format!("vocab must start with `{HEADER}`")));
        }
        let mut pieces = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |m: &str| Error::Format(format!("vocab line {}: {m}", i + 2));
            let (piece, score) = line.rsplit_once(' ').ok_or_else(|| bad("missing score"))?;
            let score: f32 = score.parse().map_err(|_| bad("bad score"))?;
            let bytes = if let Some(name) = piece.strip_prefix("special:") {
                if SPECIAL_NAMES.get(i) != Some(&name) {
                    return Err(bad("unexpected special piece"));
                }
                Vec::new()
            } else {
                if piece.is_empty() || piece.len() % 2 != 0 {
                    return Err(bad("bad hex piece"));
                }
                (0..piece.len() / 2)
                    .map(|j| u8::from_str_radix(&piece[2 * j..2 * j + 2], 16))
                    .collect::<std::result::Result<Vec<u8>, _>>()
                    .map_err(|_| bad("bad hex piece"))?
            };
            pieces.push(bytes);
            scores.push(score);
        }
        if pieces.len() < MIN_VOCAB
            || (0..256).any(|b| pieces[BYTE_OFFSET as usize + b] != [b as u8])
        {
            return Err(Error::Format("vocab lacks the byte-level base pieces".into()));
        }
        Ok(Self::from_parts(pieces, scores))
    }
}
