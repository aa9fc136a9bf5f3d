//! Byte-level byte-pair-encoding tokenizer.
//!
//! The base alphabet is all 256 byte values, so every input (including
//! misspelt or non-UTF-8 text) encodes without an unknown token. Text is
//! cut into pieces before every ASCII whitespace byte, which makes the
//! leading space the word-initial marker; merges never cross a piece
//! boundary. Training merges the most frequent adjacent pair at each step,
//! breaking frequency ties by the smallest `(left, right)` byte strings.
//!
//! Ids: `0..4` are the special tokens, `4..260` the bytes, then one id per
//! learned merge in training order.
//!
//! Vocabulary file: UTF-8 text, one token per line in id order, a blank
//! line, then one merge per line as `left<TAB>right`. Control bytes,
//! backslash and bytes that are not valid UTF-8 are written as `\xNN`
//! (backslash as `\\`).

use std::cmp::Reverse;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const BYTE_BASE: usize = SPECIAL_TOKENS.len();
/// Size of a vocabulary with no merges.
pub const BASE_VOCAB: usize = BYTE_BASE + 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    /// Byte content of every non-special id (specials hold their names).
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, usize>,
    merges: Vec<(usize, usize)>,
    merge_rank: HashMap<(usize, usize), usize>,
}

fn is_boundary(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Splits `text` into pieces, starting a new piece at every whitespace byte.
pub fn pieces(text: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= text.len() {
            return None;
        }
        let mut i = start + 1;
        while i < text.len() && !is_boundary(text[i]) {
            i += 1;
        }
        let p = &text[start..i];
        start = i;
        Some(p)
    })
}

impl Vocabulary {
    /// Specials plus the 256 byte tokens, no merges.
    pub fn bytes_only() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_TOKENS.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let token_to_id = (0..=255u8).map(|b| (vec![b], BYTE_BASE + b as usize)).collect();
        Vocabulary { tokens, token_to_id, merges: Vec::new(), merge_rank: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    /// Byte content of a non-special token.
    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        (id >= BYTE_BASE).then(|| self.tokens.get(id).map(Vec::as_slice)).flatten()
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<usize> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < BYTE_BASE
    }

    fn push_merge(&mut self, left: usize, right: usize) -> usize {
        let mut bytes = self.tokens[left].clone();
        bytes.extend_from_slice(&self.tokens[right]);
        let id = self.tokens.len();
        self.merge_rank.insert((left, right), self.merges.len());
        self.merges.push((left, right));
        self.token_to_id.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    /// Learns merges from `corpus` until the vocabulary holds `target_size`
    /// tokens or no pair occurs at least twice.
    pub fn train<D: AsRef<[u8]>>(corpus: &[D], target_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train a tokenizer on an empty corpus".into()));
        }
        if target_size < BASE_VOCAB {
            return Err(Error::Input(format!("target vocabulary size {target_size} is below the {BASE_VOCAB} base tokens")));
        }
        let mut vocab = Vocabulary::bytes_only();

        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        for doc in corpus {
            for p in pieces(doc.as_ref()) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut uniq: Vec<(&[u8], u64)> = counts.into_iter().collect();
        uniq.sort_unstable();
        let mut words: Vec<Vec<usize>> = uniq.iter().map(|(p, _)| p.iter().map(|&b| BYTE_BASE + b as usize).collect()).collect();
        let freq: Vec<u64> = uniq.iter().map(|(_, c)| *c).collect();

        let mut pair_count: HashMap<(usize, usize), u64> = HashMap::new();
        let mut where_: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
        for (w, syms) in words.iter().enumerate() {
            for pair in syms.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_count.entry(key).or_default() += freq[w];
                where_.entry(key).or_default().insert(w);
            }
        }

        type HeapKey = (u64, Reverse<(Vec<u8>, Vec<u8>)>, (usize, usize));
        let heap_key = |v: &Vocabulary, pair: (usize, usize), c: u64| -> HeapKey {
            (c, Reverse((v.tokens[pair.0].clone(), v.tokens[pair.1].clone())), pair)
        };
        let mut heap: BinaryHeap<HeapKey> = pair_count.iter().map(|(&p, &c)| heap_key(&vocab, p, c)).collect();

        while vocab.len() < target_size {
            let Some((c, _, pair)) = heap.pop() else { break };
            if pair_count.get(&pair).copied() != Some(c) {
                continue; // stale entry
            }
            if c < 2 {
                break;
            }
            let mut joined = vocab.tokens[pair.0].clone();
            joined.extend_from_slice(&vocab.tokens[pair.1]);
            if vocab.token_to_id.contains_key(&joined) {
                pair_count.remove(&pair);
                continue;
            }
            let new_id = vocab.push_merge(pair.0, pair.1);
            let mut affected: Vec<usize> = where_.remove(&pair).map(|s| s.into_iter().collect()).unwrap_or_default();
            affected.sort_unstable();
            let mut touched: HashSet<(usize, usize)> = HashSet::new();
            for w in affected {
                let f = freq[w];
                for p in words[w].windows(2) {
                    let key = (p[0], p[1]);
                    if let Entry::Occupied(mut e) = pair_count.entry(key) {
                        *e.get_mut() -= f;
                        if *e.get() == 0 {
                            e.remove();
                        }
                    }
                    touched.insert(key);
                    if let Some(s) = where_.get_mut(&key) {
                        s.remove(&w);
                    }
                }
                words[w] = apply_merge(&words[w], pair, new_id);
                for p in words[w].windows(2) {
                    let key = (p[0], p[1]);
                    *pair_count.entry(key).or_default() += f;
                    where_.entry(key).or_default().insert(w);
                    touched.insert(key);
                }
            }
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for key in touched {
                if let Some(&c) = pair_count.get(&key) {
                    heap.push(heap_key(&vocab, key, c));
                }
            }
        }
        Ok(vocab)
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<usize>) {
        let mut syms: Vec<usize> = piece.iter().map(|&b| BYTE_BASE + b as usize).collect();
        while syms.len() > 1 {
            let best = syms.windows(2).filter_map(|p| self.merge_rank.get(&(p[0], p[1])).copied()).min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            syms = apply_merge(&syms, pair, BASE_VOCAB + rank);
        }
        out.extend(syms);
    }

    /// `[CLS]` followed by the subword ids of `text`, truncated to
    /// `max_len` ids.
    pub fn encode(&self, text: &[u8], max_len: usize) -> Vec<usize> {
        let mut out = vec![CLS];
        for p in pieces(text) {
            if out.len() >= max_len {
                break;
            }
            self.encode_piece(p, &mut out);
        }
        out.truncate(max_len.max(1));
        out
    }

    /// Concatenated bytes of `ids`; special tokens contribute nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id >= self.tokens.len() {
                return Err(Error::Input(format!("unknown token id {id}")));
            }
            if !Self::is_special(id) {
                out.extend_from_slice(&self.tokens[id]);
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            if Self::is_special(id) {
                s.push_str(SPECIAL_TOKENS[id]);
            } else {
                escape_into(t, &mut s);
            }
            s.push('\n');
        }
        s.push('\n');
        for &(l, r) in &self.merges {
            escape_into(&self.tokens[l], &mut s);
            s.push('\t');
            escape_into(&self.tokens[r], &mut s);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("vocabulary file: {msg}"));
        let mut lines = text.split('\n');
        let mut tokens: Vec<Vec<u8>> = Vec::new();
        for (id, line) in lines.by_ref().enumerate() {
            if line.is_empty() {
                break;
            }
            if id < BYTE_BASE {
                if line != SPECIAL_TOKENS[id] {
                    return Err(bad(format!("line {} should be {}", id + 1, SPECIAL_TOKENS[id])));
                }
                tokens.push(line.as_bytes().to_vec());
            } else {
                tokens.push(unescape(line).map_err(|e| bad(format!("line {}: {e}", id + 1)))?);
            }
        }
        let mut vocab = Vocabulary::bytes_only();
        if tokens.len() < BASE_VOCAB || tokens[..BASE_VOCAB] != vocab.tokens[..] {
            return Err(bad("missing or misordered base tokens".into()));
        }
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once('\t').ok_or_else(|| bad(format!("merge {} lacks a tab", n + 1)))?;
            let (l, r) = (unescape(l).map_err(&bad)?, unescape(r).map_err(&bad)?);
            let li = vocab.id_of(&l).ok_or_else(|| bad(format!("merge {} uses unknown left token", n + 1)))?;
            let ri = vocab.id_of(&r).ok_or_else(|| bad(format!("merge {} uses unknown right token", n + 1)))?;
            let id = vocab.push_merge(li, ri);
            if tokens.get(id) != Some(&vocab.tokens[id]) {
                return Err(bad(format!("merge {} does not rebuild token {id}", n + 1)));
            }
        }
        if vocab.tokens.len() != tokens.len() {
            return Err(bad(format!("{} tokens listed but merges build {}", tokens.len(), vocab.tokens.len())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_string(path)?;
        Vocabulary::from_text(&text)
    }
}

fn apply_merge(syms: &[usize], pair: (usize, usize), id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn escape_into(bytes: &[u8], out: &mut String) {
    use std::fmt::Write;
    for chunk in bytes.utf8_chunks() {
        for ch in chunk.valid().chars() {
            match ch {
                '\\' => out.push_str("\\\\"),
                c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                    let _ = write!(out, "\\x{:02X}", c as u32);
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02X}");
        }
    }
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        match b.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') if i + 4 <= b.len() => {
                let hex = std::str::from_utf8(&b[i + 2..i + 4]).map_err(|_| "bad escape".to_string())?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| format!("bad escape \\x{hex}"))?);
                i += 4;
            }
            _ => return Err(format!("dangling escape in {s:?}")),
        }
    }
    Ok(out)
}
