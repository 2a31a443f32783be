//! Byte-level BPE.
//!
//! Ids `0..256` are the raw bytes, `256..260` the special tokens, and learned
//! merges follow in the order they were learned. A piece that begins with a
//! space byte is a word start; it is displayed with the `Ġ` marker.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BASE_TOKENS: usize = 256;
pub const WORD_START_MARKER: char = 'Ġ';
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

const FORMAT_TAG: &str = "bpe-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Cls,
    Eos,
    Mask,
    Pad,
}

impl Special {
    pub const ALL: [Special; 4] = [Special::Cls, Special::Eos, Special::Mask, Special::Pad];

    pub const fn id(self) -> TokenId {
        BASE_TOKENS as TokenId
            + match self {
                Special::Cls => 0,
                Special::Eos => 1,
                Special::Mask => 2,
                Special::Pad => 3,
            }
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Cls => "[CLS]",
            Special::Eos => "[EOS]",
            Special::Mask => "[MASK]",
            Special::Pad => "[PAD]",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

pub const CLS: TokenId = Special::Cls.id();
pub const EOS: TokenId = Special::Eos.id();
pub const MASK: TokenId = Special::Mask.id();
pub const PAD: TokenId = Special::Pad.id();
pub const FIRST_MERGE_ID: TokenId = BASE_TOKENS as TokenId + Special::ALL.len() as TokenId;

pub fn is_special(id: TokenId) -> bool {
    (BASE_TOKENS as TokenId..FIRST_MERGE_ID).contains(&id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Bytes(Vec<u8>),
    Special(Special),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
}

/// Learned merge rules and the token ↔ id maps.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    merges: Vec<Merge>,
    id_to_token: Vec<Token>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::base()
    }
}

impl Vocabulary {
    /// The 256 byte tokens plus the specials, with no merges.
    pub fn base() -> Self {
        let mut id_to_token: Vec<Token> = (0..=255u8).map(|b| Token::Bytes(vec![b])).collect();
        id_to_token.extend(Special::ALL.iter().map(|&s| Token::Special(s)));
        let token_to_id = (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        Self {
            merges: Vec::new(),
            id_to_token,
            token_to_id,
            ranks: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&Token> {
        self.id_to_token.get(id as usize)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    fn bytes_of(&self, id: TokenId) -> &[u8] {
        match &self.id_to_token[id as usize] {
            Token::Bytes(b) => b,
            Token::Special(_) => &[],
        }
    }

    /// Registers a merge, reusing the id when the concatenation is already a
    /// token.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let mut bytes = self.bytes_of(left).to_vec();
        bytes.extend_from_slice(self.bytes_of(right));
        let result = match self.token_to_id.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.id_to_token.len() as TokenId;
                self.id_to_token.push(Token::Bytes(bytes.clone()));
                self.token_to_id.insert(bytes, id);
                id
            }
        };
        self.ranks
            .entry((left, right))
            .or_insert((self.merges.len(), result));
        self.merges.push(Merge {
            left,
            right,
            result,
        });
        result
    }

    /// Human-readable piece, with a leading space shown as `Ġ`.
    pub fn piece(&self, id: TokenId) -> Option<String> {
        match self.token(id)? {
            Token::Special(s) => Some(s.name().to_string()),
            Token::Bytes(b) => {
                let s = String::from_utf8_lossy(b);
                Some(match s.strip_prefix(' ') {
                    Some(rest) => format!("{WORD_START_MARKER}{rest}"),
                    None => s.into_owned(),
                })
            }
        }
    }

    /// Non-special ids, the pool for random-token replacement.
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&i| !is_special(i))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{FORMAT_TAG} v{FORMAT_VERSION} vocab_size={} merges={} specials={}",
            self.len(),
            self.merges.len(),
            Special::ALL.len()
        );
        for m in &self.merges {
            let _ = writeln!(
                out,
                "merge {} {}",
                hex::encode(self.bytes_of(m.left)),
                hex::encode(self.bytes_of(m.right))
            );
        }
        for s in Special::ALL {
            let _ = writeln!(out, "special {} {}", s.name(), s.id());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::VocabFormat(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(FORMAT_TAG) {
            return Err(bad(1, "missing format tag"));
        }
        if fields.next() != Some(&format!("v{FORMAT_VERSION}")) {
            return Err(bad(1, "unsupported version"));
        }
        let mut header_val = |key: &str| -> Result<usize> {
            let f = fields.next().ok_or_else(|| bad(1, "truncated header"))?;
            f.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, &format!("expected {key}=<n>")))
        };
        let vocab_size = header_val("vocab_size")?;
        let n_merges = header_val("merges")?;
        let n_specials = header_val("specials")?;

        let mut vocab = Self::base();
        let mut specials_seen = 0;
        for (ln, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["merge", l, r] => {
                    if specials_seen > 0 {
                        return Err(bad(ln, "merge after special table"));
                    }
                    let decode = |h: &str| hex::decode(h).map_err(|_| bad(ln, "bad hex"));
                    let (lb, rb) = (decode(l)?, decode(r)?);
                    let left = vocab
                        .id_of(&lb)
                        .ok_or_else(|| bad(ln, "unknown left piece"))?;
                    let right = vocab
                        .id_of(&rb)
                        .ok_or_else(|| bad(ln, "unknown right piece"))?;
                    vocab.push_merge(left, right);
                }
                ["special", name, id] => {
                    let s = Special::from_name(name).ok_or_else(|| bad(ln, "unknown special"))?;
                    if id.parse::<TokenId>().ok() != Some(s.id()) {
                        return Err(bad(ln, "special token id does not match the fixed layout"));
                    }
                    specials_seen += 1;
                }
                [] => {}
                _ => return Err(bad(ln, "unrecognized line")),
            }
        }
        if vocab.merges.len() != n_merges {
            return Err(Error::VocabFormat(format!(
                "header declares {n_merges} merges, file has {}",
                vocab.merges.len()
            )));
        }
        if specials_seen != n_specials || n_specials != Special::ALL.len() {
            return Err(Error::VocabFormat("special-token table incomplete".into()));
        }
        if vocab.len() != vocab_size {
            return Err(Error::VocabFormat(format!(
                "header declares vocab_size={vocab_size}, merges rebuild {}",
                vocab.len()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else {
        CharClass::Other
    }
}

/// Splits text into merge domains: runs of letters, digits, or other symbols,
/// each optionally carrying one leading space; whitespace runs keep their
/// final space for the following word. Concatenating the chunks gives back
/// the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let start = i;
        let c = chars[i].1;
        if c == ' ' && i + 1 < n && !chars[i + 1].1.is_whitespace() {
            i += 1;
            let cls = class_of(chars[i].1);
            while i < n && class_of(chars[i].1) == cls {
                i += 1;
            }
        } else if c.is_whitespace() {
            let mut j = i;
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < n && j - i > 1 && chars[j - 1].1 == ' ' {
                j -= 1;
            }
            i = j;
        } else {
            let cls = class_of(c);
            while i < n && class_of(chars[i].1) == cls {
                i += 1;
            }
        }
        out.push(&text[byte_at(start)..byte_at(i)]);
    }
    out
}

fn merge_pair(word: &mut Vec<TokenId>, left: TokenId, right: TokenId, result: TokenId) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair
/// until the vocabulary reaches `target_vocab_size` or no pair occurs at
/// least twice. Ties go to the lexicographically smallest `(left, right)`
/// byte strings.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], target_vocab_size: usize) -> Result<Vocabulary> {
    if target_vocab_size <= FIRST_MERGE_ID as usize {
        return Err(Error::invalid(format!(
            "target vocabulary size {target_vocab_size} must exceed {} (bytes + specials)",
            FIRST_MERGE_ID
        )));
    }
    if texts.is_empty() {
        return Err(Error::invalid("train_bpe: no training texts"));
    }
    let mut chunk_counts: HashMap<&str, usize> = HashMap::new();
    for t in texts {
        for chunk in pre_tokenize(t.as_ref()) {
            *chunk_counts.entry(chunk).or_default() += 1;
        }
    }
    let mut chunks: Vec<(&str, usize)> = chunk_counts.into_iter().collect();
    chunks.sort_unstable();
    let mut words: Vec<(Vec<TokenId>, usize)> = chunks
        .into_iter()
        .map(|(c, n)| (c.bytes().map(TokenId::from).collect(), n))
        .collect();

    let mut vocab = Vocabulary::base();
    while vocab.len() < target_vocab_size {
        let mut pair_counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += n;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (vocab.bytes_of(pa.0), vocab.bytes_of(pa.1));
                let kb = (vocab.bytes_of(pb.0), vocab.bytes_of(pb.1));
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let result = vocab.push_merge(left, right);
        for (w, _) in &mut words {
            if w.len() >= 2 {
                merge_pair(w, left, right, result);
            }
        }
    }
    Ok(vocab)
}

/// Lossless encoding: bytes of each pre-token chunk merged by learned rank.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut out = Vec::new();
    for chunk in pre_tokenize(text) {
        let mut word: Vec<TokenId> = chunk.bytes().map(TokenId::from).collect();
        while word.len() >= 2 {
            let best = word
                .windows(2)
                .filter_map(|p| {
                    vocab
                        .ranks
                        .get(&(p[0], p[1]))
                        .map(|&(r, res)| (r, p[0], p[1], res))
                })
                .min();
            let Some((_, l, r, res)) = best else { break };
            merge_pair(&mut word, l, r, res);
        }
        out.extend(word);
    }
    out
}

/// Raw bytes of a token sequence; specials contribute nothing.
pub fn decode_bytes(ids: &[TokenId], vocab: &Vocabulary) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &id in ids {
        match vocab.token(id) {
            Some(Token::Bytes(b)) => out.extend_from_slice(b),
            Some(Token::Special(_)) => {}
            None => return Err(Error::UnknownTokenId(id)),
        }
    }
    Ok(out)
}

pub fn decode(ids: &[TokenId], vocab: &Vocabulary) -> Result<String> {
    String::from_utf8(decode_bytes(ids, vocab)?).map_err(|_| Error::InvalidUtf8)
}

/// Framed token sequence: `[CLS] t₁ … tₖ [EOS]` followed by padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// `true` where the position is attended (not padding).
    pub attention_mask: Vec<bool>,
    /// Number of non-pad positions.
    pub length: usize,
}

impl TokenSequence {
    /// Content positions: everything attended except CLS and EOS.
    pub fn content_positions(&self) -> std::ops::Range<usize> {
        1..self.length.saturating_sub(1)
    }

    pub fn content_len(&self) -> usize {
        self.length.saturating_sub(2)
    }

    /// Extends (never shrinks) the padding to `len` positions.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.attention_mask.push(false);
        }
    }

    pub fn attended_rows(&self) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&i| self.attention_mask[i])
            .collect()
    }
}

fn framed(ids: &[TokenId], max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::invalid(format!("frame: max_len {max_len} < 3")));
    }
    let keep = ids.len().min(max_len - 2);
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS);
    out.extend_from_slice(&ids[..keep]);
    out.push(EOS);
    let length = out.len();
    Ok(TokenSequence {
        attention_mask: vec![true; length],
        ids: out,
        length,
    })
}

/// Adds CLS/EOS, drops the tail beyond `max_len`, pads to `max_len`.
pub fn frame(ids: &[TokenId], max_len: usize) -> Result<TokenSequence> {
    let mut seq = framed(ids, max_len)?;
    seq.pad_to(max_len);
    Ok(seq)
}

/// Like [`frame`] but without padding; batches pad to their longest member.
pub fn frame_unpadded(ids: &[TokenId], max_len: usize) -> Result<TokenSequence> {
    framed(ids, max_len)
}
