//! Byte-level BPE.
//!
//! Raw bytes are first remapped to printable characters (the GPT-2 table:
//! the 188 printable bytes map to themselves, the remaining 68 to U+0100
//! onwards in byte order), so every token has a readable string form and a
//! merges file never contains whitespace inside a token.
//!
//! Id layout: the five special tokens occupy `0..5`, byte symbols `5..261`
//! in byte order, merge products follow in rank order.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SPECIAL: usize = 5;
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
/// Id of byte 0; byte `b` has id `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = NUM_SPECIAL as u32;
/// Smallest legal vocabulary: specials plus all 256 bytes.
pub const MIN_VOCAB: usize = NUM_SPECIAL + 256;

pub const DEFAULT_SPECIALS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub lowercase: bool,
    /// In role order: pad, unk, bos, eos, mask.
    pub special_tokens: [String; NUM_SPECIAL],
}

impl TokenizerConfig {
    pub fn new(vocab_size: usize, lowercase: bool) -> Self {
        Self {
            vocab_size,
            lowercase,
            special_tokens: DEFAULT_SPECIALS.map(String::from),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::config(
                "vocab_size",
                format!("{} is below the byte alphabet plus specials ({MIN_VOCAB})", self.vocab_size),
            ));
        }
        let distinct: BTreeSet<&str> = self.special_tokens.iter().map(String::as_str).collect();
        if distinct.len() != NUM_SPECIAL {
            return Err(Error::config("special_tokens", "special tokens must be distinct"));
        }
        for s in &self.special_tokens {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::config(
                    "special_tokens",
                    format!("{s:?} must be non-empty and contain no whitespace"),
                ));
            }
            if s.chars().count() == 1 && byte_for_char(s.chars().next().unwrap()).is_some() {
                return Err(Error::config(
                    "special_tokens",
                    format!("{s:?} collides with a byte symbol"),
                ));
            }
        }
        Ok(())
    }
}

static BYTE_TO_CHAR: [char; 256] = build_byte_table();

const fn is_printable_byte(b: u8) -> bool {
    matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF)
}

const fn build_byte_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    let mut b = 0usize;
    while b < 256 {
        table[b] = if is_printable_byte(b as u8) {
            b as u8 as char
        } else {
            let c = match char::from_u32(next) {
                Some(c) => c,
                None => panic!("unreachable"),
            };
            next += 1;
            c
        };
        b += 1;
    }
    table
}

/// Printable character standing for byte `b`.
pub fn byte_to_char(b: u8) -> char {
    BYTE_TO_CHAR[b as usize]
}

/// Inverse of [`byte_to_char`].
pub fn byte_for_char(c: char) -> Option<u8> {
    let cp = c as u32;
    if cp < 256 && is_printable_byte(cp as u8) {
        return Some(cp as u8);
    }
    if (256..256 + 68).contains(&cp) {
        let k = (cp - 256) as usize;
        return (0..=255u8).filter(|&b| !is_printable_byte(b)).nth(k);
    }
    None
}

/// Lowercases with one-to-one character mappings only; characters whose
/// lowercase form is several characters are kept.
pub fn fold_case(text: &str) -> String {
    text.chars()
        .map(|c| {
            let mut it = c.to_lowercase();
            match (it.next(), it.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        })
        .collect()
}

/// Applies [`fold_case`] to valid UTF-8 runs and keeps invalid bytes.
fn fold_case_bytes(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        out.extend_from_slice(fold_case(chunk.valid()).as_bytes());
        out.extend_from_slice(chunk.invalid());
    }
    out
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0B | 0x0C)
}

/// Splits into words. A word is a maximal non-whitespace run plus at most
/// one preceding ASCII space; whitespace not absorbed that way forms its own
/// pieces.
pub fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let n = bytes.len();
    let mut i = 0;
    while i < n {
        if is_space(bytes[i]) {
            let start = i;
            while i < n && is_space(bytes[i]) {
                i += 1;
            }
            // Hand the final space to the following word.
            let glue = i < n && bytes[i - 1] == b' ';
            let end = if glue { i - 1 } else { i };
            if end > start {
                out.push(&bytes[start..end]);
            }
            if glue {
                let word_start = i - 1;
                while i < n && !is_space(bytes[i]) {
                    i += 1;
                }
                out.push(&bytes[word_start..i]);
            }
        } else {
            let start = i;
            while i < n && !is_space(bytes[i]) {
                i += 1;
            }
            out.push(&bytes[start..i]);
        }
    }
    out
}

/// Id ↔ string table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl ByteVocab {
    fn base(specials: &[String; NUM_SPECIAL]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for s in specials {
            v.push(s.clone());
        }
        for b in 0..=255u8 {
            v.push(byte_to_char(b).to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Merge rules in rank order.
pub type MergeList = Vec<(String, String)>;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: TokenizerConfig,
    vocab: ByteVocab,
    merges: MergeList,
    /// `(left, right) -> (rank, product id)`
    ranks: BTreeMap<(u32, u32), (u32, u32)>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.merges == other.merges
    }
}

impl Tokenizer {
    /// Rebuilds a tokenizer from its vocabulary and merges, checking that ids
    /// follow the fixed layout and every merge is applicable at its rank.
    pub fn from_parts(config: TokenizerConfig, tokens: Vec<String>, merges: MergeList) -> Result<Self> {
        config.validate()?;
        let base = ByteVocab::base(&config.special_tokens);
        if tokens.len() < MIN_VOCAB || tokens[..MIN_VOCAB] != base.tokens[..] {
            return Err(Error::Invalid(
                "vocabulary must start with the special tokens followed by the 256 byte symbols".into(),
            ));
        }
        if tokens.len() > config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocabulary has {} entries but vocab_size is {}",
                tokens.len(),
                config.vocab_size
            )));
        }
        let mut vocab = base;
        for t in &tokens[MIN_VOCAB..] {
            if vocab.index.contains_key(t) {
                return Err(Error::Invalid(format!("duplicate token {t:?}")));
            }
            vocab.push(t.clone());
        }
        // Replay merges to check that each one only uses tokens that exist by its rank.
        let mut available: BTreeSet<u32> = (0..MIN_VOCAB as u32).collect();
        let mut ranks = BTreeMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                vocab
                    .id(s)
                    .filter(|id| available.contains(id) && *id >= BYTE_OFFSET)
                    .ok_or_else(|| Error::Invalid(format!("merge {rank} references unknown token {s:?}")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let product = format!("{l}{r}");
            let pi = vocab
                .id(&product)
                .ok_or_else(|| Error::Invalid(format!("merge product {product:?} missing from vocabulary")))?;
            if ranks.insert((li, ri), (rank as u32, pi)).is_some() {
                return Err(Error::Invalid(format!("duplicate merge {l:?} {r:?}")));
            }
            available.insert(pi);
        }
        if available.len() != vocab.len() {
            return Err(Error::Invalid("vocabulary contains tokens no merge produces".into()));
        }
        Ok(Self {
            config,
            vocab,
            merges,
            ranks,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ByteVocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeList {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let folded;
        let bytes = if self.config.lowercase {
            folded = fold_case_bytes(bytes);
            &folded[..]
        } else {
            bytes
        };
        let mut out = Vec::with_capacity(bytes.len());
        for word in pre_tokenize(bytes) {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, a, b, id)) = best else { break };
            merge_pair(&mut syms, a, b, id);
        }
        out.extend_from_slice(&syms);
    }

    /// Token strings of an encoding, for inspection and diffs.
    pub fn segment(&self, text: &str) -> Vec<String> {
        self.encode(text)
            .into_iter()
            .map(|id| self.vocab.tokens[id as usize].clone())
            .collect()
    }

    /// Raw bytes of a token sequence, special tokens dropped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let token = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab.len(),
            })?;
            if (id as usize) < NUM_SPECIAL {
                continue;
            }
            for c in token.chars() {
                out.push(byte_for_char(c).expect("non-special tokens are byte symbols"));
            }
        }
        Ok(out)
    }

    /// Text of a token sequence; invalid UTF-8 is replaced by U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

fn merge_pair(syms: &mut Vec<u32>, a: u32, b: u32, id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < syms.len() {
        if r + 1 < syms.len() && syms[r] == a && syms[r + 1] == b {
            syms[w] = id;
            r += 2;
        } else {
            syms[w] = syms[r];
            r += 1;
        }
        w += 1;
    }
    syms.truncate(w);
}

struct Word {
    syms: Vec<u32>,
    freq: u64,
}

/// Heap entry: highest count first, then the lexicographically smallest
/// `(left, right)` string pair.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    strings: Reverse<(String, String)>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.strings.cmp(&other.strings))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns merges greedily by pair frequency until the vocabulary reaches
/// `config.vocab_size` or no pair occurs at least twice.
///
/// Pairs are counted inside words only, weighted by word frequency. A merge
/// whose product string already exists reuses that id; a merge whose product
/// would spell a special token is never taken.
pub fn train_bpe<I, S>(lines: I, config: &TokenizerConfig) -> Result<Tokenizer>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    config.validate()?;
    let mut word_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for line in lines {
        let folded;
        let bytes = if config.lowercase {
            folded = fold_case_bytes(line.as_ref());
            &folded[..]
        } else {
            line.as_ref()
        };
        for w in pre_tokenize(bytes) {
            *word_counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Empty("tokenizer training corpus".into()));
    }
    let mut words: Vec<Word> = word_counts
        .into_iter()
        .map(|(w, freq)| Word {
            syms: w.iter().map(|&b| BYTE_OFFSET + b as u32).collect(),
            freq,
        })
        .collect();

    let mut vocab = ByteVocab::base(&config.special_tokens);
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut occurs: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.syms.windows(2) {
            let key = (p[0], p[1]);
            *counts.entry(key).or_insert(0) += w.freq;
            let list = occurs.entry(key).or_default();
            if list.last() != Some(&wi) {
                list.push(wi);
            }
        }
    }
    let candidate = |vocab: &ByteVocab, pair: (u32, u32), count: u64| Candidate {
        count,
        strings: Reverse((
            vocab.tokens[pair.0 as usize].clone(),
            vocab.tokens[pair.1 as usize].clone(),
        )),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &count)| candidate(&vocab, pair, count))
        .collect();

    let specials: BTreeSet<&str> = config.special_tokens.iter().map(String::as_str).collect();
    let mut merges = MergeList::new();
    let mut touched = vec![usize::MAX; words.len()];
    while vocab.len() < config.vocab_size {
        let Some(top) = heap.pop() else { break };
        if counts.get(&top.pair).copied().unwrap_or(0) != top.count {
            continue;
        }
        if top.count < 2 {
            break;
        }
        let (a, b) = top.pair;
        let Reverse((left, right)) = top.strings;
        let product = format!("{left}{right}");
        if specials.contains(product.as_str()) {
            counts.remove(&top.pair);
            continue;
        }
        let id = match vocab.id(&product) {
            Some(existing) => existing,
            None => vocab.push(product),
        };
        let rank = merges.len();
        merges.push((left, right));
        counts.remove(&top.pair);

        let mut changed: BTreeSet<(u32, u32)> = BTreeSet::new();
        for wi in occurs.remove(&top.pair).unwrap_or_default() {
            if touched[wi] == rank {
                continue;
            }
            touched[wi] = rank;
            let w = &mut words[wi];
            if !w.syms.windows(2).any(|p| p[0] == a && p[1] == b) {
                continue;
            }
            for p in w.syms.windows(2) {
                let key = (p[0], p[1]);
                if key == (a, b) {
                    continue;
                }
                if let Some(c) = counts.get_mut(&key) {
                    *c -= w.freq;
                    if *c == 0 {
                        counts.remove(&key);
                    }
                }
                changed.insert(key);
            }
            merge_pair(&mut w.syms, a, b, id);
            for p in w.syms.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_insert(0) += w.freq;
                changed.insert(key);
                let list = occurs.entry(key).or_default();
                if list.last() != Some(&wi) {
                    list.push(wi);
                }
            }
        }
        for key in changed {
            if let Some(&c) = counts.get(&key) {
                heap.push(candidate(&vocab, key, c));
            }
        }
    }

    let tokens = vocab.tokens.clone();
    Tokenizer::from_parts(config.clone(), tokens, merges)
}

/// Outcome of comparing two tokenizers line by line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub lines: usize,
    pub matching: usize,
    /// `matching / lines`; 1.0 for an empty corpus.
    pub match_rate: f64,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub line: usize,
    pub text: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

/// Compares the token-string segmentations of every line, keeping up to
/// `max_samples` mismatching lines.
pub fn diff_tokenizations<I, S>(lines: I, a: &Tokenizer, b: &Tokenizer, max_samples: usize) -> DiffReport
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut report = DiffReport {
        lines: 0,
        matching: 0,
        match_rate: 1.0,
        mismatches: Vec::new(),
    };
    for (i, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        report.lines += 1;
        let (sa, sb) = (a.segment(line), b.segment(line));
        if sa == sb {
            report.matching += 1;
        } else if report.mismatches.len() < max_samples {
            report.mismatches.push(Mismatch {
                line: i + 1,
                text: line.to_string(),
                left: sa,
                right: sb,
            });
        }
    }
    if report.lines > 0 {
        report.match_rate = report.matching as f64 / report.lines as f64;
    }
    report
}
