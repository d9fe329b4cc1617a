//! Corpus containers, statistics and deterministic splits.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tokenizer::{Tokenizer, NUM_SPECIAL};

const STREAM_SPLIT: u64 = 10 << 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source: String,
    /// One sentence per line.
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let c = Self { documents };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.documents.iter().enumerate() {
            if d.lines.is_empty() {
                return Err(Error::Empty(alloc::format!("document {:?}", d.source)));
            }
            if self.documents[..i].iter().any(|o| o.source == d.source) {
                return Err(Error::Invalid(alloc::format!("duplicate source tag {:?}", d.source)));
            }
        }
        Ok(())
    }

    pub fn num_lines(&self) -> usize {
        self.documents.iter().map(|d| d.lines.len()).sum()
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().flat_map(|d| d.lines.iter().map(String::as_str))
    }
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201C}', '\u{201D}', '\u{2018}', '\u{2019}', '\u{00AB}', '\u{00BB}'];

/// True when the last character that is neither whitespace nor a quote is `?`.
pub fn is_question(line: &str) -> bool {
    line.trim_end_matches(|c: char| c.is_whitespace() || QUOTES.contains(&c))
        .ends_with('?')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub sentences: usize,
    /// Mean tokens per line, specials excluded.
    pub avg_tokens: f64,
    pub question_proportion: f64,
    /// Share of all lines.
    pub corpus_proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sources: Vec<SourceStats>,
    pub total: SourceStats,
}

impl CorpusStats {
    /// Tab-separated table: source, sentences, average length, question
    /// proportion, corpus proportion; totals last.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("source\tsentences\tavg_tokens\tquestions\tproportion\n");
        for s in self.sources.iter().chain(core::iter::once(&self.total)) {
            out.push_str(&alloc::format!(
                "{}\t{}\t{:.2}\t{:.4}\t{:.4}\n",
                s.source,
                s.sentences,
                s.avg_tokens,
                s.question_proportion,
                s.corpus_proportion
            ));
        }
        out
    }
}

/// Per-source and total statistics.
pub fn compute_stats(corpus: &Corpus, tokenizer: &Tokenizer) -> Result<CorpusStats> {
    let total_lines = corpus.num_lines();
    if total_lines == 0 {
        return Err(Error::Empty("corpus".into()));
    }
    let (mut all_tokens, mut all_q) = (0usize, 0usize);
    let mut sources = Vec::with_capacity(corpus.documents.len());
    for d in &corpus.documents {
        let n = d.lines.len();
        let tokens: usize = d
            .lines
            .iter()
            .map(|l| tokenizer.encode(l).iter().filter(|&&id| id as usize >= NUM_SPECIAL).count())
            .sum();
        let q = d.lines.iter().filter(|l| is_question(l)).count();
        all_tokens += tokens;
        all_q += q;
        sources.push(SourceStats {
            source: d.source.clone(),
            sentences: n,
            avg_tokens: tokens as f64 / n.max(1) as f64,
            question_proportion: q as f64 / n.max(1) as f64,
            corpus_proportion: n as f64 / total_lines as f64,
        });
    }
    Ok(CorpusStats {
        sources,
        total: SourceStats {
            source: "total".into(),
            sentences: total_lines,
            avg_tokens: all_tokens as f64 / total_lines as f64,
            question_proportion: all_q as f64 / total_lines as f64,
            corpus_proportion: 1.0,
        },
    })
}

/// Assigns each document's lines to parts by a seeded shuffle cut at the
/// cumulative `fractions`; lines keep their original order inside a part.
/// Documents left without lines in a part are omitted from it.
pub fn split(corpus: &Corpus, fractions: &[f64], seed: u64) -> Result<Vec<Corpus>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::config("fractions", "must be positive"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", alloc::format!("must sum to 1, got {sum}")));
    }
    let mut parts: Vec<Corpus> = fractions.iter().map(|_| Corpus::default()).collect();
    for (di, d) in corpus.documents.iter().enumerate() {
        let n = d.lines.len();
        let mut order: Vec<usize> = (0..n).collect();
        RngState::derive(seed, STREAM_SPLIT + di as u64).shuffle(&mut order);
        let mut start = 0;
        let mut cum = 0.0;
        for (k, &f) in fractions.iter().enumerate() {
            cum += f;
            let end = if k + 1 == fractions.len() {
                n
            } else {
                (libm::round(cum * n as f64) as usize).clamp(start, n)
            };
            if end > start {
                let mut picked = order[start..end].to_vec();
                picked.sort_unstable();
                parts[k].documents.push(Document {
                    source: d.source.clone(),
                    lines: picked.iter().map(|&i| d.lines[i].clone()).collect(),
                });
            }
            start = end;
        }
    }
    Ok(parts)
}
