//! On-disk formats: tokenizer directories, checkpoints and text corpora.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use tinylm_core::data::{Corpus, Document};
use tinylm_core::model::param_manifest;
use tinylm_core::{ModelConfig, NamedTensor, Tensor, Tokenizer, TokenizerConfig, TransformerModel};

use crate::config::{model_from_text, model_to_text};
use crate::error::{CliError, IoContext, Result};
use crate::kv::KvFile;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";
pub const TOKENIZER_CFG: &str = "tokenizer.cfg";
pub const MODEL_CFG: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TOKENIZER_DIR: &str = "tokenizer";

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(contents).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// `vocab.txt` holds `id<TAB>token` lines; `merges.txt` holds `left right`
/// lines in rank order.
pub fn save_tokenizer(tok: &Tokenizer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut vocab = String::new();
    for (i, t) in tok.vocab().tokens().iter().enumerate() {
        vocab.push_str(&format!("{i}\t{t}\n"));
    }
    let mut merges = String::new();
    for (l, r) in tok.merges() {
        merges.push_str(&format!("{l} {r}\n"));
    }
    let cfg = tok.config();
    let mut text = format!("vocab_size = {}\nlowercase = {}\n", cfg.vocab_size, cfg.lowercase);
    for (role, s) in ["pad", "unk", "bos", "eos", "mask"].iter().zip(&cfg.special_tokens) {
        text.push_str(&format!("{role}_token = {s}\n"));
    }
    write_atomic(&dir.join(VOCAB_FILE), vocab.as_bytes())?;
    write_atomic(&dir.join(MERGES_FILE), merges.as_bytes())?;
    write_atomic(&dir.join(TOKENIZER_CFG), text.as_bytes())
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let cfg_path = dir.join(TOKENIZER_CFG);
    let mut kv = KvFile::read(&cfg_path)?;
    let mut config = TokenizerConfig::new(0, false);
    config.vocab_size = kv
        .take("vocab_size")?
        .ok_or_else(|| CliError::format(&cfg_path, "missing vocab_size"))?;
    kv.take_into("lowercase", &mut config.lowercase)?;
    for (role, slot) in ["pad", "unk", "bos", "eos", "mask"].iter().zip(config.special_tokens.iter_mut()) {
        if let Some(s) = kv.take_str(&format!("{role}_token")) {
            *slot = s;
        }
    }
    kv.finish()?;

    let vocab_path = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&vocab_path).at(&vocab_path)?;
    let mut tokens = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || CliError::format(&vocab_path, format!("line {}: expected `id<TAB>token`", n + 1));
        let (id, tok) = line.split_once('\t').ok_or_else(bad)?;
        if id.parse::<usize>().map_err(|_| bad())? != n {
            return Err(CliError::format(&vocab_path, format!("line {}: ids must be consecutive from 0", n + 1)));
        }
        tokens.push(tok.to_string());
    }

    let merges_path = dir.join(MERGES_FILE);
    let text = fs::read_to_string(&merges_path).at(&merges_path)?;
    let mut merges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (l, r) = line
            .split_once(' ')
            .ok_or_else(|| CliError::format(&merges_path, format!("line {}: expected `left right`", n + 1)))?;
        merges.push((l.to_string(), r.to_string()));
    }
    Tokenizer::from_parts(config, tokens, merges).map_err(|e| CliError::format(dir, e))
}

/// A model plus the tokenizer it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub tokenizer: Tokenizer,
}

/// Layout: `config.txt`, `manifest.txt` (`name<TAB>dims<TAB>offset` with
/// offsets in f32 elements), `weights.bin` (little-endian f32) and a
/// `tokenizer/` directory.
pub fn save_checkpoint(model: &TransformerModel, tokenizer: &Tokenizer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = String::new();
    let mut weights = Vec::new();
    let mut offset = 0usize;
    for p in model.params() {
        let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{}\t{}\t{offset}\n", p.name, dims.join("x")));
        for v in p.tensor.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.tensor.numel();
    }
    write_atomic(&dir.join(MODEL_CFG), model_to_text(model.config()).as_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    write_atomic(&dir.join(WEIGHTS_FILE), &weights)?;
    save_tokenizer(tokenizer, &dir.join(TOKENIZER_DIR))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_path = dir.join(MODEL_CFG);
    let text = fs::read_to_string(&cfg_path).at(&cfg_path)?;
    let config: ModelConfig = model_from_text(&text, &cfg_path.display().to_string())?;

    let man_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&man_path).at(&man_path)?;
    let w_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&w_path).at(&w_path)?;
    if bytes.len() % 4 != 0 {
        return Err(CliError::format(&w_path, "length is not a multiple of 4"));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let expected = param_manifest(&config);
    let mut params = Vec::with_capacity(expected.len());
    let mut lines = manifest.lines();
    for (name, shape) in &expected {
        let line = lines
            .next()
            .ok_or_else(|| CliError::format(&man_path, format!("missing entry for {name}")))?;
        let bad = |m: &str| CliError::format(&man_path, format!("{name}: {m}"));
        let mut cols = line.split('\t');
        let (Some(n), Some(dims), Some(off), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad("expected `name<TAB>dims<TAB>offset`"));
        };
        if n != name {
            return Err(bad(&format!("found {n:?} in its place")));
        }
        let dims: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad dims"))?;
        if &dims != shape {
            return Err(bad(&format!("shape {dims:?} does not match config shape {shape:?}")));
        }
        let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
        let numel: usize = shape.iter().product();
        let data = floats
            .get(off..off + numel)
            .ok_or_else(|| CliError::format(&w_path, format!("{name}: data out of range")))?;
        params.push(NamedTensor {
            name: name.clone(),
            tensor: Tensor::new(shape.clone(), data.to_vec())?,
        });
    }
    if lines.next().is_some() {
        return Err(CliError::format(&man_path, "extra entries"));
    }
    let model = TransformerModel::from_params(config, params)?;
    let tokenizer = load_tokenizer(&dir.join(TOKENIZER_DIR))?;
    if tokenizer.vocab_size() > model.config().vocab_size {
        return Err(CliError::format(dir, "tokenizer is larger than the model vocabulary"));
    }
    Ok(Checkpoint { model, tokenizer })
}

/// Decodes bytes as UTF-8, replacing invalid sequences. Returns the text and
/// the number of replacements made.
pub fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut replaced = 0;
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            out.push(char::REPLACEMENT_CHARACTER);
            replaced += 1;
        }
    }
    (out, replaced)
}

fn read_document(path: &Path, source: String) -> Result<(Document, usize)> {
    let bytes = fs::read(path).at(path)?;
    let (text, replaced) = decode_lossy(&bytes);
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Ok((Document { source, lines }, replaced))
}

/// Loads one file (source tag = file stem) or every regular file of a
/// directory in name order. One sentence per non-blank line. Files without
/// sentences are skipped. Invalid UTF-8 is replaced and reported on stderr.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .at(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .at(path)?;
        v.retain(|p| p.is_file());
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut docs = Vec::new();
    for f in files {
        let source = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        let (doc, replaced) = read_document(&f, source)?;
        if replaced > 0 {
            eprintln!("warning: {}: replaced {replaced} invalid UTF-8 sequence(s)", f.display());
        }
        if !doc.lines.is_empty() {
            docs.push(doc);
        }
    }
    let corpus = Corpus::new(docs).map_err(|e| CliError::format(path, e))?;
    if corpus.num_lines() == 0 {
        return Err(CliError::new(crate::error::Kind::Data, format!("{}: no sentences", path.display())));
    }
    Ok(corpus)
}
