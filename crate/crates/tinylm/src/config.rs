//! Run configuration files and the bundled presets.

use std::fmt::Write as _;
use std::path::Path;

use tinylm_core::tokenizer::MASK_ID;
use tinylm_core::training::{MaskingPolicy, TrainConfig};
use tinylm_core::{ModelConfig, Objective};

use crate::error::{CliError, Result};
use crate::kv::KvFile;

pub const BEBESHKA: &str = include_str!("../presets/bebeshka.cfg");
pub const ZLATA: &str = include_str!("../presets/zlata.cfg");
pub const DEFAULT_SPACE: &str = include_str!("../presets/space.txt");

pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "bebeshka" => Some(BEBESHKA),
        "zlata" => Some(ZLATA),
        _ => None,
    }
}

/// Model, optimisation and masking settings for a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Packing window; defaults to the model's context length.
    pub window: usize,
    pub masking: MaskingPolicy,
    /// Case folding for a tokenizer trained by the run.
    pub lowercase: bool,
}

impl RunConfig {
    /// Parses `key = value` text. Unset keys come from `preset` (when given)
    /// or from the bebeshka preset.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text, origin)?;
        let base = match kv.take_str("preset") {
            Some(name) => {
                let t = preset_text(&name).ok_or_else(|| CliError::config(format!("{origin}: unknown preset {name:?}")))?;
                Self::parse(t, &name)?
            }
            None => Self::defaults(),
        };
        Self::apply(base, kv)
    }

    fn defaults() -> Self {
        let model = ModelConfig::bebeshka();
        Self {
            window: model.max_seq_len,
            model,
            train: TrainConfig::pretrain(),
            masking: MaskingPolicy::default(),
            lowercase: false,
        }
    }

    fn apply(mut c: Self, mut kv: KvFile) -> Result<Self> {
        let window_set = kv.take::<usize>("window")?;
        let m = &mut c.model;
        kv.take_into("objective", &mut m.objective)?;
        kv.take_into("vocab_size", &mut m.vocab_size)?;
        kv.take_into("max_seq_len", &mut m.max_seq_len)?;
        kv.take_into("num_layers", &mut m.num_layers)?;
        kv.take_into("num_heads", &mut m.num_heads)?;
        kv.take_into("head_size", &mut m.head_size)?;
        kv.take_into("ffn_size", &mut m.ffn_size)?;
        kv.take_into("activation", &mut m.activation)?;
        kv.take_into("dropout", &mut m.dropout)?;
        kv.take_into("attention_dropout", &mut m.attention_dropout)?;
        kv.take_into("pos_type", &mut m.pos_type)?;
        kv.take_into("tie_lm_head", &mut m.tie_lm_head)?;
        m.mask_token_id = (m.objective == Objective::Mlm).then_some(MASK_ID);
        let t = &mut c.train;
        kv.take_into("learning_rate", &mut t.learning_rate)?;
        kv.take_into("epochs", &mut t.epochs)?;
        kv.take_into("batch_size", &mut t.batch_size)?;
        kv.take_into("grad_accum", &mut t.grad_accum)?;
        kv.take_into("warmup_frac", &mut t.warmup_frac)?;
        kv.take_into("seed", &mut t.seed)?;
        kv.take_into("eval_seed", &mut t.eval_seed)?;
        kv.take_into("weight_decay", &mut t.adam.weight_decay)?;
        kv.take_into("beta1", &mut t.adam.beta1)?;
        kv.take_into("beta2", &mut t.adam.beta2)?;
        kv.take_into("adam_eps", &mut t.adam.eps)?;
        kv.take_into("mask_select_prob", &mut c.masking.select_prob)?;
        kv.take_into("lowercase", &mut c.lowercase)?;
        if let Some(w) = window_set {
            c.window = w;
        } else {
            c.window = c.model.max_seq_len;
        }
        let origin = kv.origin().to_string();
        kv.finish()?;
        c.validate().map_err(|e| CliError::config(format!("{origin}: {}", e.message)))?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.masking.validate()?;
        if self.window < 2 || self.window > self.model.max_seq_len {
            return Err(CliError::config(format!(
                "window {} must lie in [2, max_seq_len = {}]",
                self.window, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    /// A file path, or the name of a bundled preset.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            return Self::parse(&text, spec);
        }
        match preset_text(spec) {
            Some(t) => Self::parse(t, spec),
            None => Err(CliError::new(
                crate::error::Kind::Io,
                format!("{spec}: no such file or bundled preset"),
            )),
        }
    }

    /// Every setting as `key = value` lines; parsing the result gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = model_to_text(&self.model);
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
        kv("window", &self.window);
        kv("learning_rate", &t.learning_rate);
        kv("epochs", &t.epochs);
        kv("batch_size", &t.batch_size);
        kv("grad_accum", &t.grad_accum);
        kv("warmup_frac", &t.warmup_frac);
        kv("seed", &t.seed);
        kv("eval_seed", &t.eval_seed);
        kv("weight_decay", &t.adam.weight_decay);
        kv("beta1", &t.adam.beta1);
        kv("beta2", &t.adam.beta2);
        kv("adam_eps", &t.adam.eps);
        kv("mask_select_prob", &self.masking.select_prob);
        kv("lowercase", &self.lowercase);
        s
    }
}

/// Model-only section of a config file (used by checkpoints).
pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
    kv("objective", &m.objective);
    kv("vocab_size", &m.vocab_size);
    kv("pos_type", &m.pos_type);
    kv("max_seq_len", &m.max_seq_len);
    kv("num_layers", &m.num_layers);
    kv("num_heads", &m.num_heads);
    kv("head_size", &m.head_size);
    kv("ffn_size", &m.ffn_size);
    kv("activation", &m.activation);
    kv("dropout", &m.dropout);
    kv("attention_dropout", &m.attention_dropout);
    kv("tie_lm_head", &m.tie_lm_head);
    s
}

pub fn model_from_text(text: &str, origin: &str) -> Result<ModelConfig> {
    let mut kv = KvFile::parse(text, origin)?;
    for key in MODEL_KEYS {
        if !kv.contains(key) {
            return Err(CliError::format(Path::new(origin), format!("missing key {key:?}")));
        }
    }
    let mut m = ModelConfig::bebeshka();
    kv.take_into("objective", &mut m.objective)?;
    kv.take_into("vocab_size", &mut m.vocab_size)?;
    kv.take_into("pos_type", &mut m.pos_type)?;
    kv.take_into("max_seq_len", &mut m.max_seq_len)?;
    kv.take_into("num_layers", &mut m.num_layers)?;
    kv.take_into("num_heads", &mut m.num_heads)?;
    kv.take_into("head_size", &mut m.head_size)?;
    kv.take_into("ffn_size", &mut m.ffn_size)?;
    kv.take_into("activation", &mut m.activation)?;
    kv.take_into("dropout", &mut m.dropout)?;
    kv.take_into("attention_dropout", &mut m.attention_dropout)?;
    kv.take_into("tie_lm_head", &mut m.tie_lm_head)?;
    kv.finish()?;
    m.mask_token_id = (m.objective == Objective::Mlm).then_some(MASK_ID);
    m.validate()?;
    Ok(m)
}

const MODEL_KEYS: [&str; 12] = [
    "objective",
    "vocab_size",
    "pos_type",
    "max_seq_len",
    "num_layers",
    "num_heads",
    "head_size",
    "ffn_size",
    "activation",
    "dropout",
    "attention_dropout",
    "tie_lm_head",
];
