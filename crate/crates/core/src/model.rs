//! The tiny transformer family: a post-norm encoder with a masked-LM head
//! and a pre-norm decoder with a causal-LM head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tape::{Activation, RelMode, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::MASK_ID;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive bias for disallowed attention positions.
pub const MASK_BIAS: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Masked language modelling (encoder).
    Mlm,
    /// Causal language modelling (decoder).
    Clm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Clm => "clm",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(Objective::Mlm),
            "clm" => Ok(Objective::Clm),
            _ => Err(Error::config("objective", format!("unknown objective {s:?} (expected mlm or clm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosType {
    Absolute,
    RelativeKey,
    RelativeKeyQuery,
}

impl PosType {
    pub const ALL: [PosType; 3] = [PosType::RelativeKey, PosType::RelativeKeyQuery, PosType::Absolute];

    pub fn name(self) -> &'static str {
        match self {
            PosType::Absolute => "absolute",
            PosType::RelativeKey => "relative_key",
            PosType::RelativeKeyQuery => "relative_key_query",
        }
    }

    pub fn is_relative(self) -> bool {
        self != PosType::Absolute
    }
}

impl fmt::Display for PosType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(PosType::Absolute),
            "relative_key" => Ok(PosType::RelativeKey),
            "relative_key_query" => Ok(PosType::RelativeKeyQuery),
            _ => Err(Error::config(
                "pos_type",
                format!("unknown kind {s:?} (expected absolute, relative_key or relative_key_query)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub objective: Objective,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub ffn_size: usize,
    pub activation: Activation,
    pub dropout: f32,
    pub attention_dropout: f32,
    pub pos_type: PosType,
    pub tie_lm_head: bool,
    /// Required for MLM.
    pub mask_token_id: Option<u32>,
}

impl ModelConfig {
    /// 4-layer relative-position encoder, about 16M parameters.
    pub fn bebeshka() -> Self {
        Self {
            objective: Objective::Mlm,
            vocab_size: 8000,
            max_seq_len: 128,
            num_layers: 4,
            num_heads: 8,
            head_size: 70,
            ffn_size: 1412,
            activation: Activation::GeluNew,
            dropout: 0.15,
            attention_dropout: 0.3,
            pos_type: PosType::RelativeKeyQuery,
            tie_lm_head: true,
            mask_token_id: Some(MASK_ID),
        }
    }

    /// 6-layer absolute-position decoder, about 66M parameters.
    pub fn zlata() -> Self {
        Self {
            objective: Objective::Clm,
            vocab_size: 30000,
            max_seq_len: 1024,
            num_layers: 6,
            num_heads: 12,
            head_size: 64,
            ffn_size: 3072,
            activation: Activation::Gelu,
            dropout: 0.2,
            attention_dropout: 0.2,
            pos_type: PosType::Absolute,
            tie_lm_head: true,
            mask_token_id: None,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bebeshka" => Some(Self::bebeshka()),
            "zlata" => Some(Self::zlata()),
            _ => None,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.num_heads * self.head_size
    }

    pub fn is_encoder(&self) -> bool {
        self.objective == Objective::Mlm
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("ffn_size", self.ffn_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} outside [0, 1)")));
            }
        }
        if self.objective == Objective::Mlm {
            match self.mask_token_id {
                None => return Err(Error::config("mask_token_id", "MLM models need a mask token")),
                Some(id) if id as usize >= self.vocab_size => {
                    return Err(Error::config(
                        "mask_token_id",
                        format!("{id} outside vocabulary of {}", self.vocab_size),
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Name and shape of every parameter tensor, in storage order.
pub fn param_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, h) = (config.vocab_size, config.hidden_size(), config.ffn_size, config.head_size);
    let mut m: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| m.push((name, shape));
    push("embeddings.token".into(), vec![v, d]);
    if config.pos_type == PosType::Absolute {
        push("embeddings.position".into(), vec![config.max_seq_len, d]);
    }
    if config.is_encoder() {
        push("embeddings.norm.gamma".into(), vec![d]);
        push("embeddings.norm.beta".into(), vec![d]);
    }
    for l in 0..config.num_layers {
        for proj in ["q", "k", "v", "o"] {
            push(format!("layers.{l}.attn.{proj}.weight"), vec![d, d]);
            push(format!("layers.{l}.attn.{proj}.bias"), vec![d]);
        }
        if config.pos_type.is_relative() {
            push(format!("layers.{l}.attn.rel_table"), vec![2 * config.max_seq_len - 1, h]);
        }
        push(format!("layers.{l}.norm1.gamma"), vec![d]);
        push(format!("layers.{l}.norm1.beta"), vec![d]);
        push(format!("layers.{l}.ffn.up.weight"), vec![d, f]);
        push(format!("layers.{l}.ffn.up.bias"), vec![f]);
        push(format!("layers.{l}.ffn.down.weight"), vec![f, d]);
        push(format!("layers.{l}.ffn.down.bias"), vec![d]);
        push(format!("layers.{l}.norm2.gamma"), vec![d]);
        push(format!("layers.{l}.norm2.beta"), vec![d]);
    }
    if !config.is_encoder() {
        push("final_norm.gamma".into(), vec![d]);
        push("final_norm.beta".into(), vec![d]);
    }
    if !config.tie_lm_head {
        push("lm_head.weight".into(), vec![d, v]);
    }
    push("lm_head.bias".into(), vec![v]);
    m
}

/// Number of scalar parameters; a tied head is counted once.
pub fn param_count(config: &ModelConfig) -> u64 {
    param_manifest(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    rel_table: Option<usize>,
    norm1: Norm,
    up: Linear,
    down: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    token: usize,
    position: Option<usize>,
    embed_norm: Option<Norm>,
    layers: Vec<LayerIdx>,
    final_norm: Option<Norm>,
    head_weight: Option<usize>,
    head_bias: usize,
}

impl Layout {
    fn new(config: &ModelConfig, names: &[(String, Vec<usize>)]) -> Self {
        let find = |name: &str| {
            names
                .iter()
                .position(|(n, _)| n == name)
                .expect("manifest contains name")
        };
        let lin = |p: &str| Linear {
            weight: find(&format!("{p}.weight")),
            bias: find(&format!("{p}.bias")),
        };
        let norm = |p: &str| Norm {
            gamma: find(&format!("{p}.gamma")),
            beta: find(&format!("{p}.beta")),
        };
        let layers = (0..config.num_layers)
            .map(|l| LayerIdx {
                q: lin(&format!("layers.{l}.attn.q")),
                k: lin(&format!("layers.{l}.attn.k")),
                v: lin(&format!("layers.{l}.attn.v")),
                o: lin(&format!("layers.{l}.attn.o")),
                rel_table: config
                    .pos_type
                    .is_relative()
                    .then(|| find(&format!("layers.{l}.attn.rel_table"))),
                norm1: norm(&format!("layers.{l}.norm1")),
                up: lin(&format!("layers.{l}.ffn.up")),
                down: lin(&format!("layers.{l}.ffn.down")),
                norm2: norm(&format!("layers.{l}.norm2")),
            })
            .collect();
        Self {
            token: find("embeddings.token"),
            position: (config.pos_type == PosType::Absolute).then(|| find("embeddings.position")),
            embed_norm: config.is_encoder().then(|| norm("embeddings.norm")),
            layers,
            final_norm: (!config.is_encoder()).then(|| norm("final_norm")),
            head_weight: (!config.tie_lm_head).then(|| find("lm_head.weight")),
            head_bias: find("lm_head.bias"),
        }
    }
}

/// A batch of right-padded sequences, row-major `[batch, seq_len]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'b> {
    pub ids: &'b [u32],
    /// `true` for real tokens, `false` for padding.
    pub attn_mask: &'b [bool],
    pub batch: usize,
    pub seq_len: usize,
}

impl<'b> BatchView<'b> {
    pub fn new(ids: &'b [u32], attn_mask: &'b [bool], batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len || attn_mask.len() != ids.len() || batch == 0 || seq_len == 0 {
            return Err(Error::shape("batch", &[batch, seq_len], &[ids.len(), attn_mask.len()]));
        }
        Ok(Self {
            ids,
            attn_mask,
            batch,
            seq_len,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    layout: Layout,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Parameters registered on a tape, in manifest order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl TransformerModel {
    /// Weights from `Normal(0, 0.02)`, biases 0, norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(&config);
        let mut rng = RngState::new(seed);
        let params = manifest
            .iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") || name.ends_with(".beta") {
                    Tensor::zeros(shape)
                } else if name.ends_with(".gamma") {
                    Tensor::ones(shape)
                } else {
                    Tensor::randn(shape, INIT_STD, &mut rng)
                };
                NamedTensor {
                    name: name.clone(),
                    tensor,
                }
            })
            .collect();
        let layout = Layout::new(&config, &manifest);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Assembles a model from stored tensors, which must match the manifest
    /// of `config` exactly (names, order and shapes) and be finite.
    pub fn from_params(config: ModelConfig, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let manifest = param_manifest(&config);
        if manifest.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in manifest.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !p.tensor.is_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        let layout = Layout::new(&config, &manifest);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<NamedTensor> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn num_params(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(&p.tensor)).collect(),
        }
    }

    /// Final hidden states, `[batch * seq_len, d]`.
    pub fn hidden_states(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        batch: &BatchView<'_>,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, t) = (batch.batch, batch.seq_len);
        if t > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let lay = &self.layout;
        let p = |i: usize| bound.vars[i];
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        let mut x = tape.gather_rows(p(lay.token), &ids)?;
        if let Some(pos) = lay.position {
            let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
            let pe = tape.gather_rows(p(pos), &positions)?;
            x = tape.add(x, pe)?;
        }
        if let Some(n) = lay.embed_norm {
            x = tape.layer_norm(x, p(n.gamma), p(n.beta), LAYER_NORM_EPS)?;
        }
        x = tape.dropout(x, cfg.dropout, training, rng)?;

        let bias = tape.constant(attention_bias(batch, cfg.objective == Objective::Clm));
        let rel_ids = cfg.pos_type.is_relative().then(|| relative_indices(t, cfg.max_seq_len));
        for layer in &lay.layers {
            let rel = match (layer.rel_table, &rel_ids) {
                (Some(tab), Some(idx)) => {
                    let r = tape.gather_rows(p(tab), idx)?;
                    Some(tape.reshape(r, &[t, t, cfg.head_size])?)
                }
                _ => None,
            };
            if cfg.is_encoder() {
                let a = self.attention(tape, bound, layer, x, bias, rel, b, t, training, rng)?;
                let a = tape.dropout(a, cfg.dropout, training, rng)?;
                let h = tape.add(x, a)?;
                let h = tape.layer_norm(h, p(layer.norm1.gamma), p(layer.norm1.beta), LAYER_NORM_EPS)?;
                let f = self.feed_forward(tape, bound, layer, h)?;
                let f = tape.dropout(f, cfg.dropout, training, rng)?;
                let h = tape.add(h, f)?;
                x = tape.layer_norm(h, p(layer.norm2.gamma), p(layer.norm2.beta), LAYER_NORM_EPS)?;
            } else {
                let n = tape.layer_norm(x, p(layer.norm1.gamma), p(layer.norm1.beta), LAYER_NORM_EPS)?;
                let a = self.attention(tape, bound, layer, n, bias, rel, b, t, training, rng)?;
                let a = tape.dropout(a, cfg.dropout, training, rng)?;
                let h = tape.add(x, a)?;
                let n = tape.layer_norm(h, p(layer.norm2.gamma), p(layer.norm2.beta), LAYER_NORM_EPS)?;
                let f = self.feed_forward(tape, bound, layer, n)?;
                let f = tape.dropout(f, cfg.dropout, training, rng)?;
                x = tape.add(h, f)?;
            }
        }
        if let Some(n) = lay.final_norm {
            x = tape.layer_norm(x, p(n.gamma), p(n.beta), LAYER_NORM_EPS)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for hidden rows `[n, d]`, giving `[n, V]`.
    pub fn lm_logits(&self, tape: &mut Tape<'_>, bound: &BoundParams, hidden: Var) -> Result<Var> {
        let lay = &self.layout;
        let w = match lay.head_weight {
            Some(w) => bound.vars[w],
            None => tape.transpose(bound.vars[lay.token])?,
        };
        let logits = tape.matmul(hidden, w)?;
        tape.add(logits, bound.vars[lay.head_bias])
    }

    /// Inference-mode logits `[batch, seq_len, V]`.
    pub fn forward(&self, batch: &BatchView<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut rng = RngState::new(0);
        let h = self.hidden_states(&mut tape, &bound, batch, false, &mut rng)?;
        let logits = self.lm_logits(&mut tape, &bound, h)?;
        let v = self.config.vocab_size;
        tape.value(logits).clone().reshape(&[batch.batch, batch.seq_len, v])
    }

    fn linear(&self, tape: &mut Tape<'_>, bound: &BoundParams, lin: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.vars[lin.weight])?;
        tape.add(y, bound.vars[lin.bias])
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, bound: &BoundParams, layer: &LayerIdx, x: Var) -> Result<Var> {
        let h = self.linear(tape, bound, layer.up, x)?;
        let h = tape.activation(h, self.config.activation);
        self.linear(tape, bound, layer.down, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        layer: &LayerIdx,
        x: Var,
        bias: Var,
        rel: Option<Var>,
        b: usize,
        t: usize,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        let (a, h) = (self.config.num_heads, self.config.head_size);
        let split = |tape: &mut Tape<'_>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[b, t, a, h])?;
            tape.permute(v, &[0, 2, 1, 3])
        };
        let q = self.linear(tape, bound, layer.q, x)?;
        let q = split(tape, q)?;
        let k = self.linear(tape, bound, layer.k, x)?;
        let k = split(tape, k)?;
        let v = self.linear(tape, bound, layer.v, x)?;
        let v = split(tape, v)?;
        let scores = score_heads(tape, q, k, rel, self.config.pos_type, h)?;
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax(scores)?;
        let probs = tape.dropout(probs, self.config.attention_dropout, training, rng)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, a * h])?;
        self.linear(tape, bound, layer.o, ctx)
    }
}

/// `q·kᵀ/√H` plus the unscaled relative terms. `q`, `k`: `[B, A, T, H]`;
/// `rel`: per-pair table `[T, T, H]`.
fn score_heads(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    rel: Option<Var>,
    pos_type: PosType,
    head_size: usize,
) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let mut s = tape.scale(s, 1.0 / libm::sqrt(head_size as f64));
    if let Some(r) = rel {
        if pos_type.is_relative() {
            let qr = tape.rel_scores(q, r, RelMode::Query)?;
            s = tape.add(s, qr)?;
        }
        if pos_type == PosType::RelativeKeyQuery {
            let kr = tape.rel_scores(k, r, RelMode::Key)?;
            s = tape.add(s, kr)?;
        }
    }
    Ok(s)
}

/// Row index into a `[2·max − 1, H]` relative table for each `(i, j)` pair:
/// `clip(j − i) + max − 1`.
pub fn relative_indices(t: usize, max_seq_len: usize) -> Vec<usize> {
    let lim = max_seq_len as i64 - 1;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t as i64 {
        for j in 0..t as i64 {
            out.push(((j - i).clamp(-lim, lim) + lim) as usize);
        }
    }
    out
}

/// Additive mask `[B, 1, T, T]`: padded keys, and future keys when causal,
/// get [`MASK_BIAS`].
fn attention_bias(batch: &BatchView<'_>, causal: bool) -> Tensor {
    let (b, t) = (batch.batch, batch.seq_len);
    let mut data = vec![0.0f32; b * t * t];
    for s in 0..b {
        let keep = &batch.attn_mask[s * t..(s + 1) * t];
        for i in 0..t {
            for j in 0..t {
                if !keep[j] || (causal && j > i) {
                    data[(s * t + i) * t + j] = MASK_BIAS;
                }
            }
        }
    }
    Tensor::new(vec![b, 1, t, t], data).expect("consistent shape")
}

/// Attention scores `[A, T, T]` for one sequence with `q`, `k`: `[A, T, H]`
/// and, for relative variants, a `[2·max − 1, H]` table.
pub fn attention_scores(
    q: &Tensor,
    k: &Tensor,
    rel_table: Option<&Tensor>,
    pos_type: PosType,
    max_seq_len: usize,
) -> Result<Tensor> {
    if q.rank() != 3 || q.shape() != k.shape() {
        return Err(Error::shape("attention_scores", q.shape(), k.shape()));
    }
    let (a, t, h) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if t > max_seq_len {
        return Err(Error::SequenceTooLong { len: t, max: max_seq_len });
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone().reshape(&[1, a, t, h])?);
    let kv = tape.constant(k.clone().reshape(&[1, a, t, h])?);
    let rel = match (pos_type.is_relative(), rel_table) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::config("pos_type", "relative positions need a rel_table"));
        }
        (true, Some(table)) => {
            if table.shape() != [2 * max_seq_len - 1, h] {
                return Err(Error::shape("attention_scores", table.shape(), &[2 * max_seq_len - 1, h]));
            }
            let tv = tape.constant(table.clone());
            let r = tape.gather_rows(tv, &relative_indices(t, max_seq_len))?;
            Some(tape.reshape(r, &[t, t, h])?)
        }
    };
    let s = score_heads(&mut tape, qv, kv, rel, pos_type, h)?;
    tape.value(s).clone().reshape(&[a, t, t])
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (L={}, A={}, H={}, F={}) V={} max={} {} {}",
            self.objective,
            self.num_layers,
            self.num_heads,
            self.head_size,
            self.ffn_size,
            self.vocab_size,
            self.max_seq_len,
            self.pos_type,
            self.activation
        )
    }
}
