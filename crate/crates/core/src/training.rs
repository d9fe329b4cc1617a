//! Pretraining: masking, packing, AdamW, the learning-rate schedule and the
//! epoch loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchView, NamedTensor, Objective, TransformerModel};
use crate::rng::RngState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::{MASK_ID, NUM_SPECIAL, PAD_ID};

/// Label value for positions that carry no loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Stream ids handed to [`RngState::derive`].
const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_DROPOUT: u64 = 2 << 40;
const STREAM_MASK: u64 = 3 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.135,
            mask_frac: 8.0 / 9.0,
            random_frac: 1.0 / 9.0,
            keep_frac: 0.0,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("select_prob", self.select_prob),
            ("mask_frac", self.mask_frac),
            ("random_frac", self.random_frac),
            ("keep_frac", self.keep_frac),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        let total = self.mask_frac + self.random_frac + self.keep_frac;
        if libm::fabs(total - 1.0) > 1e-9 {
            return Err(Error::config("mask_frac", "mask, random and keep fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Special tokens (ids below the byte range) are never selected.
pub fn is_maskable(id: u32) -> bool {
    id as usize >= NUM_SPECIAL
}

/// Dynamic MLM corruption. Returns `(corrupted, labels)` where labels hold
/// the original id at selected positions and [`IGNORE_INDEX`] elsewhere.
/// Random replacements are drawn uniformly from the non-special ids.
pub fn apply_mlm_masking(
    ids: &[u32],
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut RngState,
) -> (Vec<u32>, Vec<u32>) {
    let mut corrupted = ids.to_vec();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    let non_special = vocab_size.saturating_sub(NUM_SPECIAL);
    for (i, &id) in ids.iter().enumerate() {
        if !is_maskable(id) || !rng.bernoulli(policy.select_prob) {
            continue;
        }
        labels[i] = id;
        let u = rng.uniform();
        if u < policy.mask_frac {
            corrupted[i] = MASK_ID;
        } else if u < policy.mask_frac + policy.random_frac && non_special > 0 {
            corrupted[i] = (NUM_SPECIAL + rng.below(non_special)) as u32;
        }
    }
    (corrupted, labels)
}

fn shift_labels(ids: &[u32], pad: u32) -> (Vec<u32>, Vec<u32>) {
    let n = ids.len().saturating_sub(1);
    let inputs = ids[..n].to_vec();
    let labels = ids[1..]
        .iter()
        .map(|&t| if t == pad { IGNORE_INDEX } else { t })
        .collect();
    (inputs, labels)
}

/// Next-token split: `inputs = ids[..T-1]`, `labels = ids[1..]` with pad
/// labels ignored.
pub fn clm_shift(ids: &[u32], pad: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    if ids.len() < 2 {
        return Err(Error::Invalid(format!("causal shift needs at least 2 tokens, got {}", ids.len())));
    }
    let (inputs, labels) = shift_labels(ids, pad);
    if labels.iter().all(|&l| l == IGNORE_INDEX) {
        return Err(Error::NoSupervisedPositions);
    }
    Ok((inputs, labels))
}

/// Fixed-length windows over a concatenated token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packed {
    pub window: usize,
    /// Row-major `[num_windows, window]`.
    pub ids: Vec<u32>,
    pub attn_mask: Vec<bool>,
}

impl Packed {
    pub fn num_windows(&self) -> usize {
        self.ids.len() / self.window
    }

    pub fn row(&self, i: usize) -> (&[u32], &[bool]) {
        let r = i * self.window..(i + 1) * self.window;
        (&self.ids[r.clone()], &self.attn_mask[r])
    }

    pub fn num_tokens(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m).count()
    }
}

/// Joins documents with one `eos` between neighbours and cuts the stream
/// into windows; the last window is right-padded with `pad`.
pub fn pack_corpus<D: AsRef<[u32]>>(docs: &[D], window: usize, eos: u32, pad: u32) -> Result<Packed> {
    if window == 0 {
        return Err(Error::config("window", "must be positive"));
    }
    let mut stream = Vec::new();
    for doc in docs.iter().map(AsRef::as_ref).filter(|d| !d.is_empty()) {
        if !stream.is_empty() {
            stream.push(eos);
        }
        stream.extend_from_slice(doc);
    }
    if stream.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let mut attn_mask = vec![true; stream.len()];
    let rem = stream.len() % window;
    if rem != 0 {
        stream.resize(stream.len() + window - rem, pad);
        attn_mask.resize(stream.len(), false);
    }
    Ok(Packed {
        window,
        ids: stream,
        attn_mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Matrices decay; biases, norm parameters and scalars do not.
pub fn decays(p: &NamedTensor) -> bool {
    p.tensor.rank() >= 2
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[NamedTensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. A non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut [NamedTensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len(), self.m.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape("adamw", p.tensor.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let step_size = lr / bc1;
        let bc2_sqrt = libm::sqrt(bc2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decays(p) { 1.0 - lr * c.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mut x = *w as f64 * shrink;
                x -= step_size * m[j] / (libm::sqrt(v[j]) / bc2_sqrt + c.eps);
                *w = x as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: u64) -> Self {
        let warmup_steps = libm::ceil(warmup_frac * total_steps as f64) as u64;
        Self {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// Rate for optimizer step `step`, counted from 1.
    pub fn lr(&self, step: u64) -> f64 {
        let (w, n) = (self.warmup_steps, self.total_steps);
        if step <= w {
            self.peak * step as f64 / w as f64
        } else if step >= n {
            0.0
        } else {
            self.peak * (n - step) as f64 / (n - w) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Seed for the fixed validation masking.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            learning_rate: 1e-4,
            adam: AdamWConfig::default(),
            epochs: 10,
            batch_size: 1,
            grad_accum: 64,
            warmup_frac: 0.06,
            seed: 0,
            eval_seed: 1234,
        }
    }

    /// Encoder fine-tuning defaults.
    pub fn finetune_encoder() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 64,
            grad_accum: 1,
            ..Self::pretrain()
        }
    }

    /// Decoder fine-tuning defaults.
    pub fn finetune_decoder() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 64,
            grad_accum: 1,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.grad_accum == 0 {
            return Err(Error::config("grad_accum", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", "must lie in [0, 1]"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config("adam_betas", "must lie in [0, 1)"));
        }
        if !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return Err(Error::config("adam_eps", "eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub perplexity: f64,
    pub wall_time_secs: f64,
}

/// Append-only per-epoch record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: EpochMetrics) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if m.epoch <= last.epoch {
                return Err(Error::Invalid(format!(
                    "epoch {} logged after epoch {}",
                    m.epoch, last.epoch
                )));
            }
        }
        self.epochs.push(m);
        Ok(())
    }

    pub fn epochs(&self) -> &[EpochMetrics] {
        &self.epochs
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Callbacks for the epoch loop: a clock and a per-epoch observer that can
/// save checkpoints or stop training early.
pub trait TrainHooks {
    /// Seconds on some monotonic clock.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn on_epoch(&mut self, _model: &TransformerModel, _metrics: &EpochMetrics) -> Result<Control> {
        Ok(Control::Continue)
    }
}

/// Hooks that do nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// One model input row with its labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub attn_mask: Vec<bool>,
    pub labels: Vec<u32>,
}

impl Example {
    pub fn supervised(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Builds the training example for window `index` of `data`. MLM masking
/// draws from a stream keyed on `(seed, index)` so it does not depend on
/// batching.
pub fn make_example(
    objective: Objective,
    data: &Packed,
    index: usize,
    policy: &MaskingPolicy,
    vocab_size: usize,
    seed: u64,
) -> Example {
    let (ids, mask) = data.row(index);
    match objective {
        Objective::Mlm => {
            let mut rng = RngState::derive(seed, STREAM_MASK + index as u64);
            let (corrupted, mut labels) = apply_mlm_masking(ids, policy, vocab_size, &mut rng);
            for (l, &m) in labels.iter_mut().zip(mask) {
                if !m {
                    *l = IGNORE_INDEX;
                }
            }
            Example {
                ids: corrupted,
                attn_mask: mask.to_vec(),
                labels,
            }
        }
        Objective::Clm => {
            let (inputs, mut labels) = shift_labels(ids, PAD_ID);
            let n = inputs.len();
            for (l, &m) in labels.iter_mut().zip(&mask[1..]) {
                if !m {
                    *l = IGNORE_INDEX;
                }
            }
            Example {
                ids: inputs,
                attn_mask: mask[..n].to_vec(),
                labels,
            }
        }
    }
}

/// Summed cross-entropy and supervised-token count for `examples`, plus
/// gradients of the summed loss scaled by `grad_scale` (when requested).
pub struct BatchLoss {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Option<Vec<Tensor>>,
}

/// Forward (and optionally backward) over equally long examples. Only
/// supervised rows go through the LM head.
pub fn batch_loss(
    model: &TransformerModel,
    examples: &[&Example],
    training: bool,
    grad_scale: Option<f64>,
    rng: &mut RngState,
) -> Result<BatchLoss> {
    let tokens: usize = examples.iter().map(|e| e.supervised()).sum();
    if tokens == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    let t = examples[0].ids.len();
    if examples.iter().any(|e| e.ids.len() != t) {
        return Err(Error::Invalid("examples in a batch must share a length".into()));
    }
    let ids: Vec<u32> = examples.iter().flat_map(|e| e.ids.iter().copied()).collect();
    let mask: Vec<bool> = examples.iter().flat_map(|e| e.attn_mask.iter().copied()).collect();
    let all_labels = examples.iter().flat_map(|e| e.labels.iter().copied());
    let (rows, labels): (Vec<usize>, Vec<u32>) = all_labels
        .enumerate()
        .filter(|&(_, l)| l != IGNORE_INDEX)
        .unzip();
    let view = BatchView::new(&ids, &mask, examples.len(), t)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let hidden = model.hidden_states(&mut tape, &bound, &view, training, rng)?;
    let picked = tape.gather_rows(hidden, &rows)?;
    let logits = model.lm_logits(&mut tape, &bound, picked)?;
    let loss = tape.cross_entropy(logits, &labels, IGNORE_INDEX, None)?;
    let mean = tape.value(loss).item()? as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = match grad_scale {
        None => None,
        Some(scale) => {
            let out = tape.scale(loss, scale * tokens as f64);
            let g = tape.backward(out)?;
            Some(
                bound
                    .vars
                    .iter()
                    .zip(model.params())
                    .map(|(&v, p)| g.get_or_zeros(v, p.tensor.shape()))
                    .collect(),
            )
        }
    };
    Ok(BatchLoss {
        loss_sum: mean * tokens as f64,
        tokens,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// `exp(loss)`.
pub fn perplexity(loss: f64) -> f64 {
    libm::exp(loss)
}

/// Mean cross-entropy per supervised position over `data` (masked positions
/// under `eval_seed` for MLM, next-token positions for CLM).
pub fn evaluate_perplexity(
    model: &TransformerModel,
    data: &Packed,
    policy: &MaskingPolicy,
    eval_seed: u64,
    batch_size: usize,
) -> Result<EvalResult> {
    let n = data.num_windows();
    if n == 0 {
        return Err(Error::Empty("evaluation data".into()));
    }
    let cfg = model.config();
    let examples: Vec<Example> = (0..n)
        .map(|i| make_example(cfg.objective, data, i, policy, cfg.vocab_size, eval_seed))
        .filter(|e| e.supervised() > 0)
        .collect();
    if examples.is_empty() {
        return Err(Error::NoSupervisedPositions);
    }
    let mut rng = RngState::new(eval_seed);
    let (mut sum, mut tokens) = (0.0, 0);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let r = batch_loss(model, &refs, false, None, &mut rng)?;
        sum += r.loss_sum;
        tokens += r.tokens;
    }
    let loss = sum / tokens as f64;
    Ok(EvalResult {
        loss,
        perplexity: perplexity(loss),
        tokens,
    })
}

/// Gradient of the mean loss over every supervised token in `examples`,
/// computed in micro-batches of `micro_batch` examples. Each micro-batch's
/// gradient is weighted by its share of the supervised tokens, so the result
/// does not depend on `micro_batch` beyond rounding.
pub fn accumulate_gradients(
    model: &TransformerModel,
    examples: &[Example],
    micro_batch: usize,
    dropout_seed: u64,
) -> Result<BatchLoss> {
    let group_tokens: usize = examples.iter().map(Example::supervised).sum();
    let mut out = BatchLoss {
        loss_sum: 0.0,
        tokens: 0,
        grads: None,
    };
    if group_tokens == 0 {
        return Ok(out);
    }
    for (mb, micro) in examples.chunks(micro_batch.max(1)).enumerate() {
        let refs: Vec<&Example> = micro.iter().filter(|e| e.supervised() > 0).collect();
        if refs.is_empty() {
            continue;
        }
        let mut rng = RngState::derive(dropout_seed, mb as u64);
        let r = batch_loss(model, &refs, true, Some(1.0 / group_tokens as f64), &mut rng)?;
        out.loss_sum += r.loss_sum;
        out.tokens += r.tokens;
        let grads = r.grads.expect("gradients requested");
        match &mut out.grads {
            None => out.grads = Some(grads),
            Some(acc) => {
                for (x, g) in acc.iter_mut().zip(&grads) {
                    for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
                        *xi += gi;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Number of optimizer steps per epoch for `windows` training windows.
pub fn steps_per_epoch(windows: usize, config: &TrainConfig) -> usize {
    windows.div_ceil(config.batch_size * config.grad_accum)
}

/// Runs `config.epochs` epochs over `train_data`, evaluating on `valid_data`
/// after each. Gradients of an accumulation group are weighted by each
/// micro-batch's share of supervised tokens.
pub fn train(
    model: &mut TransformerModel,
    train_data: &Packed,
    valid_data: &Packed,
    config: &TrainConfig,
    policy: &MaskingPolicy,
    hooks: &mut dyn TrainHooks,
) -> Result<MetricsLog> {
    config.validate()?;
    policy.validate()?;
    let windows = train_data.num_windows();
    if windows == 0 {
        return Err(Error::Empty("training data".into()));
    }
    let mc = model.config().clone();
    let per_epoch = steps_per_epoch(windows, config);
    let schedule = LinearSchedule::new(config.learning_rate, config.warmup_frac, (per_epoch * config.epochs) as u64);
    let mut opt = AdamW::new(config.adam, model.params());
    let mut log = MetricsLog::new();
    let start = hooks.now();
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..windows).collect();
        RngState::derive(config.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
        let mask_seed = config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (mut epoch_sum, mut epoch_tokens) = (0.0, 0usize);

        for group in order.chunks(config.batch_size * config.grad_accum) {
            let examples: Vec<Example> = group
                .iter()
                .map(|&i| make_example(mc.objective, train_data, i, policy, mc.vocab_size, mask_seed))
                .collect();
            step += 1;
            let dropout_seed = config.seed ^ STREAM_DROPOUT ^ (step << 20);
            let acc = accumulate_gradients(model, &examples, config.batch_size, dropout_seed)?;
            epoch_sum += acc.loss_sum;
            epoch_tokens += acc.tokens;
            if let Some(grads) = acc.grads {
                opt.step(model.params_mut(), &grads, schedule.lr(step))?;
            }
        }

        let eval = evaluate_perplexity(model, valid_data, policy, config.eval_seed, config.batch_size.max(8))?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: if epoch_tokens > 0 { epoch_sum / epoch_tokens as f64 } else { f64::NAN },
            valid_loss: eval.loss,
            perplexity: eval.perplexity,
            wall_time_secs: hooks.now() - start,
        };
        log.push(metrics.clone())?;
        if hooks.on_epoch(model, &metrics)? == Control::Stop {
            break;
        }
    }
    Ok(log)
}

/// Perplexity of an add-one smoothed unigram model fitted on the real
/// tokens of `train`, scored on the same supervised positions that
/// [`evaluate_perplexity`] uses for `valid`.
pub fn unigram_perplexity(
    train: &Packed,
    valid: &Packed,
    objective: Objective,
    policy: &MaskingPolicy,
    vocab_size: usize,
    eval_seed: u64,
) -> Result<f64> {
    let mut counts = vec![1.0f64; vocab_size];
    for (&id, &m) in train.ids.iter().zip(&train.attn_mask) {
        if m && (id as usize) < vocab_size {
            counts[id as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let (mut nll, mut n) = (0.0, 0usize);
    for i in 0..valid.num_windows() {
        let ex = make_example(objective, valid, i, policy, vocab_size, eval_seed);
        for &l in ex.labels.iter().filter(|&&l| l != IGNORE_INDEX) {
            let c = counts.get(l as usize).copied().unwrap_or(1.0);
            nll -= libm::log(c / total);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(perplexity(nll / n as f64))
}
