//! Zero-shot minimal-pair scoring, sequence-classification fine-tuning and
//! classification metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchView, NamedTensor, Objective, TransformerModel, INIT_STD};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, BOS_ID, EOS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};
use crate::training::{AdamW, LinearSchedule, TrainConfig, IGNORE_INDEX};

const STREAM_HEAD: u64 = 7 << 40;
const STREAM_ORDER: u64 = 8 << 40;
const STREAM_DROPOUT: u64 = 9 << 40;

/// Rows per forward pass when scoring MLM positions.
const PLL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    #[serde(rename = "sentence_good")]
    pub good: String,
    #[serde(rename = "sentence_bad")]
    pub bad: String,
    pub phenomenon: String,
    #[serde(default)]
    pub paradigm: String,
}

impl MinimalPair {
    pub fn validate(&self) -> Result<()> {
        if self.good.trim().is_empty() || self.bad.trim().is_empty() {
            return Err(Error::Invalid("minimal pair with an empty sentence".into()));
        }
        if self.good == self.bad {
            return Err(Error::Invalid(format!("minimal pair sentences are identical: {:?}", self.good)));
        }
        Ok(())
    }
}

/// Summed log-probability of a sentence and the number of scored tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub log_prob: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw sum of log-probabilities.
    #[default]
    Sum,
    /// Sum divided by the number of scored tokens.
    PerToken,
}

impl SentenceScore {
    pub fn value(&self, norm: Normalization) -> f64 {
        match norm {
            Normalization::Sum => self.log_prob,
            Normalization::PerToken => self.log_prob / self.tokens.max(1) as f64,
        }
    }
}

fn log_softmax_at(row: &[f32], target: u32) -> f64 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let s: f64 = row.iter().map(|&x| libm::exp(x as f64 - m)).sum();
    row[target as usize] as f64 - m - libm::log(s)
}

/// Log-probabilities of `targets[i]` at hidden row `rows[i]` for a batch.
fn row_log_probs(model: &TransformerModel, view: &BatchView<'_>, rows: &[usize], targets: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut rng = RngState::new(0);
    let hidden = model.hidden_states(&mut tape, &bound, view, false, &mut rng)?;
    let picked = tape.gather_rows(hidden, rows)?;
    let logits = model.lm_logits(&mut tape, &bound, picked)?;
    let v = model.config().vocab_size;
    let data = tape.value(logits).data();
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax_at(&data[i * v..(i + 1) * v], t))
        .collect())
}

fn is_content(id: u32) -> bool {
    id as usize >= NUM_SPECIAL
}

/// Scores token ids (without specials added). CLM conditions on a leading
/// BOS; MLM uses the pseudo-log-likelihood, masking one position per row.
/// Special ids in `ids` are fed to the model but not scored.
pub fn score_ids(model: &TransformerModel, ids: &[u32]) -> Result<SentenceScore> {
    let cfg = model.config();
    let scored: Vec<usize> = (0..ids.len()).filter(|&i| is_content(ids[i])).collect();
    if scored.is_empty() {
        return Err(Error::Empty("sentence has no scorable tokens".into()));
    }
    match cfg.objective {
        Objective::Clm => {
            let input: Vec<u32> = core::iter::once(BOS_ID).chain(ids[..ids.len() - 1].iter().copied()).collect();
            if ids.len() > cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: ids.len(),
                    max: cfg.max_seq_len,
                });
            }
            let mask = vec![true; input.len()];
            let view = BatchView::new(&input, &mask, 1, input.len())?;
            let targets: Vec<u32> = scored.iter().map(|&i| ids[i]).collect();
            let lp = row_log_probs(model, &view, &scored, &targets)?;
            Ok(SentenceScore {
                log_prob: lp.iter().sum(),
                tokens: scored.len(),
            })
        }
        Objective::Mlm => {
            let t = ids.len();
            if t > cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: t,
                    max: cfg.max_seq_len,
                });
            }
            let mask_id = cfg.mask_token_id.unwrap_or(MASK_ID);
            let mut total = 0.0;
            for chunk in scored.chunks(PLL_CHUNK) {
                let mut batch = Vec::with_capacity(chunk.len() * t);
                for &pos in chunk {
                    let start = batch.len();
                    batch.extend_from_slice(ids);
                    batch[start + pos] = mask_id;
                }
                let mask = vec![true; batch.len()];
                let view = BatchView::new(&batch, &mask, chunk.len(), t)?;
                let rows: Vec<usize> = chunk.iter().enumerate().map(|(r, &pos)| r * t + pos).collect();
                let targets: Vec<u32> = chunk.iter().map(|&pos| ids[pos]).collect();
                total += row_log_probs(model, &view, &rows, &targets)?.iter().sum::<f64>();
            }
            Ok(SentenceScore {
                log_prob: total,
                tokens: scored.len(),
            })
        }
    }
}

/// Tokenizes `text` and scores it with [`score_ids`]. Inputs longer than the
/// model's context are an error rather than truncated.
pub fn score_sentence(model: &TransformerModel, tokenizer: &Tokenizer, text: &str) -> Result<SentenceScore> {
    score_ids(model, &tokenizer.encode(text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl GroupAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub overall: GroupAccuracy,
    /// Sorted by phenomenon name.
    pub phenomena: Vec<GroupAccuracy>,
}

/// A pair is correct iff `score(good) > score(bad)`; ties count as wrong.
pub fn minimal_pair_accuracy<F>(pairs: &[MinimalPair], mut score: F) -> Result<PairReport>
where
    F: FnMut(&str) -> Result<f64>,
{
    if pairs.is_empty() {
        return Err(Error::Empty("minimal pairs".into()));
    }
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let ok = score(&p.good)? > score(&p.bad)?;
        let g = groups.entry(p.phenomenon.as_str()).or_default();
        g.0 += usize::from(ok);
        g.1 += 1;
    }
    let phenomena: Vec<GroupAccuracy> = groups
        .into_iter()
        .map(|(name, (correct, total))| GroupAccuracy {
            name: name.into(),
            correct,
            total,
        })
        .collect();
    Ok(PairReport {
        overall: GroupAccuracy {
            name: "overall".into(),
            correct: phenomena.iter().map(|g| g.correct).sum(),
            total: pairs.len(),
        },
        phenomena,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts with class `positive` as the positive class.
    pub fn from_predictions(preds: &[usize], labels: &[usize], positive: usize) -> Self {
        let mut c = Self::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == positive, l == positive) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    ((tp * tn - fp * fn_) / libm::sqrt(den)).clamp(-1.0, 1.0)
}

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn f1(c: ConfusionCounts) -> f64 {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
    pub counts: ConfusionCounts,
}

/// Accuracy over all classes; F1 and MCC treat class 1 as positive and every
/// other class as negative.
pub fn classification_metrics(preds: &[usize], labels: &[usize]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::shape("classification_metrics", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let counts = ConfusionCounts::from_predictions(preds, labels, 1);
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        f1: f1(counts),
        mcc: mcc(counts),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Token ids ready for a classifier: `BOS a [EOS b]`, cut to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub label: usize,
}

pub fn encode_example(tokenizer: &Tokenizer, ex: &ClassificationExample, max_len: usize) -> EncodedExample {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.encode(&ex.text_a));
    if let Some(b) = &ex.text_b {
        ids.push(EOS_ID);
        ids.extend(tokenizer.encode(b));
    }
    ids.truncate(max_len.max(1));
    EncodedExample { ids, label: ex.label }
}

/// A language model with a classification head. Encoders pool the first
/// position through `dense → tanh → out`; decoders feed the last real
/// position straight into `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClassifier {
    pub model: TransformerModel,
    pub head: Vec<NamedTensor>,
    pub arity: usize,
}

impl SequenceClassifier {
    pub fn new(model: TransformerModel, arity: usize, seed: u64) -> Result<Self> {
        if arity < 2 {
            return Err(Error::config("arity", "a classifier needs at least two classes"));
        }
        let d = model.config().hidden_size();
        let mut rng = RngState::derive(seed, STREAM_HEAD);
        let mut head = Vec::new();
        let mut push = |name: &str, t: Tensor| {
            head.push(NamedTensor {
                name: name.into(),
                tensor: t,
            })
        };
        if model.config().is_encoder() {
            push("classifier.dense.weight", Tensor::randn(&[d, d], INIT_STD, &mut rng));
            push("classifier.dense.bias", Tensor::zeros(&[d]));
        }
        push("classifier.out.weight", Tensor::randn(&[d, arity], INIT_STD, &mut rng));
        push("classifier.out.bias", Tensor::zeros(&[arity]));
        Ok(Self { model, head, arity })
    }

    /// Class logits `[batch, arity]` for a padded batch, plus the tape
    /// variables of the head parameters and the model parameters.
    fn logits<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        examples: &[&EncodedExample],
        training: bool,
        rng: &mut RngState,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let t = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        if t == 0 || examples.iter().any(|e| e.ids.is_empty()) {
            return Err(Error::Empty("classification input".into()));
        }
        let mut ids = Vec::with_capacity(examples.len() * t);
        let mut mask = Vec::with_capacity(examples.len() * t);
        for e in examples {
            ids.extend_from_slice(&e.ids);
            ids.resize(ids.len() + t - e.ids.len(), PAD_ID);
            mask.extend((0..t).map(|i| i < e.ids.len()));
        }
        let view = BatchView::new(&ids, &mask, examples.len(), t)?;
        let bound = self.model.bind(tape);
        let hv: Vec<Var> = self.head.iter().map(|p| tape.param(&p.tensor)).collect();
        let hidden = self.model.hidden_states(tape, &bound, &view, training, rng)?;
        let encoder = self.model.config().is_encoder();
        let rows: Vec<usize> = examples
            .iter()
            .enumerate()
            .map(|(b, e)| b * t + if encoder { 0 } else { e.ids.len() - 1 })
            .collect();
        let mut x = tape.gather_rows(hidden, &rows)?;
        let mut k = 0;
        if encoder {
            x = tape.matmul(x, hv[0])?;
            x = tape.add(x, hv[1])?;
            x = tape.tanh(x);
            k = 2;
        }
        let y = tape.matmul(x, hv[k])?;
        let y = tape.add(y, hv[k + 1])?;
        Ok((y, bound.vars, hv))
    }

    /// Argmax class per example (first maximum on ties).
    pub fn predict(&self, examples: &[EncodedExample], batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        let mut rng = RngState::new(0);
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let (y, _, _) = self.logits(&mut tape, &refs, false, &mut rng)?;
            for row in tape.value(y).data().chunks(self.arity) {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, examples: &[EncodedExample], batch_size: usize) -> Result<ClassificationMetrics> {
        let preds = self.predict(examples, batch_size)?;
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        classification_metrics(&preds, &labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Learning rate, epochs, batch size, warmup, AdamW settings and seed.
    /// Each optimizer step sees `batch_size × grad_accum` examples.
    pub train: TrainConfig,
    /// Per-class loss weights.
    pub class_weights: Option<Vec<f32>>,
}

impl FinetuneConfig {
    pub fn encoder() -> Self {
        Self {
            train: TrainConfig::finetune_encoder(),
            class_weights: None,
        }
    }

    pub fn decoder() -> Self {
        Self {
            train: TrainConfig::finetune_decoder(),
            class_weights: None,
        }
    }

    /// Preset matching the model's architecture.
    pub fn for_model(model: &TransformerModel) -> Self {
        if model.config().is_encoder() {
            Self::encoder()
        } else {
            Self::decoder()
        }
    }
}

/// Inverse-frequency class weights normalised to mean 1; unseen classes get 0.
pub fn balanced_class_weights(examples: &[EncodedExample], arity: usize) -> Vec<f32> {
    let mut counts = vec![0usize; arity];
    for e in examples {
        if e.label < arity {
            counts[e.label] += 1;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let n = examples.len().max(1) as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (n / (present as f64 * c as f64)) as f32 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: ClassificationMetrics,
}

/// Fine-tunes `model` end to end with a fresh classification head and
/// reports validation metrics after every epoch.
pub fn finetune_classifier(
    model: TransformerModel,
    arity: usize,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &FinetuneConfig,
) -> Result<(SequenceClassifier, Vec<FinetuneEpoch>)> {
    let tc = &config.train;
    tc.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("classification data".into()));
    }
    if let Some(e) = train.iter().chain(valid).find(|e| e.label >= arity) {
        return Err(Error::config("labels", format!("label {} out of range for arity {arity}", e.label)));
    }
    if let Some(w) = &config.class_weights {
        if w.len() != arity || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("class_weights", "need one finite non-negative weight per class"));
        }
    }
    let mut clf = SequenceClassifier::new(model, arity, tc.seed)?;
    let group = tc.batch_size * tc.grad_accum;
    let per_epoch = train.len().div_ceil(group);
    let schedule = LinearSchedule::new(tc.learning_rate, tc.warmup_frac, (per_epoch * tc.epochs) as u64);
    let mut opt_model = AdamW::new(tc.adam, clf.model.params());
    let mut opt_head = AdamW::new(tc.adam, &clf.head);
    let labels_all: Vec<u32> = train.iter().map(|e| e.label as u32).collect();
    let mut report = Vec::with_capacity(tc.epochs);
    let mut step = 0u64;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngState::derive(tc.seed, STREAM_ORDER + epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(group) {
            step += 1;
            let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<u32> = idx.iter().map(|&i| labels_all[i]).collect();
            let mut rng = RngState::derive(tc.seed, STREAM_DROPOUT + step);
            let (gm, gh, loss) = {
                let mut tape = Tape::new();
                let (y, mv, hv) = clf.logits(&mut tape, &refs, true, &mut rng)?;
                let loss = tape.cross_entropy(y, &labels, IGNORE_INDEX, config.class_weights.as_deref())?;
                let value = tape.value(loss).item()? as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite("classification loss".into()));
                }
                let g = tape.backward(loss)?;
                let gm: Vec<Tensor> = mv
                    .iter()
                    .zip(clf.model.params())
                    .map(|(&v, p)| g.get_or_zeros(v, p.tensor.shape()))
                    .collect();
                let gh: Vec<Tensor> = hv
                    .iter()
                    .zip(&clf.head)
                    .map(|(&v, p)| g.get_or_zeros(v, p.tensor.shape()))
                    .collect();
                (gm, gh, value)
            };
            let lr = schedule.lr(step);
            opt_model.step(clf.model.params_mut(), &gm, lr)?;
            opt_head.step(&mut clf.head, &gh, lr)?;
            loss_sum += loss * refs.len() as f64;
            n += refs.len();
        }
        report.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / n as f64,
            valid: clf.evaluate(valid, tc.batch_size.max(8))?,
        });
    }
    Ok((clf, report))
}
