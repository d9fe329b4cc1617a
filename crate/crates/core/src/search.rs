//! Architecture search: TPE sampling, median pruning, study bookkeeping and
//! the pretraining-perplexity objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Objective, PosType, TransformerModel};
use crate::rng::RngState;
use crate::tape::Activation;
use crate::tokenizer::MASK_ID;
use crate::training::{self, Control, EpochMetrics, MaskingPolicy, Packed, TrainConfig, TrainHooks};

const STREAM_SUGGEST: u64 = 5 << 40;
const STREAM_TRIAL: u64 = 6 << 40;

/// Upper clamp applied to sampled dropout probabilities.
pub const MAX_DROPOUT: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Categorical { choices: Vec<String> },
    /// Inclusive integer range.
    Int { lo: i64, hi: i64 },
    /// Float range `[lo, hi)`.
    Float { lo: f64, hi: f64 },
}

impl Distribution {
    pub fn validate(&self, name: &str) -> Result<()> {
        match self {
            Distribution::Categorical { choices } if choices.is_empty() => {
                Err(Error::config(name, "categorical parameter needs at least one choice"))
            }
            Distribution::Int { lo, hi } if lo > hi => Err(Error::config(name, "lo must not exceed hi")),
            Distribution::Float { lo, hi } if !(lo <= hi && lo.is_finite() && hi.is_finite()) => {
                Err(Error::config(name, "float range must be finite with lo <= hi"))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Distribution::Categorical { choices }, ParamValue::Cat(c)) => choices.contains(c),
            (Distribution::Int { lo, hi }, ParamValue::Int(x)) => lo <= x && x <= hi,
            (Distribution::Float { lo, hi }, ParamValue::Float(x)) => *lo <= *x && (*x < *hi || lo == hi),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(x) => Some(*x as f64),
            ParamValue::Float(x) => Some(*x),
            ParamValue::Cat(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(x) => write!(f, "{x}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Cat(c) => f.write_str(c),
        }
    }
}

pub type Params = BTreeMap<String, ParamValue>;

/// Named parameters in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<(String, Distribution)>,
}

impl SearchSpace {
    /// The architecture space: position type, layers, heads, head size,
    /// feed-forward size, activation and both dropouts.
    pub fn architecture() -> Self {
        let cat = |xs: &[&str]| Distribution::Categorical {
            choices: xs.iter().map(|s| s.to_string()).collect(),
        };
        let params = vec![
            ("pos_type".into(), cat(&["relative_key", "relative_key_query", "absolute"])),
            ("num_layers".into(), Distribution::Int { lo: 1, hi: 12 }),
            ("num_heads".into(), Distribution::Int { lo: 1, hi: 18 }),
            ("head_size".into(), Distribution::Int { lo: 1, hi: 100 }),
            ("ffn_size".into(), Distribution::Int { lo: 1, hi: 3072 }),
            ("activation".into(), cat(&["gelu_new", "gelu", "silu", "relu"])),
            ("dropout".into(), Distribution::Float { lo: 0.1, hi: 1.0 }),
            ("attention_dropout".into(), Distribution::Float { lo: 0.1, hi: 1.0 }),
        ];
        Self { params }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::config("space", "no parameters declared"));
        }
        for (i, (name, d)) in self.params.iter().enumerate() {
            if self.params[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::config(name.as_str(), "declared twice"));
            }
            d.validate(name)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Distribution> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    Running,
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: Params,
    pub intermediates: BTreeMap<usize, f64>,
    pub value: Option<f64>,
    pub state: TrialState,
}

impl Trial {
    pub fn is_finished(&self) -> bool {
        self.state != TrialState::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_startup_trials: usize,
    pub n_ei_candidates: usize,
    /// Cap on the size of the good set.
    pub gamma_cap: usize,
    /// Fraction of completed trials placed in the good set.
    pub gamma_frac: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup_trials: 10,
            n_ei_candidates: 24,
            gamma_cap: 25,
            gamma_frac: 0.1,
        }
    }
}

impl TpeConfig {
    /// Size of the good set among `n` completed trials.
    pub fn gamma(&self, n: usize) -> usize {
        let g = libm::ceil(self.gamma_frac * n as f64) as usize;
        g.min(self.gamma_cap).max(usize::from(n > 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianPrunerConfig {
    pub n_warmup_trials: usize,
    pub n_warmup_steps: usize,
}

impl Default for MedianPrunerConfig {
    fn default() -> Self {
        Self {
            n_warmup_trials: 5,
            n_warmup_steps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Tpe,
    Random,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / core::f64::consts::SQRT_2))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

/// Mixture of truncated Gaussians, one per observation, with equal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenEstimator {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    log_mass: Vec<f64>,
}

impl ParzenEstimator {
    /// Bandwidth of each kernel is the larger gap to its sorted neighbours
    /// (the bounds act as outer neighbours), clipped to
    /// `[(hi − lo) / min(100, n), hi − lo]`.
    pub fn new(observations: &[f64], lo: f64, hi: f64) -> Self {
        let mut mus: Vec<f64> = observations.iter().map(|&x| x.clamp(lo, hi)).collect();
        mus.sort_by(f64::total_cmp);
        let n = mus.len();
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let min_sigma = span / (n.clamp(1, 100) as f64);
        let sigmas: Vec<f64> = (0..n)
            .map(|i| {
                let left = mus[i] - if i == 0 { lo } else { mus[i - 1] };
                let right = if i + 1 == n { hi } else { mus[i + 1] } - mus[i];
                left.max(right).clamp(min_sigma, span)
            })
            .collect();
        let log_mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| libm::log(std_normal_cdf((hi - m) / s) - std_normal_cdf((lo - m) / s)))
            .collect();
        Self {
            mus,
            sigmas,
            lo,
            hi,
            log_mass,
        }
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    /// Draw from the mixture (uniform over `[lo, hi]` when empty).
    pub fn sample(&self, rng: &mut RngState) -> f64 {
        if self.is_empty() {
            return rng.uniform_range(self.lo, self.hi);
        }
        let i = rng.below(self.len());
        for _ in 0..1000 {
            let x = rng.normal(self.mus[i], self.sigmas[i]);
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        self.mus[i]
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: f64) -> f64 {
        if self.is_empty() {
            return -libm::log(self.hi - self.lo);
        }
        let log_n = libm::log(self.len() as f64);
        let terms: Vec<f64> = (0..self.len())
            .map(|i| {
                let (m, s) = (self.mus[i], self.sigmas[i]);
                let z = (x - m) / s;
                -0.5 * z * z - libm::log(s * libm::sqrt(2.0 * core::f64::consts::PI)) - self.log_mass[i] - log_n
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Log probability of the unit-width bin `[x − ½, x + ½]`.
    pub fn log_bin_mass(&self, x: f64) -> f64 {
        let (a, b) = ((x - 0.5).max(self.lo), (x + 0.5).min(self.hi));
        if self.is_empty() {
            return libm::log((b - a) / (self.hi - self.lo));
        }
        let log_n = libm::log(self.len() as f64);
        let terms: Vec<f64> = (0..self.len())
            .map(|i| {
                let (m, s) = (self.mus[i], self.sigmas[i]);
                let p = std_normal_cdf((b - m) / s) - std_normal_cdf((a - m) / s);
                libm::log(p.max(1e-300)) - self.log_mass[i] - log_n
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Category probabilities proportional to `count + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalEstimator {
    pub probs: Vec<f64>,
}

impl CategoricalEstimator {
    pub fn new(indices: &[usize], n_choices: usize) -> Self {
        let mut counts = vec![1.0; n_choices];
        for &i in indices {
            counts[i] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub fn sample(&self, rng: &mut RngState) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

fn round_half_up(x: f64) -> i64 {
    libm::floor(x + 0.5) as i64
}

/// Index of the first maximum of `log l − log g`.
pub fn best_candidate(log_l: &[f64], log_g: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (l, g)) in log_l.iter().zip(log_g).enumerate() {
        let s = l - g;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

fn sample_uniform(dist: &Distribution, rng: &mut RngState) -> ParamValue {
    match dist {
        Distribution::Categorical { choices } => ParamValue::Cat(choices[rng.below(choices.len())].clone()),
        Distribution::Int { lo, hi } => ParamValue::Int(lo + rng.below((hi - lo + 1) as usize) as i64),
        Distribution::Float { lo, hi } => ParamValue::Float(rng.uniform_range(*lo, *hi)),
    }
}

/// Per-parameter TPE step for one distribution.
fn sample_tpe(
    dist: &Distribution,
    good: &[&ParamValue],
    rest: &[&ParamValue],
    n_candidates: usize,
    rng: &mut RngState,
) -> ParamValue {
    match dist {
        Distribution::Categorical { choices } => {
            let idx = |vs: &[&ParamValue]| -> Vec<usize> {
                vs.iter()
                    .filter_map(|v| match v {
                        ParamValue::Cat(c) => choices.iter().position(|x| x == c),
                        _ => None,
                    })
                    .collect()
            };
            let l = CategoricalEstimator::new(&idx(good), choices.len());
            let g = CategoricalEstimator::new(&idx(rest), choices.len());
            let cands: Vec<usize> = (0..n_candidates).map(|_| l.sample(rng)).collect();
            let ll: Vec<f64> = cands.iter().map(|&c| libm::log(l.probs[c])).collect();
            let lg: Vec<f64> = cands.iter().map(|&c| libm::log(g.probs[c])).collect();
            ParamValue::Cat(choices[cands[best_candidate(&ll, &lg)]].clone())
        }
        Distribution::Int { lo, hi } => {
            let (a, b) = (*lo as f64 - 0.5, *hi as f64 + 0.5);
            let nums = |vs: &[&ParamValue]| -> Vec<f64> { vs.iter().filter_map(|v| v.as_f64()).collect() };
            let l = ParzenEstimator::new(&nums(good), a, b);
            let g = ParzenEstimator::new(&nums(rest), a, b);
            let cands: Vec<i64> = (0..n_candidates)
                .map(|_| round_half_up(l.sample(rng)).clamp(*lo, *hi))
                .collect();
            let ll: Vec<f64> = cands.iter().map(|&c| l.log_bin_mass(c as f64)).collect();
            let lg: Vec<f64> = cands.iter().map(|&c| g.log_bin_mass(c as f64)).collect();
            ParamValue::Int(cands[best_candidate(&ll, &lg)])
        }
        Distribution::Float { lo, hi } => {
            let nums = |vs: &[&ParamValue]| -> Vec<f64> { vs.iter().filter_map(|v| v.as_f64()).collect() };
            let l = ParzenEstimator::new(&nums(good), *lo, *hi);
            let g = ParzenEstimator::new(&nums(rest), *lo, *hi);
            let cands: Vec<f64> = (0..n_candidates).map(|_| l.sample(rng)).collect();
            let ll: Vec<f64> = cands.iter().map(|&c| l.log_pdf(c)).collect();
            let lg: Vec<f64> = cands.iter().map(|&c| g.log_pdf(c)).collect();
            let x = cands[best_candidate(&ll, &lg)];
            // keep the half-open upper bound
            ParamValue::Float(if x >= *hi && hi > lo { libm::nextafter(*hi, *lo) } else { x })
        }
    }
}

/// Completed trials with a finite value, best first (ties by id).
pub fn ranked_complete(history: &[Trial]) -> Vec<&Trial> {
    let mut done: Vec<&Trial> = history
        .iter()
        .filter(|t| t.state == TrialState::Complete && t.value.is_some_and(f64::is_finite))
        .collect();
    done.sort_by(|a, b| {
        a.value
            .unwrap()
            .total_cmp(&b.value.unwrap())
            .then(a.id.cmp(&b.id))
    });
    done
}

fn observed<'t>(trials: &[&'t Trial], name: &str, dist: &Distribution) -> Vec<&'t ParamValue> {
    trials
        .iter()
        .filter_map(|t| t.params.get(name))
        .filter(|v| dist.contains(v))
        .collect()
}

/// Proposes parameters given the finished trials in `history`.
pub fn suggest(
    history: &[Trial],
    space: &SearchSpace,
    sampler: SamplerKind,
    tpe: &TpeConfig,
    rng: &mut RngState,
) -> Params {
    let done = ranked_complete(history);
    let uniform = sampler == SamplerKind::Random || done.len() < tpe.n_startup_trials.max(1);
    let n_good = tpe.gamma(done.len());
    let mut out = Params::new();
    for (name, dist) in &space.params {
        let value = if uniform {
            sample_uniform(dist, rng)
        } else {
            let (good, rest) = done.split_at(n_good);
            let (good, rest) = (observed(good, name, dist), observed(rest, name, dist));
            sample_tpe(dist, &good, &rest, tpe.n_ei_candidates.max(1), rng)
        };
        out.insert(name.clone(), value);
    }
    out
}

/// Median of a non-empty slice (mean of the two middle values when even).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// True iff `value` reported by trial `trial_id` at `step` is strictly above
/// the median of earlier trials' values at the same step.
pub fn should_prune(
    history: &[Trial],
    trial_id: usize,
    step: usize,
    value: f64,
    pruner: &MedianPrunerConfig,
) -> bool {
    if trial_id < pruner.n_warmup_trials || step < pruner.n_warmup_steps {
        return false;
    }
    let prior: Vec<f64> = history
        .iter()
        .filter(|t| t.id < trial_id)
        .filter_map(|t| t.intermediates.get(&step).copied())
        .filter(|v| !v.is_nan())
        .collect();
    if prior.is_empty() {
        return false;
    }
    value > median(&prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StudyEvent {
    Suggested { trial: usize, params: Params },
    Intermediate { trial: usize, step: usize, value: f64 },
    Completed { trial: usize, value: f64 },
    Pruned { trial: usize, step: usize },
    Failed { trial: usize, reason: String },
}

impl StudyEvent {
    pub fn trial(&self) -> usize {
        match self {
            StudyEvent::Suggested { trial, .. }
            | StudyEvent::Intermediate { trial, .. }
            | StudyEvent::Completed { trial, .. }
            | StudyEvent::Pruned { trial, .. }
            | StudyEvent::Failed { trial, .. } => *trial,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            StudyEvent::Completed { .. } | StudyEvent::Pruned { .. } | StudyEvent::Failed { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub space: SearchSpace,
    pub sampler: SamplerKind,
    pub tpe: TpeConfig,
    pub pruner: MedianPrunerConfig,
}

impl StudyConfig {
    pub fn new(space: SearchSpace, seed: u64) -> Self {
        Self {
            seed,
            space,
            sampler: SamplerKind::Tpe,
            tpe: TpeConfig::default(),
            pruner: MedianPrunerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub config: StudyConfig,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        config.space.validate()?;
        Ok(Self {
            config,
            trials: Vec::new(),
        })
    }

    /// Rebuilds a study from its event log. Events of a trial that never
    /// reached a terminal event are dropped.
    pub fn replay<'e>(config: StudyConfig, events: impl IntoIterator<Item = &'e StudyEvent>) -> Result<Self> {
        let events: Vec<&StudyEvent> = events.into_iter().collect();
        let finished: Vec<usize> = events.iter().filter(|e| e.is_terminal()).map(|e| e.trial()).collect();
        let mut study = Self::new(config)?;
        for e in events.into_iter().filter(|e| finished.contains(&e.trial())) {
            study.apply(e)?;
        }
        if study.trials.iter().any(|t| !t.is_finished()) {
            return Err(Error::Invalid("study log has an unfinished trial before a finished one".into()));
        }
        Ok(study)
    }

    pub fn apply(&mut self, event: &StudyEvent) -> Result<()> {
        let id = event.trial();
        if let StudyEvent::Suggested { params, .. } = event {
            if id != self.trials.len() {
                return Err(Error::Invalid(format!(
                    "trial {id} suggested but next trial id is {}",
                    self.trials.len()
                )));
            }
            self.trials.push(Trial {
                id,
                params: params.clone(),
                intermediates: BTreeMap::new(),
                value: None,
                state: TrialState::Running,
            });
            return Ok(());
        }
        let trial = self
            .trials
            .get_mut(id)
            .filter(|t| t.state == TrialState::Running)
            .ok_or_else(|| Error::Invalid(format!("event for unknown or finished trial {id}")))?;
        match event {
            StudyEvent::Suggested { .. } => unreachable!(),
            StudyEvent::Intermediate { step, value, .. } => {
                trial.intermediates.insert(*step, *value);
            }
            StudyEvent::Completed { value, .. } => {
                trial.value = Some(*value);
                trial.state = TrialState::Complete;
            }
            StudyEvent::Pruned { .. } => trial.state = TrialState::Pruned,
            StudyEvent::Failed { .. } => trial.state = TrialState::Failed,
        }
        Ok(())
    }

    pub fn best(&self) -> Option<&Trial> {
        ranked_complete(&self.trials).first().copied()
    }

    /// Parameters for the next trial, conditioned on the trials finished so far.
    pub fn ask(&self) -> (usize, Params) {
        let id = self.trials.len();
        (id, self.ask_with(&self.trials, id))
    }

    /// Parameters for trial `id` conditioned on `history`.
    pub fn ask_with(&self, history: &[Trial], id: usize) -> Params {
        let c = &self.config;
        let mut rng = RngState::derive(c.seed, STREAM_SUGGEST + id as u64);
        suggest(history, &c.space, c.sampler, &c.tpe, &mut rng)
    }
}

/// What a trial's objective hands back.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialOutcome {
    Complete(f64),
    Pruned,
    Failed(String),
}

/// View of a running trial given to the objective.
pub struct TrialContext<'h> {
    history: &'h [Trial],
    pruner: MedianPrunerConfig,
    id: usize,
    seed: u64,
    params: Params,
    events: Vec<StudyEvent>,
    last_step: Option<usize>,
}

impl<'h> TrialContext<'h> {
    pub fn new(history: &'h [Trial], pruner: MedianPrunerConfig, id: usize, seed: u64, params: Params) -> Self {
        let events = vec![StudyEvent::Suggested {
            trial: id,
            params: params.clone(),
        }];
        Self {
            history,
            pruner,
            id,
            seed,
            params,
            events,
            last_step: None,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Seed reserved for this trial's own randomness.
    pub fn seed(&self) -> u64 {
        RngState::derive(self.seed, STREAM_TRIAL + self.id as u64).next_u64()
    }

    /// Records an intermediate value; `Stop` means the trial should be pruned.
    pub fn report(&mut self, step: usize, value: f64) -> Control {
        self.events.push(StudyEvent::Intermediate {
            trial: self.id,
            step,
            value,
        });
        self.last_step = Some(step);
        if should_prune(self.history, self.id, step, value, &self.pruner) {
            Control::Stop
        } else {
            Control::Continue
        }
    }

    /// The trial's full event list, ending with its terminal event.
    pub fn finish(mut self, outcome: TrialOutcome) -> Vec<StudyEvent> {
        let trial = self.id;
        self.events.push(match outcome {
            TrialOutcome::Complete(value) if value.is_finite() => StudyEvent::Completed { trial, value },
            TrialOutcome::Complete(value) => StudyEvent::Failed {
                trial,
                reason: format!("non-finite objective value {value}"),
            },
            TrialOutcome::Pruned => StudyEvent::Pruned {
                trial,
                step: self.last_step.unwrap_or(0),
            },
            TrialOutcome::Failed(reason) => StudyEvent::Failed { trial, reason },
        });
        self.events
    }
}

pub trait SearchObjective {
    fn evaluate(&mut self, ctx: &mut TrialContext<'_>) -> TrialOutcome;
}

impl<F: FnMut(&mut TrialContext<'_>) -> TrialOutcome> SearchObjective for F {
    fn evaluate(&mut self, ctx: &mut TrialContext<'_>) -> TrialOutcome {
        self(ctx)
    }
}

/// Receives every event as soon as its trial finishes.
pub trait StudyStore {
    fn record(&mut self, events: &[StudyEvent]) -> Result<()>;
}

impl StudyStore for Vec<StudyEvent> {
    fn record(&mut self, events: &[StudyEvent]) -> Result<()> {
        self.extend_from_slice(events);
        Ok(())
    }
}

/// Discards events.
pub struct NoStore;

impl StudyStore for NoStore {
    fn record(&mut self, _: &[StudyEvent]) -> Result<()> {
        Ok(())
    }
}

/// Runs trials sequentially until the study holds `n_trials`.
pub fn run_study(
    study: &mut Study,
    objective: &mut dyn SearchObjective,
    n_trials: usize,
    store: &mut dyn StudyStore,
) -> Result<()> {
    if n_trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    while study.trials.len() < n_trials {
        let (id, params) = study.ask();
        let mut ctx = TrialContext::new(&study.trials, study.config.pruner, id, study.config.seed, params);
        let outcome = objective.evaluate(&mut ctx);
        let events = ctx.finish(outcome);
        for e in &events {
            study.apply(e)?;
        }
        store.record(&events)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Aggregate {
    Mean(f64),
    Mode(String),
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregate::Mean(x) => write!(f, "{x:.2}"),
            Aggregate::Mode(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub trials: usize,
    pub params: Vec<(String, Aggregate)>,
    pub mean_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub best: GroupSummary,
    pub worst: GroupSummary,
}

fn summarize_group(space: &SearchSpace, trials: &[&Trial]) -> GroupSummary {
    let n = trials.len() as f64;
    let params = space
        .params
        .iter()
        .map(|(name, dist)| {
            let vals: Vec<&ParamValue> = trials.iter().filter_map(|t| t.params.get(name)).collect();
            let agg = match dist {
                Distribution::Categorical { choices } => {
                    // most frequent; ties go to the earlier declared choice
                    let best = choices
                        .iter()
                        .max_by(|a, b| {
                            let count = |c: &String| vals.iter().filter(|v| matches!(v, ParamValue::Cat(x) if x == c)).count();
                            count(a).cmp(&count(b)).then(Ordering::Greater)
                        })
                        .cloned()
                        .unwrap_or_default();
                    Aggregate::Mode(best)
                }
                _ => {
                    let xs: Vec<f64> = vals.iter().filter_map(|v| v.as_f64()).collect();
                    Aggregate::Mean(xs.iter().sum::<f64>() / xs.len().max(1) as f64)
                }
            };
            (name.clone(), agg)
        })
        .collect();
    GroupSummary {
        trials: trials.len(),
        params,
        mean_value: trials.iter().filter_map(|t| t.value).sum::<f64>() / n,
    }
}

/// Parameter means (numeric) and modes (categorical) over the best and worst
/// fractions of completed trials. Group sizes are `ceil(frac · n)`, at least 1.
pub fn summarize_study(study: &Study, top_frac: f64, bottom_frac: f64) -> Result<StudySummary> {
    let done = ranked_complete(&study.trials);
    if done.is_empty() {
        return Err(Error::Empty("completed trials".into()));
    }
    let size = |f: f64| (libm::ceil(f * done.len() as f64) as usize).clamp(1, done.len());
    let (nb, nw) = (size(top_frac), size(bottom_frac));
    let space = &study.config.space;
    Ok(StudySummary {
        best: summarize_group(space, &done[..nb]),
        worst: summarize_group(space, &done[done.len() - nw..]),
    })
}

fn param_int(params: &Params, name: &str) -> Result<usize> {
    match params.get(name) {
        Some(ParamValue::Int(x)) if *x >= 1 => Ok(*x as usize),
        Some(v) => Err(Error::config(name, format!("expected a positive integer, got {v}"))),
        None => Err(Error::config(name, "missing")),
    }
}

fn param_float(params: &Params, name: &str) -> Result<f64> {
    params
        .get(name)
        .and_then(ParamValue::as_f64)
        .ok_or_else(|| Error::config(name, "expected a number"))
}

fn param_cat<'p>(params: &'p Params, name: &str) -> Result<&'p str> {
    match params.get(name) {
        Some(ParamValue::Cat(c)) => Ok(c),
        _ => Err(Error::config(name, "expected a category")),
    }
}

/// Parameter names the pretraining objective understands.
pub const PRETRAIN_PARAMS: [&str; 9] = [
    "pos_type",
    "activation",
    "num_layers",
    "num_heads",
    "head_size",
    "ffn_size",
    "dropout",
    "attention_dropout",
    "learning_rate",
];

/// Maps sampled parameters onto an MLM model config. Parameters absent from
/// `params` keep the value in `base`; dropouts are clamped to [`MAX_DROPOUT`].
pub fn params_to_config(params: &Params, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.objective = Objective::Mlm;
    cfg.mask_token_id = Some(MASK_ID);
    if params.contains_key("pos_type") {
        cfg.pos_type = param_cat(params, "pos_type")?.parse::<PosType>()?;
    }
    if params.contains_key("activation") {
        cfg.activation = param_cat(params, "activation")?.parse::<Activation>()?;
    }
    for (name, field) in [
        ("num_layers", &mut cfg.num_layers),
        ("num_heads", &mut cfg.num_heads),
        ("head_size", &mut cfg.head_size),
        ("ffn_size", &mut cfg.ffn_size),
    ] {
        if params.contains_key(name) {
            *field = param_int(params, name)?;
        }
    }
    if params.contains_key("dropout") {
        cfg.dropout = param_float(params, "dropout")?.min(MAX_DROPOUT) as f32;
    }
    if params.contains_key("attention_dropout") {
        cfg.attention_dropout = param_float(params, "attention_dropout")?.min(MAX_DROPOUT) as f32;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains an MLM built from the trial's parameters and returns the final
/// validation perplexity, reporting each epoch's perplexity to the pruner.
pub struct PretrainObjective<'d> {
    pub train: &'d Packed,
    pub valid: &'d Packed,
    pub base_model: ModelConfig,
    pub train_config: TrainConfig,
    pub policy: MaskingPolicy,
    /// Wall-clock source for epoch metrics.
    pub clock: Option<fn() -> f64>,
}

struct ReportHooks<'c, 'h> {
    ctx: &'c mut TrialContext<'h>,
    pruned: bool,
    clock: Option<fn() -> f64>,
}

impl TrainHooks for ReportHooks<'_, '_> {
    fn now(&mut self) -> f64 {
        self.clock.map_or(0.0, |f| f())
    }

    fn on_epoch(&mut self, _: &TransformerModel, m: &EpochMetrics) -> Result<Control> {
        let c = self.ctx.report(m.epoch, m.perplexity);
        self.pruned = c == Control::Stop;
        Ok(c)
    }
}

impl SearchObjective for PretrainObjective<'_> {
    fn evaluate(&mut self, ctx: &mut TrialContext<'_>) -> TrialOutcome {
        let cfg = match params_to_config(ctx.params(), &self.base_model) {
            Ok(c) => c,
            Err(e) => return TrialOutcome::Failed(e.to_string()),
        };
        let seed = ctx.seed();
        let mut model = match TransformerModel::init(cfg, seed) {
            Ok(m) => m,
            Err(e) => return TrialOutcome::Failed(e.to_string()),
        };
        let mut tc = TrainConfig {
            seed,
            ..self.train_config.clone()
        };
        if ctx.params().contains_key("learning_rate") {
            match param_float(ctx.params(), "learning_rate") {
                Ok(lr) => tc.learning_rate = lr,
                Err(e) => return TrialOutcome::Failed(e.to_string()),
            }
        }
        let mut hooks = ReportHooks {
            ctx,
            pruned: false,
            clock: self.clock,
        };
        match training::train(&mut model, self.train, self.valid, &tc, &self.policy, &mut hooks) {
            Ok(_) if hooks.pruned => TrialOutcome::Pruned,
            Ok(log) => match log.last() {
                Some(m) => TrialOutcome::Complete(m.perplexity),
                None => TrialOutcome::Failed("no epochs ran".into()),
            },
            Err(e) => TrialOutcome::Failed(e.to_string()),
        }
    }
}
