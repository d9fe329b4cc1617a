//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tinylm_core::data::compute_stats;
use tinylm_core::eval::{
    balanced_class_weights, encode_example, finetune_classifier, minimal_pair_accuracy, score_sentence,
    ClassificationExample, FinetuneConfig, MinimalPair, Normalization,
};
use tinylm_core::model::param_count;
use tinylm_core::search::{
    summarize_study, Distribution, ParamValue, PretrainObjective, SamplerKind, PRETRAIN_PARAMS, SearchObjective,
};
use tinylm_core::training::{Control, EpochMetrics, TrainHooks};
use tinylm_core::{
    pack_corpus, train, train_bpe, Packed, StudyConfig, Tokenizer, TokenizerConfig, TransformerModel, TrialContext,
    TrialOutcome,
};

use crate::config::{RunConfig, DEFAULT_SPACE};
use crate::error::{CliError, IoContext, Kind, Result};
use crate::io::{load_checkpoint, load_corpus, load_tokenizer, save_checkpoint, save_tokenizer, write_atomic};
use crate::manifest::{unix_now, RunManifest};
use crate::study::{open_study, parse_space, run_parallel, summary_tsv, StudyFile, BEST_FILE, SUMMARY_FILE};

#[derive(Debug, Parser)]
#[command(name = "tinylm", version, about = "Train, search and evaluate tiny transformer language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Byte-level BPE tokenizers.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Per-source corpus statistics as TSV.
    Stats(StatsArgs),
    /// Pretrain a model on a corpus.
    Pretrain(PretrainArgs),
    /// Architecture search with TPE sampling and median pruning.
    Search(SearchArgs),
    /// Parameter count of a model config.
    Params(ParamsArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Fine-tune a checkpoint on a classification task.
    Finetune(FinetuneArgs),
    /// Log-probability of a sentence.
    Score(ScoreArgs),
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    Train(TokenizerTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Config file or bundled preset name.
    #[arg(long, default_value = "bebeshka")]
    pub config: String,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Existing tokenizer directory; otherwise one is trained on the corpus.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveKind {
    /// Final validation perplexity of a pretrained MLM.
    Pretrain,
    /// Always 1.0; for exercising the study machinery.
    Constant,
    /// Squared distance of the normalised parameters from 0.3.
    Quadratic,
}

impl ObjectiveKind {
    fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Pretrain => "pretrain",
            ObjectiveKind::Constant => "constant",
            ObjectiveKind::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Tpe,
    Random,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Space file, or `default` for the bundled architecture space.
    #[arg(long, default_value = "default")]
    pub space: String,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Total number of trials in the study.
    #[arg(long)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_enum, default_value_t = ObjectiveKind::Pretrain)]
    pub objective: ObjectiveKind,
    #[arg(long, value_enum, default_value_t = SamplerArg::Tpe)]
    pub sampler: SamplerArg,
    /// Base model and training settings for the pretrain objective.
    #[arg(long, default_value = "bebeshka")]
    pub config: String,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: String,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Minimal-pair accuracy from a JSONL file of `sentence_good`/`sentence_bad` pairs.
    Pairs(PairsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Sum,
    PerToken,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum, default_value_t = NormArg::Sum)]
    pub normalize: NormArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetunePreset {
    Auto,
    Encoder,
    Decoder,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training TSV: `text_a[<TAB>text_b]<TAB>label`.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long, value_enum, default_value_t = FinetunePreset::Auto)]
    pub preset: FinetunePreset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight classes by inverse frequency.
    #[arg(long)]
    pub balanced: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub text: String,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Kind::Usage, first));
            return 2;
        }
    };
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    let argv = argv.to_vec();
    match cmd {
        Command::Tokenizer(TokenizerCmd::Train(a)) => tokenizer_train(a, argv),
        Command::Stats(a) => stats(a, argv),
        Command::Pretrain(a) => pretrain(a, argv),
        Command::Search(a) => search(a, argv),
        Command::Params(a) => params(a),
        Command::Eval(EvalCmd::Pairs(a)) => eval_pairs(a, argv),
        Command::Finetune(a) => finetune(a, argv),
        Command::Score(a) => score(a),
    }
}

fn tokenizer_train(a: TokenizerTrainArgs, argv: Vec<String>) -> Result<()> {
    let mut man = RunManifest::start(argv, None, None, &[&a.corpus])?;
    let corpus = load_corpus(&a.corpus)?;
    let tok = train_bpe(corpus.lines(), &TokenizerConfig::new(a.vocab_size, a.lowercase))?;
    save_tokenizer(&tok, &a.out)?;
    eprintln!("trained {} tokens ({} merges)", tok.vocab_size(), tok.merges().len());
    man.finish();
    man.write(&a.out)
}

fn stats(a: StatsArgs, argv: Vec<String>) -> Result<()> {
    let mut man = RunManifest::start(argv, None, None, &[&a.corpus, &a.tokenizer])?;
    let corpus = load_corpus(&a.corpus)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let tsv = compute_stats(&corpus, &tok)?.to_tsv();
    print!("{tsv}");
    if let Some(out) = &a.out {
        write_atomic(out, tsv.as_bytes())?;
    }
    man.finish();
    man.emit_stderr();
    Ok(())
}

fn encode_lines(tok: &Tokenizer, corpus: &tinylm_core::data::Corpus) -> Vec<Vec<u32>> {
    corpus.lines().map(|l| tok.encode(l)).collect()
}

fn pack(tok: &Tokenizer, path: &Path, window: usize) -> Result<Packed> {
    let corpus = load_corpus(path)?;
    let docs = encode_lines(tok, &corpus);
    Ok(pack_corpus(&docs, window, tinylm_core::tokenizer::EOS_ID, tinylm_core::tokenizer::PAD_ID)?)
}

/// Loads `--tokenizer` or trains one on the corpus sized to the model.
fn tokenizer_for(cfg: &RunConfig, given: Option<&Path>, corpus: &Path) -> Result<Tokenizer> {
    let tok = match given {
        Some(dir) => load_tokenizer(dir)?,
        None => {
            let c = load_corpus(corpus)?;
            train_bpe(c.lines(), &TokenizerConfig::new(cfg.model.vocab_size, cfg.lowercase))?
        }
    };
    if tok.vocab_size() > cfg.model.vocab_size {
        return Err(CliError::config(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tok.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    Ok(tok)
}

struct PretrainHooks<'a> {
    out: &'a Path,
    tokenizer: &'a Tokenizer,
    metrics: String,
}

impl TrainHooks for PretrainHooks<'_> {
    fn now(&mut self) -> f64 {
        unix_now()
    }

    fn on_epoch(&mut self, model: &TransformerModel, m: &EpochMetrics) -> tinylm_core::Result<Control> {
        eprintln!(
            "epoch {}: train_loss {:.4} valid_loss {:.4} ppl {:.2} ({:.0}s)",
            m.epoch, m.train_loss, m.valid_loss, m.perplexity, m.wall_time_secs
        );
        let fail = |e: CliError| tinylm_core::Error::Invalid(e.to_string());
        self.metrics.push_str(&serde_json::to_string(m).map_err(|e| tinylm_core::Error::Invalid(e.to_string()))?);
        self.metrics.push('\n');
        write_atomic(&self.out.join("metrics.jsonl"), self.metrics.as_bytes()).map_err(fail)?;
        save_checkpoint(model, self.tokenizer, &self.out.join(format!("epoch-{}", m.epoch))).map_err(fail)?;
        Ok(Control::Continue)
    }
}

fn pretrain(a: PretrainArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let mut inputs: Vec<&Path> = vec![&a.corpus, &a.val];
    if let Some(t) = &a.tokenizer {
        inputs.push(t);
    }
    let mut man = RunManifest::start(argv, Some(cfg.train.seed), Some(cfg.to_text()), &inputs)?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    let tok = tokenizer_for(&cfg, a.tokenizer.as_deref(), &a.corpus)?;
    save_tokenizer(&tok, &a.out.join("tokenizer"))?;
    let train_data = pack(&tok, &a.corpus, cfg.window)?;
    let valid_data = pack(&tok, &a.val, cfg.window)?;
    let mut model = TransformerModel::init(cfg.model.clone(), cfg.train.seed)?;
    eprintln!(
        "{} parameters, {} training windows of {} tokens",
        model.num_params(),
        train_data.num_windows(),
        cfg.window
    );
    let mut hooks = PretrainHooks {
        out: &a.out,
        tokenizer: &tok,
        metrics: String::new(),
    };
    train(&mut model, &train_data, &valid_data, &cfg.train, &cfg.masking, &mut hooks)?;
    save_checkpoint(&model, &tok, &a.out.join("model"))?;
    man.finish();
    man.write(&a.out)
}

/// Position of a value inside its distribution, scaled to [0, 1].
fn unit_position(d: &Distribution, v: &ParamValue) -> f64 {
    match (d, v) {
        (Distribution::Int { lo, hi }, ParamValue::Int(x)) if hi > lo => (x - lo) as f64 / (hi - lo) as f64,
        (Distribution::Float { lo, hi }, ParamValue::Float(x)) => (x - lo) / (hi - lo),
        (Distribution::Categorical { choices }, ParamValue::Cat(c)) => {
            let i = choices.iter().position(|x| x == c).unwrap_or(0);
            if choices.len() > 1 {
                i as f64 / (choices.len() - 1) as f64
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

fn quadratic(space: &tinylm_core::SearchSpace, ctx: &mut TrialContext<'_>) -> TrialOutcome {
    let value: f64 = space
        .params
        .iter()
        .filter_map(|(n, d)| ctx.params().get(n).map(|v| (unit_position(d, v) - 0.3).powi(2)))
        .sum();
    for step in 1..=3 {
        if ctx.report(step, value + 1.0 / step as f64) == Control::Stop {
            return TrialOutcome::Pruned;
        }
    }
    TrialOutcome::Complete(value)
}

fn search(a: SearchArgs, argv: Vec<String>) -> Result<()> {
    let space = if a.space == "default" {
        parse_space(DEFAULT_SPACE, "default space")?
    } else {
        let p = Path::new(&a.space);
        parse_space(&fs::read_to_string(p).at(p)?, &a.space)?
    };
    let mut study_cfg = StudyConfig::new(space, a.seed);
    study_cfg.sampler = match a.sampler {
        SamplerArg::Tpe => SamplerKind::Tpe,
        SamplerArg::Random => SamplerKind::Random,
    };

    let mut inputs: Vec<&Path> = Vec::new();
    let mut run_cfg = None;
    if a.objective == ObjectiveKind::Pretrain {
        let (Some(c), Some(v)) = (&a.corpus, &a.val) else {
            return Err(CliError::new(Kind::Usage, "--objective pretrain needs --corpus and --val"));
        };
        if let Some((name, _)) = study_cfg.space.params.iter().find(|(n, _)| !PRETRAIN_PARAMS.contains(&n.as_str())) {
            return Err(CliError::config(format!(
                "{}: `{name}` cannot be searched; expected one of {}",
                a.space,
                PRETRAIN_PARAMS.join(", ")
            )));
        }
        inputs.extend([c.as_path(), v.as_path()]);
        if let Some(t) = &a.tokenizer {
            inputs.push(t);
        }
        run_cfg = Some(RunConfig::load(&a.config)?);
    }
    let file = StudyFile {
        objective: a.objective.name().to_string(),
        workers: a.workers,
        study: study_cfg,
    };
    let mut man = RunManifest::start(argv, Some(a.seed), run_cfg.as_ref().map(RunConfig::to_text), &inputs)?;
    let (mut study, mut store) = open_study(&a.out, &file, a.resume)?;
    if study.trials.len() >= a.trials {
        eprintln!("study already holds {} trials", study.trials.len());
    }

    match a.objective {
        ObjectiveKind::Constant => run_parallel(
            &mut study,
            &|ctx: &mut TrialContext<'_>| {
                ctx.report(1, 1.0);
                TrialOutcome::Complete(1.0)
            },
            a.trials,
            a.workers,
            &mut store,
        )?,
        ObjectiveKind::Quadratic => {
            let space = file.study.space.clone();
            run_parallel(&mut study, &|ctx: &mut TrialContext<'_>| quadratic(&space, ctx), a.trials, a.workers, &mut store)?
        }
        ObjectiveKind::Pretrain => {
            let cfg = run_cfg.expect("loaded above");
            let corpus = a.corpus.as_deref().expect("checked above");
            let tok = tokenizer_for(&cfg, a.tokenizer.as_deref(), corpus)?;
            let train_data = pack(&tok, corpus, cfg.window)?;
            let valid_data = pack(&tok, a.val.as_deref().expect("checked above"), cfg.window)?;
            let objective = |ctx: &mut TrialContext<'_>| {
                let mut o = PretrainObjective {
                    train: &train_data,
                    valid: &valid_data,
                    base_model: cfg.model.clone(),
                    train_config: cfg.train.clone(),
                    policy: cfg.masking,
                    clock: Some(unix_now),
                };
                let out = o.evaluate(ctx);
                eprintln!("trial {}: {:?}", ctx.id(), out);
                out
            };
            run_parallel(&mut study, &objective, a.trials, a.workers, &mut store)?
        }
    }

    if let Some(best) = study.best() {
        let text = serde_json::to_string_pretty(best).map_err(|e| CliError::format(&a.out, e))?;
        write_atomic(&a.out.join(BEST_FILE), text.as_bytes())?;
        let summary = summarize_study(&study, 0.1, 0.1)?;
        write_atomic(&a.out.join(SUMMARY_FILE), summary_tsv(&summary).as_bytes())?;
        println!("best trial {} value {}", best.id, best.value.unwrap_or(f64::NAN));
    } else {
        println!("no trial completed");
    }
    man.finish();
    man.write(&a.out)
}

fn params(a: ParamsArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    println!("{}", param_count(&cfg.model));
    Ok(())
}

fn eval_pairs(a: PairsArgs, argv: Vec<String>) -> Result<()> {
    let mut man = RunManifest::start(argv, None, None, &[&a.model, &a.pairs])?;
    let ck = load_checkpoint(&a.model)?;
    let text = fs::read_to_string(&a.pairs).at(&a.pairs)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: MinimalPair =
            serde_json::from_str(line).map_err(|e| CliError::format(&a.pairs, format!("line {}: {e}", i + 1)))?;
        pairs.push(p);
    }
    let norm = match a.normalize {
        NormArg::Sum => Normalization::Sum,
        NormArg::PerToken => Normalization::PerToken,
    };
    let report = minimal_pair_accuracy(&pairs, |s| {
        Ok(score_sentence(&ck.model, &ck.tokenizer, s)?.value(norm))
    })?;
    println!("phenomenon\tcorrect\ttotal\taccuracy");
    for g in report.phenomena.iter().chain(std::iter::once(&report.overall)) {
        println!("{}\t{}\t{}\t{:.4}", g.name, g.correct, g.total, g.accuracy());
    }
    man.finish();
    man.emit_stderr();
    Ok(())
}

/// `text_a[<TAB>text_b]<TAB>label` rows. A first row ending in `label`
/// is a header.
pub fn read_task(path: &Path) -> Result<Vec<ClassificationExample>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.trim_end().ends_with("\tlabel")) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| CliError::format(path, format!("line {}: {m}", i + 1));
        if !(2..=3).contains(&cols.len()) {
            return Err(bad("expected 2 or 3 tab-separated columns"));
        }
        let (label, texts) = cols.split_last().expect("at least two columns");
        let label = label.trim().parse().map_err(|_| bad("label must be a non-negative integer"))?;
        out.push(ClassificationExample {
            text_a: texts[0].to_string(),
            text_b: texts.get(1).map(|s| s.to_string()),
            label,
        });
    }
    if out.is_empty() {
        return Err(CliError::new(Kind::Data, format!("{}: no examples", path.display())));
    }
    Ok(out)
}

fn finetune(a: FinetuneArgs, argv: Vec<String>) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let mut cfg = match a.preset {
        FinetunePreset::Auto => FinetuneConfig::for_model(&ck.model),
        FinetunePreset::Encoder => FinetuneConfig::encoder(),
        FinetunePreset::Decoder => FinetuneConfig::decoder(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    let mut man = RunManifest::start(argv, Some(cfg.train.seed), None, &[&a.model, &a.task, &a.valid])?;
    let max_len = ck.model.config().max_seq_len;
    let enc = |xs: Vec<ClassificationExample>| -> Vec<_> {
        xs.iter().map(|x| encode_example(&ck.tokenizer, x, max_len)).collect()
    };
    let train_set = enc(read_task(&a.task)?);
    let valid_set = enc(read_task(&a.valid)?);
    let arity = train_set.iter().chain(&valid_set).map(|e| e.label + 1).max().unwrap_or(2).max(2);
    if a.balanced {
        cfg.class_weights = Some(balanced_class_weights(&train_set, arity));
    }
    let (_, epochs) = finetune_classifier(ck.model, arity, &train_set, &valid_set, &cfg)?;
    let mut lines = String::new();
    for e in &epochs {
        let line = serde_json::to_string(e).map_err(|e| CliError::format(&a.task, e))?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    man.finish();
    match &a.out {
        Some(out) => {
            fs::create_dir_all(out).at(out)?;
            write_atomic(&out.join("metrics.jsonl"), lines.as_bytes())?;
            man.write(out)
        }
        None => {
            man.emit_stderr();
            Ok(())
        }
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model)?;
    let s = score_sentence(&ck.model, &ck.tokenizer, &a.text)?;
    println!("log_prob\t{:.6}\ntokens\t{}\nper_token\t{:.6}", s.log_prob, s.tokens, s.value(Normalization::PerToken));
    Ok(())
}
