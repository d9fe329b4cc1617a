//! Search-space files, the JSONL study log and the batch-parallel runner.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinylm_core::search::{Distribution, StudySummary};
use tinylm_core::{SearchSpace, Study, StudyConfig, StudyEvent, Trial, TrialContext, TrialOutcome};

use crate::error::{CliError, IoContext, Kind, Result};
use crate::io::write_atomic;

pub const STUDY_FILE: &str = "study.json";
pub const LOG_FILE: &str = "trials.jsonl";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const BEST_FILE: &str = "best.json";

/// Parses lines of the form `name = int LO HI`, `name = float LO HI` or
/// `name = categorical A B ...`, keeping declaration order.
pub fn parse_space(text: &str, origin: &str) -> Result<SearchSpace> {
    let mut params = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| CliError::config(format!("{origin}:{}: {m}", i + 1));
        let (name, rest) = line
            .split_once('=')
            .ok_or_else(|| err("expected `name = kind args...`".into()))?;
        let mut words = rest.split_whitespace();
        let kind = words.next().ok_or_else(|| err("missing distribution kind".into()))?;
        let args: Vec<&str> = words.collect();
        let bounds = |args: &[&'_ str]| -> Result<(String, String)> {
            match args {
                [lo, hi] => Ok((lo.to_string(), hi.to_string())),
                _ => Err(err(format!("{kind} takes exactly two bounds"))),
            }
        };
        let dist = match kind {
            "int" => {
                let (lo, hi) = bounds(&args)?;
                Distribution::Int {
                    lo: lo.parse().map_err(|e| err(format!("{lo:?}: {e}")))?,
                    hi: hi.parse().map_err(|e| err(format!("{hi:?}: {e}")))?,
                }
            }
            "float" => {
                let (lo, hi) = bounds(&args)?;
                Distribution::Float {
                    lo: lo.parse().map_err(|e| err(format!("{lo:?}: {e}")))?,
                    hi: hi.parse().map_err(|e| err(format!("{hi:?}: {e}")))?,
                }
            }
            "categorical" => Distribution::Categorical {
                choices: args.iter().map(|s| s.to_string()).collect(),
            },
            other => return Err(err(format!("unknown distribution kind {other:?}"))),
        };
        params.push((name.trim().to_string(), dist));
    }
    let space = SearchSpace { params };
    space.validate().map_err(|e| CliError::config(format!("{origin}: {e}")))?;
    Ok(space)
}

/// Settings stored next to the log so a resumed run can check it matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFile {
    pub objective: String,
    /// Batch width of the parallel runner; part of the study's identity.
    pub workers: usize,
    pub study: StudyConfig,
}

/// Appends each trial's events as JSON lines and flushes after every trial.
pub struct JsonlStore {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlStore {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, events: &[StudyEvent]) -> Result<()> {
        for e in events {
            let line = serde_json::to_string(e).map_err(|e| CliError::format(&self.path, e))?;
            writeln!(self.out, "{line}").at(&self.path)?;
        }
        self.out.flush().at(&self.path)?;
        self.out.get_ref().sync_data().at(&self.path)
    }
}

/// Reads a log. A final line cut short by a crash is ignored; any other
/// malformed line is an error.
pub fn read_log(path: &Path) -> Result<Vec<StudyEvent>> {
    let f = File::open(path).at(path)?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>().at(path)?;
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == lines.len() => {
                eprintln!("warning: {}: ignoring truncated last line", path.display());
            }
            Err(e) => return Err(CliError::format(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(events)
}

/// Creates a fresh study in `dir`, or with `resume` reloads the one there.
/// Resuming drops the events of unfinished trials and rewrites the log.
pub fn open_study(dir: &Path, file: &StudyFile, resume: bool) -> Result<(Study, JsonlStore)> {
    fs::create_dir_all(dir).at(dir)?;
    let study_path = dir.join(STUDY_FILE);
    let log_path = dir.join(LOG_FILE);
    let study = if resume {
        let text = fs::read_to_string(&study_path).at(&study_path)?;
        let stored: StudyFile = serde_json::from_str(&text).map_err(|e| CliError::format(&study_path, e))?;
        if &stored != file {
            return Err(CliError::config(format!(
                "{}: stored study settings differ from this invocation",
                study_path.display()
            )));
        }
        let events = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
        let study = Study::replay(file.study.clone(), &events).map_err(|e| CliError::format(&log_path, e))?;
        let mut kept = String::new();
        for e in events.iter().filter(|e| e.trial() < study.trials.len()) {
            kept.push_str(&serde_json::to_string(e).map_err(|e| CliError::format(&log_path, e))?);
            kept.push('\n');
        }
        write_atomic(&log_path, kept.as_bytes())?;
        study
    } else {
        if log_path.exists() {
            return Err(CliError::new(
                Kind::Usage,
                format!("{} already exists; pass --resume or choose another --out", log_path.display()),
            ));
        }
        let text = serde_json::to_string_pretty(file).map_err(|e| CliError::format(&study_path, e))?;
        write_atomic(&study_path, text.as_bytes())?;
        Study::new(file.study.clone())?
    };
    let store = JsonlStore::append(&log_path)?;
    Ok((study, store))
}

/// Runs trials until the study holds `n_trials`. Trial ids are grouped into
/// batches `[k·workers, (k+1)·workers)`; every trial of a batch sees only the
/// trials of earlier batches, and results are applied in id order. The log
/// therefore depends on neither thread timing nor where a resumed run
/// restarted. One worker reproduces the sequential runner.
pub fn run_parallel<F>(study: &mut Study, objective: &F, n_trials: usize, workers: usize, store: &mut JsonlStore) -> Result<()>
where
    F: Fn(&mut TrialContext<'_>) -> TrialOutcome + Sync,
{
    if n_trials == 0 {
        return Err(CliError::config("--trials must be at least 1"));
    }
    if workers == 0 {
        return Err(CliError::config("--workers must be at least 1"));
    }
    while study.trials.len() < n_trials {
        let start = study.trials.len();
        let batch_start = start - start % workers;
        let end = (batch_start + workers).min(n_trials);
        let history: Vec<Trial> = study.trials[..batch_start].to_vec();
        let run_one = |id: usize| {
            let params = study.ask_with(&history, id);
            let mut ctx = TrialContext::new(&history, study.config.pruner, id, study.config.seed, params);
            let outcome = objective(&mut ctx);
            ctx.finish(outcome)
        };
        let batch: Vec<Vec<StudyEvent>> = if end - start == 1 {
            vec![run_one(start)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (start..end).map(|id| s.spawn(move || run_one(id))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            })
        };
        for events in batch {
            for e in &events {
                study.apply(e)?;
            }
            store.write(&events)?;
        }
    }
    Ok(())
}

/// `param<TAB>best<TAB>worst` rows, preceded by trial counts and mean values.
pub fn summary_tsv(s: &StudySummary) -> String {
    let mut out = String::from("param\tbest\tworst\n");
    out.push_str(&format!("trials\t{}\t{}\n", s.best.trials, s.worst.trials));
    out.push_str(&format!("value\t{:.4}\t{:.4}\n", s.best.mean_value, s.worst.mean_value));
    for ((name, b), (_, w)) in s.best.params.iter().zip(&s.worst.params) {
        out.push_str(&format!("{name}\t{b}\t{w}\n"));
    }
    out
}
