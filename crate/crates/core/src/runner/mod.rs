//! Run directories, manifests and the subcommand drivers behind the binary.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.txt      subcommand, config hash, seed, steps, lineage, versions
//! config.txt        every resolved config key
//! metrics.csv       one row per optimizer step
//! eval.csv          periodic frozen-feature monitoring
//! checkpoints/      step_XXXXXX.ckpt (+ .meta)
//! run.lock          present while a process owns the directory
//! ```

mod manifest;
mod tools;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::io::write_atomic;
use crate::train::{
    checkpoint_name, evaluate, load_checkpoint, metrics_row, parse_pairs, EvalSet, TrainConfig, TrainPhase, Trainer, EVAL_HEADER,
    METRICS_HEADER,
};

pub use manifest::{config_hash, RunManifest, RunStatus};
pub use tools::{
    curate, diagnose, distill, layer_features, probe, read_roster, run_checkpoint, simulate_distill, student_vit, CurateOptions,
    DiagnoseOptions, DiagnoseReport, DistillOptions, Embedding, ProbeOptions, SimulateOptions, DISTILL_HEADER,
};

pub const SUBCOMMANDS: [&str; 8] = ["pretrain", "refine", "hires-adapt", "distill", "curate", "probe", "diagnose", "simulate-distill"];

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GRAMSSL_THREADS";

/// Size the global rayon pool from `GRAMSSL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Process exit status of a failed run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Lineage(_) => 4,
        _ => 1,
    }
}

/// File keys first, then command-line overrides (`key=value`), so overrides win.
pub fn resolve_pairs(config_path: Option<&Path>, overrides: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = match config_path {
        Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Vec::new(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn load_config(phase: TrainPhase, config_path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    TrainConfig::from_pairs_for(phase, &resolve_pairs(config_path, overrides)?)
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Config(format!("{} is locked by another run (remove run.lock if that run is dead)", dir.display())))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn checkpoint_dir(run: &Path) -> PathBuf {
    run.join("checkpoints")
}

/// Highest-step checkpoint in a run directory.
pub fn latest_checkpoint(run: &Path) -> Result<Option<PathBuf>> {
    let dir = checkpoint_dir(run);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| step > *b) {
            best = Some((step, p));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Keep the header plus rows whose leading step is below `step`.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s < step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Where a refinement or adaptation run starts.
#[derive(Debug, Clone, Default)]
pub struct Lineage {
    /// Checkpoint the student, teacher and optimizer come from.
    pub from: Option<PathBuf>,
    /// Explicit Gram teacher checkpoint; defaults to the sibling
    /// `step_{gram.source_step}` checkpoint of `from`.
    pub gram_teacher: Option<PathBuf>,
}

/// Summary of a finished training invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub start_step: u64,
    pub end_step: u64,
    pub resumed: bool,
    pub last_checkpoint: PathBuf,
}

fn default_gram_teacher(from: &Path, cfg: &TrainConfig) -> PathBuf {
    from.with_file_name(checkpoint_name(cfg.gram.source_checkpoint_step))
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn build_trainer(phase: TrainPhase, cfg: &TrainConfig, run: &Path, lineage: &Lineage) -> Result<(Trainer, Option<PathBuf>, Option<PathBuf>)> {
    if phase == TrainPhase::Pretrain {
        if lineage.from.is_some() || lineage.gram_teacher.is_some() {
            return Err(Error::Lineage("pretrain starts from scratch and takes no --from or --gram-teacher".into()));
        }
        return Ok((Trainer::pretrain(cfg.clone())?, None, None));
    }
    let from = lineage.from.as_deref().ok_or_else(|| Error::Lineage(format!("{phase} needs --from <checkpoint>")))?;
    let run_c = canonical(run);
    if canonical(from).starts_with(&run_c) {
        return Err(Error::Lineage(format!("{} lies inside the run it would seed", from.display())));
    }
    let source = load_checkpoint(from)?;
    let expected = match phase {
        TrainPhase::Refine => [TrainPhase::Pretrain, TrainPhase::Refine].as_slice(),
        _ => [TrainPhase::Pretrain, TrainPhase::Refine, TrainPhase::Adapt].as_slice(),
    };
    if !expected.contains(&source.1.phase) {
        return Err(Error::Lineage(format!("{phase} cannot follow a {} checkpoint", source.1.phase)));
    }
    let mut gram_path = None;
    let gram = if cfg.objective.weights.gram > 0.0 {
        let p = lineage.gram_teacher.clone().unwrap_or_else(|| default_gram_teacher(from, cfg));
        if !p.exists() {
            return Err(Error::Lineage(format!("Gram teacher checkpoint {} not found", p.display())));
        }
        let (gs, gm) = load_checkpoint(&p)?;
        if gm.step > source.1.step {
            return Err(Error::Lineage(format!("Gram teacher (step {}) is later than the source checkpoint (step {})", gm.step, source.1.step)));
        }
        gram_path = Some(p);
        Some(gs.teacher.backbone)
    } else {
        None
    };
    let t = Trainer::continue_from(cfg.clone(), phase, source, gram)?;
    Ok((t, Some(from.to_path_buf()), gram_path))
}

/// Run (or resume) one training phase inside `run`.
///
/// An existing manifest means resume: the resolved config must hash to the
/// stored one and training restarts from the latest checkpoint.
pub fn train(phase: TrainPhase, cfg: TrainConfig, run: &Path, lineage: &Lineage) -> Result<TrainOutcome> {
    let _lock = RunLock::acquire(run)?;
    let subcommand = phase.to_string();
    let config_text = cfg.to_text();
    let hash = config_hash(&config_text);
    let manifest_path = run.join("manifest.txt");
    let ckpts = checkpoint_dir(run);
    fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
    let metrics = run.join("metrics.csv");
    let evals = run.join("eval.csv");

    let existing = if manifest_path.exists() { Some(RunManifest::read(&manifest_path)?) } else { None };
    let latest = latest_checkpoint(run)?;
    let (mut trainer, mut manifest, resumed) = match (existing, latest) {
        (Some(m), Some(ckpt)) => {
            if m.subcommand != subcommand {
                return Err(Error::Lineage(format!("run directory holds a `{}` run, not `{subcommand}`", m.subcommand)));
            }
            if m.config_hash != hash {
                return Err(Error::Config("resolved config differs from the run being resumed".into()));
            }
            let t = Trainer::resume(load_checkpoint(&ckpt)?)?;
            truncate_csv(&metrics, METRICS_HEADER, t.step)?;
            truncate_csv(&evals, EVAL_HEADER, t.step + 1)?;
            (t, m, true)
        }
        (existing, _) => {
            if let Some(m) = &existing {
                if m.subcommand != subcommand {
                    return Err(Error::Lineage(format!("run directory holds a `{}` run, not `{subcommand}`", m.subcommand)));
                }
            }
            let (t, parent, gram) = build_trainer(phase, &cfg, run, lineage)?;
            write_atomic(&metrics, format!("{METRICS_HEADER}\n").as_bytes())?;
            write_atomic(&evals, format!("{EVAL_HEADER}\n").as_bytes())?;
            let m = RunManifest::new(&subcommand, &config_text, cfg.seed, t.step, parent, gram);
            (t, m, false)
        }
    };
    write_atomic(&run.join("config.txt"), config_text.as_bytes())?;
    manifest.status = RunStatus::Running;
    manifest.write(&manifest_path)?;

    let eval_set = if cfg.eval.every > 0 { Some(EvalSet::new(&cfg)?) } else { None };
    let start = trainer.step;
    let mut last = ckpts.join(checkpoint_name(trainer.step));
    if !resumed {
        trainer.save(&last)?;
        if let Some(set) = &eval_set {
            append(&evals, &evaluate(&trainer.state.teacher.backbone, set, &cfg.eval, trainer.step)?.csv_row())?;
        }
    }
    let result = (|| -> Result<()> {
        while trainer.remaining() > 0 {
            let info = trainer.step()?;
            append(&metrics, &metrics_row(&info))?;
            let done = trainer.step;
            let into = done - trainer.phase_start;
            if let Some(set) = &eval_set {
                if into % cfg.eval.every == 0 {
                    append(&evals, &evaluate(&trainer.state.teacher.backbone, set, &cfg.eval, done)?.csv_row())?;
                }
            }
            let is_source = phase == TrainPhase::Pretrain && done == cfg.gram.source_checkpoint_step;
            if into % cfg.checkpoint_every == 0 || is_source || trainer.remaining() == 0 {
                last = ckpts.join(checkpoint_name(done));
                trainer.save(&last)?;
            }
        }
        Ok(())
    })();
    manifest.end_step = trainer.step;
    manifest.status = if result.is_ok() { RunStatus::Complete } else { RunStatus::Failed };
    manifest.write(&manifest_path)?;
    result?;
    Ok(TrainOutcome { run_dir: run.to_path_buf(), start_step: start, end_step: trainer.step, resumed, last_checkpoint: last })
}
