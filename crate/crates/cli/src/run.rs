//! Command implementations shared by the binary and its tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use relmap::checkpoint::Checkpoint;
use relmap::data::{fuzzy_schedule, make_permuted_with, make_split_with, resolve_data_dir, Experiment, Mnist, TaskStream, TaskView};
use relmap::record::{average_accuracy, mean_sd, Event, Header, RunRecord, RECORD_SCHEMA};
use relmap::supervised::{evaluate, Trainer};
use relmap::unsupervised::{run_unsupervised, task_inference_confusion, TaskScore};
use relmap::Architecture;

use crate::config::{RunConfig, RunMode, KEYS};

pub const RECORD_FILE: &str = "record.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

/// Run metadata stored inside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub run: RunConfig,
    pub seed: u64,
    /// Record length when the checkpoint was written.
    pub record_entries: usize,
    pub complete: bool,
    /// Network task serving each true task; identity for supervised runs.
    pub task_map: Vec<Option<usize>>,
}

pub fn load_mnist(cfg: &RunConfig) -> Result<Mnist> {
    let dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    Mnist::load(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

pub fn build_stream(cfg: &RunConfig, seed: u64, mnist: &Mnist) -> Result<TaskStream> {
    let stream = match cfg.experiment {
        Experiment::SplitMnist => make_split_with(mnist, seed, cfg.val_fraction, cfg.batch)?,
        Experiment::PermutedMnist => make_permuted_with(mnist, cfg.tasks.unwrap_or(5), seed, cfg.val_fraction, cfg.batch)?,
    };
    let stream = match cfg.tasks {
        Some(n) => stream.truncated(n)?,
        None => stream,
    };
    Ok(match cfg.mode {
        RunMode::Fuzzy => fuzzy_schedule(stream, cfg.ramp)?,
        _ => stream,
    })
}

/// Renders a config back into the flat file format.
pub fn config_text(cfg: &RunConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut out = String::new();
    for key in KEYS {
        match &v[*key] {
            serde_json::Value::Null => {}
            serde_json::Value::String(s) => out.push_str(&format!("{key} = {s}\n")),
            other => out.push_str(&format!("{key} = {other}\n")),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub skipped: bool,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

struct Timings {
    file: fs::File,
    start: Instant,
}

impl Timings {
    fn open(dir: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(TIMINGS_FILE))?;
        Ok(Self {
            file,
            start: Instant::now(),
        })
    }

    fn mark(&mut self, what: &str, task: Option<usize>) -> Result<()> {
        let line = serde_json::json!({
            "what": what,
            "task": task,
            "unix_ms": unix_ms() as u64,
            "elapsed_ms": self.start.elapsed().as_millis() as u64,
        });
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

fn final_accuracies(rec: &RunRecord) -> Result<Vec<f64>> {
    let last = rec
        .last_evaluated_task()
        .ok_or_else(|| anyhow::anyhow!("record has no evaluations"))?;
    rec.accuracies_after(last)
        .into_iter()
        .map(|a| a.ok_or_else(|| anyhow::anyhow!("incomplete evaluation row")))
        .collect()
}

/// Trains every seed of `cfg`; completed seeds are skipped, interrupted
/// supervised seeds resume from their checkpoint.
pub fn train(cfg: &RunConfig, force: bool) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let run_dir = cfg.out.join(cfg.run_id()?);
    let mnist = load_mnist(cfg)?;
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), config_text(cfg))?;
    let mut out = Vec::new();
    for seed in cfg.seed_list() {
        let dir = run_dir.join(format!("seed-{seed}"));
        let outcome = train_seed(cfg, seed, &dir, &mnist, force)?;
        out.push(outcome);
    }
    Ok(out)
}

pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path, mnist: &Mnist, force: bool) -> Result<SeedOutcome> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let rec_path = dir.join(RECORD_FILE);
    if force && dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    let previous = if ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
        let info: CheckpointInfo = serde_json::from_value(ck.meta.config.clone())?;
        if info.run.hashed_view() != cfg.hashed_view() {
            bail!("{} belongs to a different configuration; use --force to replace it", dir.display());
        }
        if info.complete {
            let rec = RunRecord::load(&rec_path)?;
            let accuracies = final_accuracies(&rec)?;
            let mean_accuracy = mean_sd(&accuracies)?.0;
            log::info!("seed {seed}: already complete in {}", dir.display());
            return Ok(SeedOutcome {
                seed,
                dir: dir.to_path_buf(),
                accuracies,
                mean_accuracy,
                skipped: true,
            });
        }
        Some((ck, info))
    } else {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            log::warn!("{} has no checkpoint; starting over", dir.display());
            fs::remove_dir_all(dir)?;
        }
        None
    };
    fs::create_dir_all(dir)?;
    let stream = build_stream(cfg, seed, mnist)?;
    let header = Header {
        schema: RECORD_SCHEMA,
        run_id: cfg.run_id()?,
        config_hash: cfg.config_hash()?,
        experiment: cfg.experiment.to_string(),
        mode: cfg.mode.to_string(),
        seed,
        tasks: stream.tasks().len(),
    };
    let mut timings = Timings::open(dir)?;
    match cfg.mode {
        RunMode::Supervised => train_supervised(cfg, seed, dir, &stream, header, previous, &mut timings),
        RunMode::Unsupervised | RunMode::Fuzzy => {
            if previous.is_some() {
                log::warn!("streaming runs restart from the beginning of the stream");
            }
            train_stream(cfg, seed, dir, &stream, header, &mut timings)
        }
    }
}

fn train_supervised(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    stream: &TaskStream,
    header: Header,
    previous: Option<(Checkpoint, CheckpointInfo)>,
    timings: &mut Timings,
) -> Result<SeedOutcome> {
    let rec_path = dir.join(RECORD_FILE);
    let tcfg = cfg.train_config(seed);
    let (mut trainer, mut record) = match previous {
        Some((ck, info)) => {
            let opt = ck.opt.context("checkpoint lacks optimizer state")?;
            log::info!("seed {seed}: resuming after task {}", ck.net.completed_tasks());
            (
                Trainer::from_parts(ck.net, opt, ck.noise_opt, tcfg)?,
                RunRecord::resume_at(&rec_path, info.record_entries)?,
            )
        }
        None => (
            Trainer::new(Architecture::mnist_mlp(), tcfg)?,
            RunRecord::create(&rec_path, header)?,
        ),
    };
    timings.mark("start", Some(trainer.net.completed_tasks()))?;
    let total = stream.tasks().len();
    let mut row = Vec::new();
    while trainer.net.completed_tasks() < total {
        let report = trainer.train_task(stream, &mut record)?;
        row = trainer.evaluate_all(stream, &mut record)?;
        log::info!(
            "seed {seed} task {}: test {:.4}, average {:.4}",
            report.task,
            report.test_accuracy,
            row.iter().sum::<f64>() / row.len() as f64
        );
        let done = trainer.net.completed_tasks();
        let info = CheckpointInfo {
            run: cfg.clone(),
            seed,
            record_entries: record.entries().len(),
            complete: done == total,
            task_map: (0..done).map(Some).collect(),
        };
        Checkpoint::new(
            trainer.net.clone(),
            Some(trainer.opt.clone()),
            trainer.noise_opt.clone(),
            seed,
            serde_json::to_value(&info)?,
        )
            .save(&dir.join(CHECKPOINT_FILE))?;
        timings.mark("task_completed", Some(report.task))?;
    }
    if row.is_empty() {
        row = final_accuracies(&record)?;
    }
    let mean_accuracy = average_accuracy(&record, total - 1)?;
    Ok(SeedOutcome {
        seed,
        dir: dir.to_path_buf(),
        accuracies: row,
        mean_accuracy,
        skipped: false,
    })
}

fn train_stream(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    stream: &TaskStream,
    header: Header,
    timings: &mut Timings,
) -> Result<SeedOutcome> {
    let ucfg = cfg.unsupervised_config(seed);
    let mut record = RunRecord::create(&dir.join(RECORD_FILE), header)?;
    let Trainer { mut net, mut opt, .. } = Trainer::new(Architecture::mnist_mlp(), ucfg.train.clone())?;
    timings.mark("start", None)?;
    let report = run_unsupervised(&mut net, &mut opt, stream, &ucfg, &mut record)?;
    timings.mark("stream_completed", None)?;
    log::info!(
        "seed {seed}: {} detections, mean accuracy {:.4}",
        report.detections.len(),
        report.mean_accuracy()
    );
    let info = CheckpointInfo {
        run: cfg.clone(),
        seed,
        record_entries: record.entries().len(),
        complete: true,
        task_map: (0..stream.tasks().len()).map(|t| report.task_for(t)).collect(),
    };
    Checkpoint::new(net, Some(opt), None, seed, serde_json::to_value(&info)?).save(&dir.join(CHECKPOINT_FILE))?;
    Ok(SeedOutcome {
        seed,
        dir: dir.to_path_buf(),
        mean_accuracy: report.mean_accuracy(),
        accuracies: report.accuracy,
        skipped: false,
    })
}

/// A checkpoint together with the stream it was trained on.
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub info: CheckpointInfo,
    pub stream: TaskStream,
}

pub fn load_checkpoint(path: &Path, data_dir: Option<&Path>) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut info: CheckpointInfo =
        serde_json::from_value(checkpoint.meta.config.clone()).context("checkpoint metadata")?;
    if let Some(d) = data_dir {
        info.run.data_dir = Some(d.to_path_buf());
    }
    let mnist = load_mnist(&info.run)?;
    let stream = build_stream(&info.run, info.seed, &mnist)?;
    Ok(Loaded {
        checkpoint,
        info,
        stream,
    })
}

/// Test accuracy per true task under its mapped mask; `None` when no
/// finished mask serves that task.
pub fn eval(loaded: &Loaded) -> Result<Vec<Option<f64>>> {
    let net = &loaded.checkpoint.net;
    loaded
        .stream
        .tasks()
        .iter()
        .enumerate()
        .map(|(t, task)| match loaded.info.task_map.get(t).copied().flatten() {
            Some(k) if k < net.completed_tasks() => Ok(Some(evaluate(net, k, &task.test)?)),
            _ => Ok(None),
        })
        .collect()
}

/// Confusion matrix `[true task][inferred true task]` over the shuffled
/// pool of all test sets; the last column counts masks that serve no task.
pub fn infer(loaded: &Loaded, seed: u64, score: TaskScore) -> Result<Vec<Vec<usize>>> {
    let net = &loaded.checkpoint.net;
    let tests: Vec<&TaskView> = loaded.stream.tasks().iter().map(|t| &t.test).collect();
    let raw = task_inference_confusion(net, &tests, seed, score)?;
    let n = tests.len();
    let mut to_true = vec![n; net.completed_tasks()];
    for (t, k) in loaded.info.task_map.iter().enumerate() {
        if let Some(k) = k {
            to_true[*k] = t;
        }
    }
    let mut out = vec![vec![0usize; n + 1]; n];
    for (t, row) in raw.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if c > 0 {
                out[t][to_true.get(k).copied().unwrap_or(n)] += c;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryAudit {
    pub boundary: usize,
    pub detection: Option<usize>,
}

impl BoundaryAudit {
    pub fn latency(&self) -> Option<i64> {
        self.detection.map(|d| d as i64 - self.boundary as i64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub window: usize,
    pub boundaries: Vec<BoundaryAudit>,
    /// Detections not matched to any boundary.
    pub spurious: Vec<usize>,
}

impl Audit {
    /// True when every boundary has a detection within `windows` detector
    /// windows and nothing else fired.
    pub fn passes(&self, windows: usize) -> bool {
        let tol = (windows * self.window) as i64;
        self.spurious.is_empty()
            && self
                .boundaries
                .iter()
                .all(|b| b.latency().is_some_and(|l| l.abs() <= tol))
    }
}

/// Matches each true boundary to the nearest unclaimed detection.
pub fn audit(record: &RunRecord) -> Result<Audit> {
    let mut plan = None;
    let mut detections = Vec::new();
    for ev in record.events() {
        match ev {
            Event::StreamPlan { boundaries, window, .. } => plan = Some((boundaries.clone(), *window)),
            Event::Detection { batch, .. } => detections.push(*batch),
            _ => {}
        }
    }
    let Some((bounds, window)) = plan else {
        bail!("record has no stream plan; only unsupervised and fuzzy runs can be audited");
    };
    let mut free = detections.clone();
    let mut boundaries = Vec::new();
    for &b in &bounds {
        let best = free
            .iter()
            .enumerate()
            .min_by_key(|(_, &d)| (d as i64 - b as i64).unsigned_abs())
            .map(|(i, &d)| (i, d));
        let detection = best.map(|(i, d)| {
            free.remove(i);
            d
        });
        boundaries.push(BoundaryAudit { boundary: b, detection });
    }
    Ok(Audit {
        window,
        boundaries,
        spurious: free,
    })
}

/// Finds `record.jsonl` files under each path (files are taken as is).
pub fn collect_records(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else if p.exists() {
            out.push(p.clone());
        } else {
            bail!("{} does not exist", p.display());
        }
    }
    Ok(out)
}
