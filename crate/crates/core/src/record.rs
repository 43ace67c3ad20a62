//! Append-only run records persisted as JSON lines.
//!
//! The first line is a header object; every following line is one event
//! with a strictly increasing `seq`. Field names are a compatibility
//! contract (see `docs/metrics.md`). Records hold no wall-clock values so
//! that identical runs produce identical bytes.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TaskId;

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub run_id: String,
    pub config_hash: String,
    pub experiment: String,
    pub mode: String,
    pub seed: u64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Epoch {
        task: TaskId,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        val_accuracy: f64,
        pruned: bool,
    },
    Pruned {
        task: TaskId,
        /// Epoch after which pruning ran; `None` in streaming mode.
        epoch: Option<usize>,
        zeroed: usize,
        forced: bool,
    },
    TaskCompleted {
        task: TaskId,
        used_params: usize,
        newly_frozen: usize,
        total_frozen: usize,
        sparsity: f64,
    },
    Evaluation {
        after_task: TaskId,
        task: TaskId,
        accuracy: f64,
    },
    Detection {
        batch: usize,
        p_value: f64,
        t_stat: f64,
        estimated_tasks: usize,
        /// Task providing most of the triggering batch (ground truth, for audit only).
        true_task: TaskId,
        rolled_back: usize,
    },
    /// Ground-truth layout of an unlabeled stream, for auditing only.
    StreamPlan {
        batches: usize,
        boundaries: Vec<usize>,
        window: usize,
    },
    StreamTask {
        estimated: TaskId,
        batches: usize,
        claimed: usize,
        majority_true_task: TaskId,
    },
    Warning {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug)]
pub struct RunRecord {
    header: Header,
    entries: Vec<Entry>,
    sink: Option<BufWriter<File>>,
}

impl Clone for RunRecord {
    fn clone(&self) -> Self {
        Self {
            header: self.header.clone(),
            entries: self.entries.clone(),
            sink: None,
        }
    }
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.header == other.header && self.entries == other.entries
    }
}

impl RunRecord {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            entries: Vec::new(),
            sink: None,
        }
    }

    /// Creates the record file and streams every event into it as it arrives.
    pub fn create(path: &Path, header: Header) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(Self {
            header,
            entries: Vec::new(),
            sink: Some(w),
        })
    }

    /// Reopens an existing record for appending, e.g. when resuming a run.
    pub fn append_to(path: &Path) -> Result<Self> {
        let mut rec = Self::load(path)?;
        rec.sink = Some(BufWriter::new(OpenOptions::new().append(true).open(path)?));
        Ok(rec)
    }

    /// Rewrites the file keeping its first `entries` events, then appends.
    /// Used to resume from a checkpoint taken when the record had that length.
    pub fn resume_at(path: &Path, entries: usize) -> Result<Self> {
        let mut rec = Self::load(path)?;
        if rec.entries.len() < entries {
            return Err(Error::IncompleteRecord(format!(
                "record has {} events, checkpoint expects {entries}",
                rec.entries.len()
            )));
        }
        rec.entries.truncate(entries);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, rec.to_jsonl()?)?;
        std::fs::rename(&tmp, path)?;
        rec.sink = Some(BufWriter::new(OpenOptions::new().append(true).open(path)?));
        Ok(rec)
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.entries.iter().map(|e| &e.event)
    }

    pub fn push(&mut self, event: Event) -> Result<()> {
        let seq = self.entries.last().map_or(0, |e| e.seq + 1);
        let entry = Entry { seq, event };
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::IncompleteRecord("empty record".into()))?,
        )?;
        let mut entries: Vec<Entry> = Vec::new();
        for line in lines {
            let e: Entry = serde_json::from_str(line)?;
            if let Some(prev) = entries.last() {
                if e.seq <= prev.seq {
                    return Err(Error::IncompleteRecord(format!(
                        "sequence numbers not increasing at {}",
                        e.seq
                    )));
                }
            }
            entries.push(e);
        }
        Ok(Self {
            header,
            entries,
            sink: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        for line in BufReader::new(File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    /// Accuracy of every task evaluated after `after_task`, indexed by task.
    pub fn accuracies_after(&self, after_task: TaskId) -> Vec<Option<f64>> {
        let mut acc: Vec<Option<f64>> = vec![None; after_task + 1];
        for ev in self.events() {
            if let Event::Evaluation {
                after_task: a,
                task,
                accuracy,
            } = ev
            {
                if *a == after_task && *task <= after_task {
                    acc[*task] = Some(*accuracy);
                }
            }
        }
        acc
    }

    /// Last task with any evaluation.
    pub fn last_evaluated_task(&self) -> Option<TaskId> {
        self.events()
            .filter_map(|e| match e {
                Event::Evaluation { after_task, .. } => Some(*after_task),
                _ => None,
            })
            .max()
    }
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(config)?;
    Ok(format!("{:x}", Sha256::digest(&json)))
}

/// Unweighted mean of the per-task test accuracies of tasks `0..=after_task`
/// measured after training `after_task`.
pub fn average_accuracy(record: &RunRecord, after_task: TaskId) -> Result<f64> {
    let acc = record.accuracies_after(after_task);
    let mut sum = 0.0;
    for (t, a) in acc.iter().enumerate() {
        sum += a.ok_or_else(|| {
            Error::IncompleteRecord(format!("task {t} not evaluated after task {after_task}"))
        })?;
    }
    Ok(sum / acc.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Header {
        Header {
            schema: RECORD_SCHEMA,
            run_id: "r".into(),
            config_hash: "abc".into(),
            experiment: "split-mnist".into(),
            mode: "supervised".into(),
            seed: 0,
            tasks: 2,
        }
    }

    fn eval(rec: &mut RunRecord, after: usize, task: usize, acc: f64) {
        rec.push(Event::Evaluation {
            after_task: after,
            task,
            accuracy: acc,
        })
        .unwrap();
    }

    #[test]
    fn average_accuracy_examples() {
        let mut rec = RunRecord::new(header());
        eval(&mut rec, 0, 0, 0.93);
        eval(&mut rec, 1, 0, 0.93);
        eval(&mut rec, 1, 1, 0.93);
        assert!((average_accuracy(&rec, 1).unwrap() - 0.93).abs() < 1e-15);

        let mut rec = RunRecord::new(header());
        eval(&mut rec, 1, 0, 1.0);
        eval(&mut rec, 1, 1, 0.9);
        assert!((average_accuracy(&rec, 1).unwrap() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_evaluation_is_reported() {
        let mut rec = RunRecord::new(header());
        eval(&mut rec, 1, 1, 0.9);
        assert!(matches!(average_accuracy(&rec, 1), Err(Error::IncompleteRecord(_))));
    }

    #[test]
    fn mean_sd_matches_hand_computation() {
        let v = [0.99, 0.97, 0.98, 0.995, 0.985];
        let (m, s) = mean_sd(&v).unwrap();
        let want_m = (0.99 + 0.97 + 0.98 + 0.995 + 0.985) / 5.0;
        let ss: f64 = v.iter().map(|x| (x - want_m).powi(2)).sum();
        assert!((m - want_m).abs() < 1e-15);
        assert!((s - (ss / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.5]).unwrap(), (0.5, 0.0));
    }

    #[test]
    fn record_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut rec = RunRecord::create(&path, header()).unwrap();
        rec.push(Event::Epoch {
            task: 0,
            epoch: 0,
            train_loss: 0.1 + 0.2,
            val_loss: 1.0 / 3.0,
            val_accuracy: 0.987654321987654,
            pruned: false,
        })
        .unwrap();
        rec.push(Event::Warning {
            message: "x".into(),
        })
        .unwrap();
        let back = RunRecord::load(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), rec.to_jsonl().unwrap());

        let mut again = RunRecord::append_to(&path).unwrap();
        eval(&mut again, 0, 0, 0.5);
        assert_eq!(RunRecord::load(&path).unwrap().entries().len(), 3);

        let mut resumed = RunRecord::resume_at(&path, 1).unwrap();
        resumed.push(Event::Warning { message: "x".into() }).unwrap();
        assert_eq!(RunRecord::load(&path).unwrap(), rec);
        assert!(RunRecord::resume_at(&path, 5).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&("split", 20, 0.002)).unwrap();
        assert_eq!(a, config_hash(&("split", 20, 0.002)).unwrap());
        assert_ne!(a, config_hash(&("split", 21, 0.002)).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn out_of_order_sequence_is_rejected() {
        let text = format!(
            "{}\n{{\"seq\":1,\"event\":\"warning\",\"message\":\"a\"}}\n{{\"seq\":1,\"event\":\"warning\",\"message\":\"b\"}}\n",
            serde_json::to_string(&header()).unwrap()
        );
        assert!(RunRecord::parse(&text).is_err());
    }
}
