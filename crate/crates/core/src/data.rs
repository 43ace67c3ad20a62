//! Dataset ingestion and deterministic task streams.
//!
//! Pixels are stored once as bytes; tasks are index views over the shared
//! base dataset plus an optional pixel permutation, and batches are
//! materialized as `[b × 784]` tensors scaled to `[0, 1]` on demand.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::TaskId;
use crate::seed;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "RELMAP_DATA_DIR";
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl LabeledDataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        let dim = rows * cols;
        if dim == 0 || pixels.len() != labels.len() * dim {
            return Err(Error::Input(format!(
                "{} pixels do not match {} labels of {rows}x{cols} images",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
            return Err(Error::Input(format!("label {bad} outside 0..10")));
        }
        Ok(Self {
            pixels,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixel_row(&self, i: usize) -> &[u8] {
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// Images `idx` as a `[len × dim]` tensor scaled by 1/255, optionally
    /// with pixels reordered so that output pixel `j` is input pixel `perm[j]`.
    pub fn batch(&self, idx: &[usize], perm: Option<&[u32]>) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let row = self.pixel_row(i);
            match perm {
                Some(p) => data.extend(p.iter().map(|&src| row[src as usize] as f64 / 255.0)),
                None => data.extend(row.iter().map(|&v| v as f64 / 255.0)),
            }
        }
        Tensor::new(vec![idx.len(), d], data).expect("batch shape")
    }

    /// Every image as one tensor.
    pub fn images(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, None)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: format!("header truncated, expected at least {} bytes", offset + 4),
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("bad magic {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, body: usize, path: &Path) -> Result<()> {
    let expected = header + body;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `(pixels, count, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IMAGE_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    check_body(&bytes, 16, n * rows * cols, path)?;
    Ok((bytes[16..].to_vec(), n, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, LABEL_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    check_body(&bytes, 8, n, path)?;
    Ok(bytes[8..].to_vec())
}

/// Loads a matched pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (pixels, n, rows, cols) = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if labels_v.len() != n {
        return Err(Error::Input(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            labels_v.len()
        )));
    }
    LabeledDataset::new(pixels, labels_v, rows, cols)
}

/// Writes a dataset as uncompressed IDX files.
pub fn write_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&ds.pixels);
    fs::write(images, img)?;
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&ds.labels);
    fs::write(labels, lab)?;
    Ok(())
}

/// Resolves the dataset directory from an explicit flag or `RELMAP_DATA_DIR`.
pub fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("no data directory given and {DATA_DIR_ENV} is unset")))
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Arc<LabeledDataset>,
    pub test: Arc<LabeledDataset>,
}

impl Mnist {
    /// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            for name in [stem.to_string(), format!("{stem}.gz")] {
                let p = dir.join(&name);
                if p.is_file() {
                    return Ok(p);
                }
            }
            Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{stem}[.gz] not found in {}", dir.display()),
            )))
        };
        let train = load_idx(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?)?;
        let test = load_idx(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?)?;
        Ok(Self {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// A subset of a base dataset, optionally under a pixel permutation.
#[derive(Debug, Clone)]
pub struct TaskView {
    base: Arc<LabeledDataset>,
    indices: Vec<u32>,
    permutation: Option<Arc<Vec<u32>>>,
}

impl TaskView {
    pub fn new(base: Arc<LabeledDataset>, indices: Vec<u32>, permutation: Option<Arc<Vec<u32>>>) -> Self {
        Self {
            base,
            indices,
            permutation,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn base_indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn permutation(&self) -> Option<&[u32]> {
        self.permutation.as_deref().map(Vec::as_slice)
    }

    pub fn label(&self, pos: usize) -> usize {
        self.base.label(self.indices[pos] as usize)
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.label(p)).collect()
    }

    /// Images and labels at view positions `pos`.
    pub fn batch(&self, pos: &[usize]) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = pos.iter().map(|&p| self.indices[p] as usize).collect();
        let x = self.base.batch(&idx, self.permutation());
        let y = idx.iter().map(|&i| self.base.label(i)).collect();
        (x, y)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let pos: Vec<usize> = (0..self.len()).collect();
        self.batch(&pos)
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: TaskId,
    pub name: String,
    pub classes: Vec<usize>,
    pub train: TaskView,
    pub val: TaskView,
    pub test: TaskView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SplitMnist,
    PermutedMnist,
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split-mnist" => Ok(Self::SplitMnist),
            "permuted-mnist" => Ok(Self::PermutedMnist),
            other => Err(Error::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SplitMnist => "split-mnist",
            Self::PermutedMnist => "permuted-mnist",
        })
    }
}

/// Ordered tasks plus batching parameters; iteration is a pure function of
/// the stored seed and configuration.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    batch_size: usize,
    seed: u64,
    ramp: Option<usize>,
}

/// Which sample of which task fills a batch slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub task: TaskId,
    pub pos: u32,
}

#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub index: usize,
    pub x: Tensor,
    pub labels: Vec<usize>,
    /// Ground-truth task of every sample.
    pub provenance: Vec<TaskId>,
}

impl StreamBatch {
    /// Task contributing the most samples; ties go to the later task.
    pub fn dominant_task(&self) -> TaskId {
        let max = self.provenance.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0usize; max + 1];
        for &t in &self.provenance {
            counts[t] += 1;
        }
        let mut best = 0;
        for (t, &c) in counts.iter().enumerate() {
            if c >= counts[best] {
                best = t;
            }
        }
        best
    }

    pub fn fraction_of(&self, task: TaskId) -> f64 {
        self.provenance.iter().filter(|&&t| t == task).count() as f64 / self.provenance.len().max(1) as f64
    }
}

/// Batch plan of a stream, before pixels are materialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub batches: Vec<Vec<Slot>>,
    /// Batch index at which each task after the first takes over (the
    /// middle of the ramp for fuzzy streams).
    pub boundaries: Vec<usize>,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskData>, batch_size: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Input("a stream needs at least one task".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            tasks,
            batch_size,
            seed,
            ramp: None,
        })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ramp(&self) -> Option<usize> {
        self.ramp
    }

    /// Keeps only the first `n` tasks.
    pub fn truncated(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.tasks.len() {
            return Err(Error::Config(format!(
                "task count {n} outside 1..={}",
                self.tasks.len()
            )));
        }
        self.tasks.truncate(n);
        Ok(self)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.batch_size = batch_size;
        Ok(self)
    }

    /// Shuffled train positions of `task` for `epoch`.
    pub fn epoch_order(&self, task: TaskId, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tasks[task].train.len()).collect();
        let mut rng = seed::rng(self.seed, &[seed::TAG_SHUFFLE, task as u64, epoch as u64]);
        order.shuffle(&mut rng);
        order
    }

    /// Mini-batches of train positions for one epoch of one task.
    pub fn epoch_batches(&self, task: TaskId, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(task, epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Plans the unlabeled stream: every task for `epochs` passes, in order,
    /// with linear mixing ramps at the boundaries when a ramp is set.
    pub fn schedule(&self, epochs: usize) -> Result<Schedule> {
        if epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        let bs = self.batch_size;
        let sequences: Vec<Vec<Slot>> = (0..self.tasks.len())
            .map(|t| {
                (0..epochs)
                    .flat_map(|e| self.epoch_order(t, e))
                    .map(|p| Slot {
                        task: t,
                        pos: p as u32,
                    })
                    .collect()
            })
            .collect();
        let mut batches: Vec<Vec<Slot>> = Vec::new();
        let mut boundaries = Vec::new();
        let Some(ramp) = self.ramp else {
            for (t, seq) in sequences.iter().enumerate() {
                if t > 0 {
                    boundaries.push(batches.len());
                }
                for e in 0..epochs {
                    let n = self.tasks[t].train.len();
                    batches.extend(seq[e * n..(e + 1) * n].chunks(bs).map(<[Slot]>::to_vec));
                }
            }
            return Ok(Schedule { batches, boundaries });
        };

        let new_counts: Vec<usize> = (0..ramp)
            .map(|b| ((bs * (b + 1)) as f64 / (ramp + 1) as f64).round() as usize)
            .collect();
        let new_needed: usize = new_counts.iter().sum();
        let old_needed: usize = new_counts.iter().map(|n| bs - n).sum();
        let mut current: Vec<Slot> = sequences[0].clone();
        for (t, next) in sequences.iter().enumerate().skip(1) {
            if current.len() < old_needed || next.len() < new_needed {
                return Err(Error::Config(format!(
                    "ramp of {ramp} batches needs more samples than task {t} provides"
                )));
            }
            let split = current.len() - old_needed;
            batches.extend(current[..split].chunks(bs).map(<[Slot]>::to_vec));
            let ramp_start = batches.len();
            let (mut old, mut new) = (split, 0);
            let mut rng = seed::rng(self.seed, &[seed::TAG_FUZZY, t as u64]);
            for &n_new in &new_counts {
                let n_old = bs - n_new;
                let mut batch: Vec<Slot> = current[old..old + n_old].to_vec();
                batch.extend_from_slice(&next[new..new + n_new]);
                batch.shuffle(&mut rng);
                old += n_old;
                new += n_new;
                batches.push(batch);
            }
            boundaries.push(ramp_start + ramp / 2);
            current = next[new_needed..].to_vec();
        }
        batches.extend(current.chunks(bs).map(<[Slot]>::to_vec));
        Ok(Schedule { batches, boundaries })
    }

    /// Materializes one planned batch.
    pub fn materialize(&self, index: usize, slots: &[Slot]) -> StreamBatch {
        let d = self.tasks[0].train.base.dim();
        let mut data = Vec::with_capacity(slots.len() * d);
        let mut labels = Vec::with_capacity(slots.len());
        let mut provenance = Vec::with_capacity(slots.len());
        for s in slots {
            let view = &self.tasks[s.task].train;
            let i = view.indices[s.pos as usize] as usize;
            let row = view.base.pixel_row(i);
            match view.permutation() {
                Some(p) => data.extend(p.iter().map(|&src| row[src as usize] as f64 / 255.0)),
                None => data.extend(row.iter().map(|&v| v as f64 / 255.0)),
            }
            labels.push(view.base.label(i));
            provenance.push(s.task);
        }
        StreamBatch {
            index,
            x: Tensor::new(vec![slots.len(), d], data).expect("batch shape"),
            labels,
            provenance,
        }
    }
}

/// Switches a stream to linear mixing ramps of `ramp` batches at each task
/// boundary: batch `b` of a ramp holds a `(b + 1) / (ramp + 1)` share of new
/// data. Sample counts are unchanged.
pub fn fuzzy_schedule(stream: TaskStream, ramp: usize) -> Result<TaskStream> {
    if ramp == 0 {
        return Err(Error::Config("ramp must be at least one batch".into()));
    }
    Ok(TaskStream {
        ramp: Some(ramp),
        ..stream
    })
}

fn split_validation(indices: Vec<u32>, val_fraction: f64, seed: u64, task: TaskId) -> (Vec<u32>, Vec<u32>) {
    let mut shuffled = indices;
    let mut rng = seed::rng(seed, &[seed::TAG_VALIDATION, task as u64]);
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * val_fraction).round() as usize;
    let train = shuffled.split_off(n_val);
    let mut val = shuffled;
    val.sort_unstable();
    let mut train = train;
    train.sort_unstable();
    (train, val)
}

/// Random pixel permutation for permuted task `task`; task 0 is the identity.
pub fn task_permutation(dim: usize, seed: u64, task: TaskId) -> Option<Vec<u32>> {
    if task == 0 {
        return None;
    }
    let mut perm: Vec<u32> = (0..dim as u32).collect();
    let mut rng = seed::rng(seed, &[seed::TAG_PERMUTATION, task as u64]);
    perm.shuffle(&mut rng);
    Some(perm)
}

pub fn inverse_permutation(perm: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; perm.len()];
    for (j, &src) in perm.iter().enumerate() {
        inv[src as usize] = j as u32;
    }
    inv
}

/// Output pixel `j` is input pixel `perm[j]`.
pub fn permute_image(image: &[f64], perm: &[u32]) -> Vec<f64> {
    perm.iter().map(|&src| image[src as usize]).collect()
}

/// `k` tasks over all ten digits, task `t` under its own pixel permutation.
pub fn make_permuted(base: &Mnist, k: usize, seed: u64) -> Result<TaskStream> {
    make_permuted_with(base, k, seed, DEFAULT_VAL_FRACTION, 128)
}

pub fn make_permuted_with(
    base: &Mnist,
    k: usize,
    seed: u64,
    val_fraction: f64,
    batch_size: usize,
) -> Result<TaskStream> {
    if k == 0 {
        return Err(Error::Config("at least one permuted task is required".into()));
    }
    check_val_fraction(val_fraction)?;
    let dim = base.train.dim();
    let tasks = (0..k)
        .map(|t| {
            let perm = task_permutation(dim, seed, t).map(Arc::new);
            let (train, val) =
                split_validation((0..base.train.len() as u32).collect(), val_fraction, seed, t);
            TaskData {
                id: t,
                name: format!("permutation-{t}"),
                classes: (0..10).collect(),
                train: TaskView::new(base.train.clone(), train, perm.clone()),
                val: TaskView::new(base.train.clone(), val, perm.clone()),
                test: TaskView::new(base.test.clone(), (0..base.test.len() as u32).collect(), perm),
            }
        })
        .collect();
    TaskStream::new(tasks, batch_size, seed)
}

/// Five tasks of digit pairs (0,1) … (8,9). Labels keep their original
/// ten-way values; the network has a single shared head.
pub fn make_split(base: &Mnist, seed: u64) -> Result<TaskStream> {
    make_split_with(base, seed, DEFAULT_VAL_FRACTION, 128)
}

pub fn make_split_with(base: &Mnist, seed: u64, val_fraction: f64, batch_size: usize) -> Result<TaskStream> {
    check_val_fraction(val_fraction)?;
    let pick = |ds: &LabeledDataset, pair: [usize; 2]| -> Vec<u32> {
        (0..ds.len() as u32)
            .filter(|&i| pair.contains(&ds.label(i as usize)))
            .collect()
    };
    let tasks = (0..5)
        .map(|t| {
            let pair = [2 * t, 2 * t + 1];
            let (train, val) = split_validation(pick(&base.train, pair), val_fraction, seed, t);
            TaskData {
                id: t,
                name: format!("digits-{}-{}", pair[0], pair[1]),
                classes: pair.to_vec(),
                train: TaskView::new(base.train.clone(), train, None),
                val: TaskView::new(base.train.clone(), val, None),
                test: TaskView::new(base.test.clone(), pick(&base.test, pair), None),
            }
        })
        .collect();
    TaskStream::new(tasks, batch_size, seed)
}

fn check_val_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Config(format!("validation fraction {f} outside [0, 1)")));
    }
    Ok(())
}

/// A small synthetic dataset with `per_class` images of each of ten
/// classes; class `c` lights a distinct band of pixels plus noise.
pub fn synthetic_digits(per_class: usize, rows: usize, cols: usize, seed: u64) -> LabeledDataset {
    use rand::Rng;
    let dim = rows * cols;
    let mut rng = seed::rng(seed, &[seed::TAG_POOL]);
    let mut pixels = Vec::with_capacity(per_class * 10 * dim);
    let mut labels = Vec::with_capacity(per_class * 10);
    let band = dim / 10;
    for i in 0..per_class * 10 {
        let c = i % 10;
        for j in 0..dim {
            let on = j / band.max(1) == c;
            let base: f64 = if on { 200.0 } else { 10.0 };
            let v = (base + rng.random_range(-40.0..40.0)).clamp(0.0, 255.0);
            pixels.push(v as u8);
        }
        labels.push(c as u8);
    }
    LabeledDataset::new(pixels, labels, rows, cols).expect("synthetic shape")
}
