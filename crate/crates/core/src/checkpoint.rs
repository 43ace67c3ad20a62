//! Versioned binary snapshots of a network and its optimizer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "RMNCKPT\0" | version u32 | meta-json len u64 | meta-json
//! per parameter: name, values, frozen words, task masks, active map?
//! per batch norm: running statistics per task
//! optimizer?, noise optimizer?: configs, step counters, moments
//! crc32 of everything before it, u32
//! ```
//!
//! Floats are stored as raw bits so a round trip is exact. Random streams
//! are derived from the seed and position tags, so the seed plus the task
//! counter is the whole generator state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Architecture, GatedParam, MaskedNetwork, RunningStats};
use crate::optim::{Adam, AdamConfig, AdamState, Moments};
use crate::relevance::{BitMask, FrozenIndicator, RelevanceMap};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RMNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub completed_tasks: usize,
    pub active_task: bool,
    pub seed: u64,
    /// Caller-defined run configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: MaskedNetwork,
    pub opt: Option<Adam>,
    /// Optimizer of the Gaussian-noise step, when that step is in use.
    pub noise_opt: Option<Adam>,
}

impl Checkpoint {
    pub fn new(
        net: MaskedNetwork,
        opt: Option<Adam>,
        noise_opt: Option<Adam>,
        seed: u64,
        config: serde_json::Value,
    ) -> Self {
        let meta = CheckpointMeta {
            architecture: net.architecture().clone(),
            completed_tasks: net.completed_tasks(),
            active_task: net.active_task().is_some(),
            seed,
            config,
        };
        Self {
            meta,
            net,
            opt,
            noise_opt,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let meta = serde_json::to_vec(&self.meta)?;
        w.u64(meta.len() as u64);
        w.0.extend_from_slice(&meta);
        for p in self.net.params() {
            w.str(p.name());
            w.f64s(p.value().data());
            w.words(p.frozen().mask().words());
            w.u32(p.task_masks().len() as u32);
            for m in p.task_masks() {
                w.words(m.words());
            }
            match p.active_map() {
                None => w.u8(0),
                Some(map) => {
                    w.u8(1);
                    w.f64(map.beta());
                    match map.prune_threshold() {
                        None => w.u8(0),
                        Some(mu) => {
                            w.u8(1);
                            w.f64(mu);
                        }
                    }
                    w.f64s(map.raw().data());
                }
            }
        }
        for bn in self.net.norms() {
            w.u32(bn.running_all().len() as u32);
            for r in bn.running_all() {
                w.f64s(&r.mean);
                w.f64s(&r.var);
            }
        }
        for opt in [&self.opt, &self.noise_opt] {
            match opt {
                None => w.u8(0),
                Some(opt) => {
                    w.u8(1);
                    write_adam(&mut w, opt);
                }
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            r.pos = body_len;
            return Err(r.fail("checksum mismatch"));
        }
        r.bytes = &bytes[..body_len];
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;

        let mut net = MaskedNetwork::new(meta.architecture.clone(), 0)?;
        let tasks = meta.completed_tasks;
        for p in net.params_mut() {
            let name = r.str()?;
            if name != p.name() {
                return Err(r.fail(&format!("expected parameter `{}`, found `{name}`", p.name())));
            }
            let shape = p.value().shape().to_vec();
            let n = p.value().len();
            let value = Tensor::new(shape.clone(), r.f64s_exact(n)?)?;
            let frozen = FrozenIndicator::from_mask(r.mask(n)?);
            let count = r.u32()? as usize;
            if count != tasks {
                return Err(r.fail(&format!("expected {tasks} task masks, found {count}")));
            }
            let masks = (0..count).map(|_| r.mask(n)).collect::<Result<Vec<_>>>()?;
            let active = match r.u8()? {
                0 => None,
                1 => {
                    let beta = r.f64()?;
                    let pruned = match r.u8()? {
                        0 => None,
                        1 => Some(r.f64()?),
                        f => return Err(r.fail(&format!("bad prune flag {f}"))),
                    };
                    let raw = Tensor::new(shape, r.f64s_exact(n)?)?;
                    let mut map = RelevanceMap::from_raw(raw, beta)?;
                    map.restore_state(beta, pruned);
                    Some(map)
                }
                f => return Err(r.fail(&format!("bad active-map flag {f}"))),
            };
            if active.is_some() != meta.active_task {
                return Err(r.fail("active map presence disagrees with header"));
            }
            *p = GatedParam::from_parts(name, value, frozen, masks, active);
        }
        let running_tasks = tasks + usize::from(meta.active_task);
        for bn in net.norms_mut() {
            let width = bn.scale.value().len();
            let count = r.u32()? as usize;
            if count != running_tasks {
                return Err(r.fail(&format!("expected {running_tasks} running-stat sets, found {count}")));
            }
            let running = (0..count)
                .map(|_| {
                    Ok(RunningStats {
                        mean: r.f64s_exact(width)?,
                        var: r.f64s_exact(width)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            bn.set_running_all(running);
        }
        let sizes: Vec<usize> = net.params().iter().map(|p| p.value().len()).collect();
        let mut opts = [None, None];
        for slot in &mut opts {
            *slot = match r.u8()? {
                0 => None,
                1 => Some(read_adam(&mut r, &sizes)?),
                f => return Err(r.fail(&format!("bad optimizer flag {f}"))),
            };
        }
        let [opt, noise_opt] = opts;
        if r.pos != r.bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        let net = MaskedNetwork::from_parts(
            meta.architecture.clone(),
            net.linears().to_vec(),
            net.norms().to_vec(),
            meta.completed_tasks,
            meta.active_task,
        );
        Ok(Self {
            meta,
            net,
            opt,
            noise_opt,
        })
    }

    /// Writes through a temporary file and a rename, so a crash never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_adam(w: &mut Writer, opt: &Adam) {
    for cfg in [opt.weight_config(), opt.map_config()] {
        w.f64(cfg.lr);
        w.f64(cfg.beta1);
        w.f64(cfg.beta2);
        w.f64(cfg.eps);
    }
    match opt.beta_lr() {
        None => w.u8(0),
        Some(lr) => {
            w.u8(1);
            w.f64(lr);
        }
    }
    let st = opt.state();
    w.u64(st.weight_step);
    w.u64(st.map_step);
    for group in [&st.weights, &st.maps] {
        w.u32(group.len() as u32);
        for m in group {
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
    }
    w.u32(st.betas.len() as u32);
    for &(m, v) in &st.betas {
        w.f64(m);
        w.f64(v);
    }
}

fn read_adam(r: &mut Reader<'_>, sizes: &[usize]) -> Result<Adam> {
    let mut cfgs = [AdamConfig::with_lr(0.0); 2];
    for cfg in &mut cfgs {
        *cfg = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
    }
    let beta_lr = match r.u8()? {
        0 => None,
        1 => Some(r.f64()?),
        f => return Err(r.fail(&format!("bad beta-lr flag {f}"))),
    };
    let weight_step = r.u64()?;
    let map_step = r.u64()?;
    let mut groups = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = r.u32()? as usize;
        if count != sizes.len() {
            return Err(r.fail(&format!("expected {} moment sets, found {count}", sizes.len())));
        }
        let group = sizes
            .iter()
            .map(|&n| {
                Ok(Moments {
                    m: r.f64s_exact(n)?,
                    v: r.f64s_exact(n)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
    }
    let count = r.u32()? as usize;
    let betas = (0..count)
        .map(|_| Ok((r.f64()?, r.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    let maps = groups.pop().expect("two groups");
    let weights = groups.pop().expect("two groups");
    let state = AdamState {
        weight_step,
        map_step,
        weights,
        maps,
        betas,
    };
    Ok(Adam::from_parts(cfgs[0], cfgs[1], beta_lr, state))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn words(&mut self, w: &[u64]) {
        self.u64(w.len() as u64);
        for &x in w {
            self.u64(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(&format!(
                "expected {n} bytes, found {}",
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s_exact(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = self.u64()? as usize;
        if len != n {
            return Err(self.fail(&format!("expected {n} values, found {len}")));
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
    fn mask(&mut self, len: usize) -> Result<BitMask> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        let words = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        BitMask::from_words(len, words).map_err(|e| self.fail(&e.to_string()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.fail("name is not UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;
    use crate::relevance::MapInit;
    use crate::tensor::softmax_xent;

    fn trained() -> (MaskedNetwork, Adam) {
        let arch = Architecture {
            input: 6,
            hidden: vec![5, 4],
            classes: 3,
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let mut net = MaskedNetwork::new(arch, 7).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::with_lr(0.01), AdamConfig::with_lr(0.02), Some(0.5)).unwrap();
        let x = Tensor::new(vec![4, 6], (0..24).map(|i| (i as f64).cos()).collect()).unwrap();
        for task in 0..2 {
            net.begin_task(MapInit { mean: 0.5, sd: 0.3 }, 80.0, task as u64).unwrap();
            opt.reset_maps();
            for _ in 0..3 {
                let logits = net.forward(&x, task, Mode::Train).unwrap();
                let (_, g) = softmax_xent(&logits, &[0, 1, 2, task]).unwrap();
                let grads = net.backward(&g).unwrap();
                opt.step(&mut net, &grads).unwrap();
            }
            net.prune_active(0.05).unwrap();
            if task == 0 {
                net.finalize_task().unwrap();
            }
        }
        (net, opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt) = trained();
        let ck = Checkpoint::new(net, Some(opt.clone()), Some(opt), 42, serde_json::json!({"k": 1}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (net, opt) = trained();
        let bytes = Checkpoint::new(net, Some(opt), None, 0, serde_json::Value::Null).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", Path::new("x")).is_err());
    }
}
