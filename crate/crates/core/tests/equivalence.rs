//! With every gate at one and nothing frozen, the masked network trains
//! exactly like a plain MLP written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relmap::network::{Architecture, MaskedNetwork, Mode};
use relmap::optim::{Adam, AdamConfig};
use relmap::relevance::MapInit;
use relmap::tensor::{softmax_xent, Tensor};

const LR: f64 = 0.002;
const EPS_BN: f64 = 1e-5;

/// Row-major matrices as nested vectors.
type Mat = Vec<Vec<f64>>;

struct AdamRef {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamRef {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], t: i32) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(t));
            let vh = self.v[i] / (1.0 - b2.powi(t));
            p[i] -= LR * mh / (vh.sqrt() + eps);
        }
    }
}

/// Plain MLP: linear layers without bias, optional batch norm, ReLU.
struct Reference {
    dims: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
    bn: bool,
    opt: Vec<AdamRef>,
    t: i32,
}

impl Reference {
    fn from_net(net: &MaskedNetwork) -> Self {
        let arch = net.architecture();
        let dims = arch.layer_dims();
        let weights: Vec<Vec<f64>> = net.linears().iter().map(|l| l.weight.value().data().to_vec()).collect();
        let scales: Vec<Vec<f64>> = net.norms().iter().map(|n| n.scale.value().data().to_vec()).collect();
        let shifts: Vec<Vec<f64>> = net.norms().iter().map(|n| n.shift.value().data().to_vec()).collect();
        // Same order as the network's parameter list.
        let mut opt = Vec::new();
        for l in 0..weights.len() {
            opt.push(AdamRef::new(weights[l].len()));
            if arch.batch_norm && l < scales.len() {
                opt.push(AdamRef::new(scales[l].len()));
                opt.push(AdamRef::new(shifts[l].len()));
            }
        }
        Self {
            dims,
            weights,
            scales,
            shifts,
            bn: arch.batch_norm,
            opt,
            t: 0,
        }
    }

    fn step(&mut self, x: &Mat, labels: &[usize]) -> f64 {
        let b = x.len();
        let layers = self.weights.len();
        // Forward, keeping what the backward pass needs.
        let mut inputs: Vec<Mat> = Vec::new();
        let mut xhats: Vec<Mat> = Vec::new();
        let mut inv_stds: Vec<Vec<f64>> = Vec::new();
        let mut pre: Vec<Mat> = Vec::new();
        let mut h = x.clone();
        for l in 0..layers {
            let (inp, out) = self.dims[l];
            let w = &self.weights[l];
            let z: Mat = h
                .iter()
                .map(|row| (0..out).map(|o| (0..inp).map(|i| row[i] * w[o * inp + i]).sum()).collect())
                .collect();
            inputs.push(h.clone());
            if l == layers - 1 {
                h = z;
                break;
            }
            let y = if self.bn {
                let mean: Vec<f64> = (0..out).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / b as f64).collect();
                let var: Vec<f64> = (0..out)
                    .map(|j| z.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / b as f64)
                    .collect();
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS_BN).sqrt()).collect();
                let xhat: Mat = z
                    .iter()
                    .map(|r| (0..out).map(|j| (r[j] - mean[j]) * inv[j]).collect())
                    .collect();
                let y = xhat
                    .iter()
                    .map(|r| (0..out).map(|j| self.scales[l][j] * r[j] + self.shifts[l][j]).collect())
                    .collect();
                xhats.push(xhat);
                inv_stds.push(inv);
                y
            } else {
                z
            };
            h = y.iter().map(|r: &Vec<f64>| r.iter().map(|v| v.max(0.0)).collect()).collect();
            pre.push(y);
        }
        // Softmax cross-entropy, mean over the batch.
        let mut loss = 0.0;
        let mut g: Mat = Vec::with_capacity(b);
        for (row, &y) in h.iter().zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += -(row[y] - m - z.ln());
            g.push(
                row.iter()
                    .enumerate()
                    .map(|(k, v)| ((v - m).exp() / z - f64::from(u8::from(k == y))) / b as f64)
                    .collect(),
            );
        }
        loss /= b as f64;

        // Backward.
        let mut grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        for l in (0..layers).rev() {
            let (inp, out) = self.dims[l];
            let mut bn_grads = Vec::new();
            if l < layers - 1 {
                for (gr, pr) in g.iter_mut().zip(&pre[l]) {
                    for (gv, &p) in gr.iter_mut().zip(pr) {
                        if p <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                if self.bn {
                    let xhat = &xhats[l];
                    let inv = &inv_stds[l];
                    let n = b as f64;
                    let ds: Vec<f64> = (0..out).map(|j| (0..b).map(|i| g[i][j] * xhat[i][j]).sum()).collect();
                    let dt: Vec<f64> = (0..out).map(|j| (0..b).map(|i| g[i][j]).sum()).collect();
                    let dxh: Mat = g
                        .iter()
                        .map(|r| (0..out).map(|j| r[j] * self.scales[l][j]).collect())
                        .collect();
                    let s1: Vec<f64> = (0..out).map(|j| (0..b).map(|i| dxh[i][j]).sum()).collect();
                    let s2: Vec<f64> = (0..out).map(|j| (0..b).map(|i| dxh[i][j] * xhat[i][j]).sum()).collect();
                    g = (0..b)
                        .map(|i| {
                            (0..out)
                                .map(|j| inv[j] / n * (n * dxh[i][j] - s1[j] - xhat[i][j] * s2[j]))
                                .collect()
                        })
                        .collect();
                    bn_grads = vec![ds, dt];
                }
            }
            let mut dw = vec![0.0; out * inp];
            for (gr, xr) in g.iter().zip(&inputs[l]) {
                for o in 0..out {
                    for i in 0..inp {
                        dw[o * inp + i] += gr[o] * xr[i];
                    }
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                g = g
                    .iter()
                    .map(|gr| (0..inp).map(|i| (0..out).map(|o| gr[o] * w[o * inp + i]).sum()).collect())
                    .collect();
            }
            grads[l].push(dw);
            grads[l].extend(bn_grads);
        }

        self.t += 1;
        let mut k = 0;
        for (l, gl) in grads.iter().enumerate() {
            self.opt[k].step(&mut self.weights[l], &gl[0], self.t);
            k += 1;
            if gl.len() == 3 {
                self.opt[k].step(&mut self.scales[l], &gl[1], self.t);
                self.opt[k + 1].step(&mut self.shifts[l], &gl[2], self.t);
                k += 2;
            }
        }
        loss
    }
}

fn check(batch_norm: bool, seed: u64) {
    let arch = Architecture {
        input: 12,
        hidden: vec![9, 7],
        classes: 4,
        batch_norm,
        bn_eps: EPS_BN,
        bn_momentum: 0.1,
    };
    let mut net = MaskedNetwork::new(arch.clone(), seed).unwrap();
    let task = net.begin_task(MapInit::default(), 80.0, seed).unwrap();
    for p in net.params_mut() {
        p.active_map_mut().unwrap().raw_mut().data_mut().fill(1.0);
    }
    let mut opt = Adam::new(&net, AdamConfig::with_lr(LR), AdamConfig::with_lr(0.0), None).unwrap();
    let mut reference = Reference::from_net(&net);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for step in 0..10 {
        let b = 16;
        let x: Mat = (0..b)
            .map(|_| (0..arch.input).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..arch.classes)).collect();

        let logits = net.forward(&Tensor::from_rows(&x).unwrap(), task, Mode::Train).unwrap();
        let (loss, g) = softmax_xent(&logits, &labels).unwrap();
        let grads = net.backward(&g).unwrap();
        opt.step(&mut net, &grads).unwrap();

        let want = reference.step(&x, &labels);
        assert!(
            (loss - want).abs() <= 1e-12,
            "bn={batch_norm} seed {seed} step {step}: masked {loss} plain {want}"
        );
    }
}

#[test]
fn all_ones_gates_match_plain_mlp_without_batch_norm() {
    for seed in 0..5 {
        check(false, seed);
    }
}

#[test]
fn all_ones_gates_match_plain_mlp_with_batch_norm() {
    for seed in 0..5 {
        check(true, seed);
    }
}
