//! Dense row-major tensors of rank one or two, and the handful of
//! differentiable operations the masked MLP needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::Input(format!(
                "tensor shape must have rank 1 or 2 with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 2 && !shape.contains(&0),
            "bad tensor shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn require_matrix(t: &Tensor, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape.clone(),
            right: other.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul", b)?;
    let (k2, n) = require_matrix(b, "matmul", a)?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul_nt", b)?;
    let (n, k2) = require_matrix(b, "matmul_nt", a)?;
    if k != k2 {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_nt(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_matrix(a, "matmul_tn", b)?;
    let (k2, n) = require_matrix(b, "matmul_tn", a)?;
    if k != k2 {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm_tn(&a.data, &b.data, k, m, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `-log(max softmax probability)` per row, computed as `logsumexp - max`.
pub fn neg_log_max_prob(logits: &Tensor) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            s.ln()
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "softmax_xent",
            left: logits.shape.clone(),
            right: vec![labels.len()],
        });
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let b = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, row) in grad.data.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / b;
        }
        row[labels[i]] -= 1.0 / b;
    }
    Ok((loss / b, grad))
}

/// Squared L2 norm of `y` and its gradient `2y`.
pub fn l2_to_zero(y: &Tensor) -> (f64, Tensor) {
    let loss = y.data.iter().map(|v| v * v).sum();
    (loss, y.map(|v| 2.0 * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data[i * k + p] * b.data[p * n + j];
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);

        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_5x4x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_variants_match_oracle_on_100_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (m, k, n) = (
                rng.random_range(1..12),
                rng.random_range(1..12),
                rng.random_range(1..12),
            );
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let want = naive(&a, &b);
            let nn = matmul(&a, &b).unwrap();
            let nt = matmul_nt(&a, &transpose(&b)).unwrap();
            let tn = matmul_tn(&transpose(&a), &b).unwrap();
            for got in [nn, nt, tn] {
                for (g, w) in got.data().iter().zip(want.data()) {
                    assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn xent_uniform_and_saturated() {
        let (loss, _) = softmax_xent(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let (loss, grad) =
            softmax_xent(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap(), &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn xent_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn xent_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(&[3, 4], &mut rng);
        let labels = [2, 0, 3];
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data[i] += h;
            let mut m = logits.clone();
            m.data[i] -= h;
            let fd = (softmax_xent(&p, &labels).unwrap().0 - softmax_xent(&m, &labels).unwrap().0)
                / (2.0 * h);
            let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "entry {i}: fd {fd} vs {}", grad.data[i]);
        }
    }

    #[test]
    fn l2_hand_cases() {
        let (l, g) = l2_to_zero(&Tensor::zeros(&[2, 2]));
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let (l, g) = l2_to_zero(&Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[2.0, -4.0]);
    }

    #[test]
    fn l2_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random(&[4, 3], &mut rng);
        let (_, g) = l2_to_zero(&y);
        let h = 1e-5;
        for i in 0..y.len() {
            let mut p = y.clone();
            p.data[i] += h;
            let mut m = y.clone();
            m.data[i] -= h;
            let fd = (l2_to_zero(&p).0 - l2_to_zero(&m).0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() / g.data[i].abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn neg_log_max_prob_extremes() {
        let uniform = Tensor::zeros(&[1, 10]);
        assert!((neg_log_max_prob(&uniform)[0] - 10f64.ln()).abs() < 1e-12);
        let sure = Tensor::from_rows(&[vec![500.0, 0.0, 0.0]]).unwrap();
        assert!(neg_log_max_prob(&sure)[0] < 1e-200);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::new(vec![3, 4], v).unwrap();
            let s = softmax_rows(&t);
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
