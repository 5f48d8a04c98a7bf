//! Dense row-major `f64` tensors and the raw kernels the tape builds on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("row {row} has no permitted entries")]
    DegenerateRow { row: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor. `data.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Contract("ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent; 1 for rank-1 tensors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn ensure_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.ensure_matrix("matmul")?;
        let (k2, n) = other.ensure_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_parts(
            vec![m, n],
            matmul_nn(&self.data, &other.data, m, k, n),
        ))
    }

    /// Truncated normal (cut at two standard deviations), zero mean.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Boolean permission pattern for row softmax; `true` means the entry participates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(TensorError::Contract(format!(
                "mask {rows}x{cols} needs {} flags, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular pattern: position i may see j <= i.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|ix| ix % n <= ix / n).collect();
        Mask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn permitted_in_row(&self, r: usize) -> usize {
        self.allowed[r * self.cols..(r + 1) * self.cols]
            .iter()
            .filter(|&&a| a)
            .count()
    }
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { matmul_nn_avx2(a, b, &mut out, m, k, n) };
        return out;
    }
    matmul_nn_into(a, b, &mut out, m, k, n);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_nn_into(a, b, out, m, k, n);
}

const MR: usize = 4;
const NR: usize = 8;

// Each output element accumulates over `p` in order with separate multiply
// and add, so every code path yields identical bits.
#[inline(always)]
fn matmul_nn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let av: [f64; MR] = std::array::from_fn(|r| a[(i + r) * k + p]);
                if av == [0.0; MR] {
                    continue;
                }
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (row, &ar) in acc.iter_mut().zip(&av) {
                    for c in 0..NR {
                        row[c] += ar * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                matmul_row_tail(a, b, out, r, j, k, n);
            }
        }
        i += MR;
    }
    for r in i..m {
        matmul_row_tail(a, b, out, r, 0, k, n);
    }
}

#[inline(always)]
fn matmul_row_tail(a: &[f64], b: &[f64], out: &mut [f64], r: usize, j0: usize, k: usize, n: usize) {
    let orow = &mut out[r * n + j0..(r + 1) * n];
    for p in 0..k {
        let av = a[r * k + p];
        for (o, &bv) in orow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
            *o += av * bv;
        }
    }
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_nn(a, &transpose_raw(b, n, k), m, k, n)
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    matmul_nn(&transpose_raw(a, k, m), b, m, k, n)
}

/// Stable masked row softmax. Masked logits are treated as −∞, so their
/// probability is exactly zero.
pub(crate) fn softmax_rows_raw(
    data: &[f64],
    m: usize,
    n: usize,
    mask: Option<&Mask>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &data[i * n..(i + 1) * n];
        let permitted = |j: usize| mask.is_none_or(|mk| mk.allows(i, j));
        let mut max = f64::NEG_INFINITY;
        for (j, &z) in row.iter().enumerate() {
            if permitted(j) && z > max {
                max = z;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(TensorError::DegenerateRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let logit = if permitted(j) { z } else { f64::NEG_INFINITY };
            let e = (logit - max).exp();
            orow[j] = e;
            total += e;
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Softmax of a single slice; used by analysis code that works on plain vectors.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn kernels_agree() {
        let mut rng = seeded_rng(3);
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        let bt = b.transpose();
        let c2 = matmul_nt(a.data(), bt.data(), 3, 4, 5);
        let at = a.transpose();
        let c3 = matmul_tn(at.data(), b.data(), 4, 3, 5);
        for ((x, y), z) in c.data().iter().zip(&c2).zip(&c3) {
            assert!((x - y).abs() < 1e-14 && (x - z).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_mask_pattern() {
        let m = Mask::causal(3);
        assert!(m.allows(0, 0) && !m.allows(0, 1) && m.allows(2, 1));
        assert_eq!(m.permitted_in_row(2), 3);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let a = Tensor::trunc_normal(&[100], 0.02, &mut seeded_rng(9));
        let b = Tensor::trunc_normal(&[100], 0.02, &mut seeded_rng(9));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }
}
