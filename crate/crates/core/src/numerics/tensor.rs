use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims("tensor::new", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![1.0; n]).expect("ones: positive extents")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Normal(0, std²) entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self::new(shape.to_vec(), data).expect("randn: positive extents")
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    /// Toggles gradient tracking; the gradient buffer exists only while tracked.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        if !self.requires_grad {
            return;
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
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

    /// View as a matrix: 1-D tensors are a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dims("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols();
        let (k2, n) = other.rows_cols();
        if k != k2 || self.shape.len() > 2 || other.shape.len() > 2 {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out).expect("transpose keeps element count")
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax of an `rows × cols` buffer, in place.
pub(crate) fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
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
}

/// Softmax along the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (_, cols) = x.rows_cols();
    let mut out = x.data.clone();
    softmax_rows_in_place(&mut out, cols);
    Tensor::new(x.shape.clone(), out)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row to zero mean and unit variance, then applies `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.rows_cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::dims("layer_norm", x.shape(), gain.shape()));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("layer_norm input contains non-finite values".into()));
    }
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.data.chunks(cols).zip(out.chunks_mut(cols)) {
        let (mean, rstd) = row_stats(row);
        for j in 0..cols {
            o[j] = (row[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.rows_cols();
    if rows != targets.len() {
        return Err(Error::dims("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::Argument(format!("target class {t} out of range 0..{cols}")));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("cross_entropy logits contain non-finite values".into()));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data.chunks(cols).zip(targets) {
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / rows as f64)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree() {
        let mut rng = Rng::new(3);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut nt = vec![0.0; 12];
        matmul_nt_into(a.data(), b.data(), &mut nt, 4, 5, 3);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(direct.data().iter().zip(&nt).all(|(x, y)| (x - y).abs() < 1e-12));

        let c = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut tn = vec![0.0; 15];
        matmul_tn_into(a.data(), c.data(), &mut tn, 4, 5, 3);
        let direct = a.transpose().matmul(&c).unwrap();
        assert!(direct.data().iter().zip(&tn).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_uniform() {
        let s = softmax(&Tensor::zeros(&[3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(softmax(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 10.0], &[-4.0, 0.5, 2.0, 2.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_large_margin_vanishes() {
        let logits = Tensor::from_rows(&[&[50.0, 0.0, 0.0], &[0.0, 0.0, 50.0]]).unwrap();
        let l = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(l < 1e-20);
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
    }
}
