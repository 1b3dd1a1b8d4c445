use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::numkit::gemm;

/// Dense row-major `f32` tensor. Values are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            Dimension,
            "shape {:?} needs {} values, got {}",
            shape,
            expected,
            data.len()
        );
        let t = Self { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for op outputs that are validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal draws.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut crate::rng::Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    /// Uniform draws in `[-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut crate::rng::Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` treating every leading axis as rows.
    pub fn as_matrix(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => {
                let cols = *s.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            Dimension,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{context}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn ensure_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "{context}: shape {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_shape(other, "zip_map")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.ensure_finite("zip_map")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| f64::from(v.abs())).sum::<f64>() / self.data.len() as f64
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape || self.data.is_empty() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = expect_matrix(self, "matmul lhs")?;
        let (k2, n) = expect_matrix(other, "matmul rhs")?;
        ensure!(k == k2, Dimension, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm::gemm_nn(m, k, n, &self.data, &other.data, &mut out, 0.0);
        let out = Tensor::from_parts(vec![m, n], out);
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = expect_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.ensure_finite("softmax_rows input")?;
        let (m, n) = self.as_matrix();
        let mut out = self.data.clone();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Stacks rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        ensure!(!parts.is_empty(), Contract, "concat_rows of nothing");
        let (_, n) = expect_matrix(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, pn) = expect_matrix(p, "concat_rows")?;
            ensure!(pn == n, Dimension, "concat_rows column mismatch {pn} vs {n}");
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, n], data))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn row_slice(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = expect_matrix(self, "row_slice")?;
        ensure!(start <= end && end <= m, Range, "rows {start}..{end} of {m}");
        Ok(Tensor::from_parts(
            vec![end - start, n],
            self.data[start * n..end * n].to_vec(),
        ))
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn expect_matrix(t: &Tensor, context: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension(format!(
            "{context}: expected a matrix, got shape {s:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.as_matrix();
        let (_, n) = b.as_matrix();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.data()[i * k + p]) * f64::from(b.data()[p * n + j]);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let i3 = Tensor::identity(3);
        assert_eq!(i3.matmul(&i3).unwrap(), i3);
        let a = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        for &(m, k, n) in &[(8, 8, 8), (1, 5, 3), (32, 32, 32), (17, 9, 31)] {
            let a = Tensor::randn([m, k], &mut rng);
            let b = Tensor::randn([k, n], &mut rng);
            let got = a.matmul(&b).unwrap();
            for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((f64::from(*g) - e).abs() <= 1e-6 * (1.0 + e.abs()) * k as f64, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros([2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new([1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        for v in t.softmax_rows().unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let t = Tensor::new([1, 2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);

        let t = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        let z: f64 = (1..=3).map(|i| f64::from(i).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            let e = ((i + 1) as f64).exp() / z;
            assert!((f64::from(*v) - e).abs() < 1e-7, "{v} vs {e}");
        }
    }

    #[test]
    fn nan_rejected() {
        assert!(matches!(
            Tensor::new([1], vec![f32::NAN]),
            Err(Error::Numeric(_))
        ));
        let t = Tensor::from_parts(vec![1, 2], vec![f32::NAN, 0.0]);
        assert!(matches!(t.softmax_rows(), Err(Error::Numeric(_))));
    }
}
