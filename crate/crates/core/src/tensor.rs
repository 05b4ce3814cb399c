//! Dense row-major `f32` tensors and the matrix kernels behind them.
//!
//! Storage is `f32`; long reductions (dot products, sums, norms) accumulate
//! in `f64` so that results do not depend on reduction length.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking extents, element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Views the tensor as a matrix: rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let (_, c) = self.dims2();
        self.data.chunks_exact(c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    Ok(Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n)))
}

pub(crate) fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch(format!("{what} must be rank 2, got {s:?}"))),
    }
}

/// Dot product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let i = 4 * c + l;
            acc[l] += f64::from(a[i]) * f64::from(b[i]);
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += f64::from(a[i]) * f64::from(b[i]);
    }
    s
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Norm threshold below which a vector has no usable direction.
pub const MIN_NORM: f64 = 1e-12;

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::DegenerateEmbedding(n));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d = norm(a) * norm(b);
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`.
///
/// Each output row depends only on the matching row of `A`, so row results
/// are bitwise independent of the other rows in the batch.
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = f64::from(av);
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(b_row) {
                *o += av * f64::from(bv);
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    out
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm_nn(a, &transpose(b, n, k), m, k, n)
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = f64::from(av);
            for (o, &bv) in acc[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *o += av * f64::from(bv);
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.normal() as f32).collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn identity_times_column() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &v).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn one_by_one() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matches_triple_loop() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed, 0);
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 3);
            let c = matmul(&a, &b).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0f64;
                    for p in 0..3 {
                        s += a.data()[i * 3 + p] as f64 * b.data()[p * 3 + j] as f64;
                    }
                    assert!((c.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let mut rng = Rng::new(5, 0);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let nt = gemm_nt(a.data(), b.data(), 4, 3, 5);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3)
                    .map(|p| f64::from(a.data()[i * 3 + p]) * f64::from(b.data()[j * 3 + p]))
                    .sum();
                assert!((f64::from(nt[i * 5 + j]) - want).abs() < 1e-6);
            }
        }
        let c = random_matrix(&mut rng, 4, 5);
        let tn = gemm_tn(a.data(), c.data(), 4, 3, 5);
        let at = transpose(a.data(), 4, 3);
        let nn = gemm_nn(&at, c.data(), 3, 4, 5);
        for (x, y) in tn.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_vectors() {
        let u = l2_normalize(&[0.6, 0.0, 0.8]).unwrap();
        let again = l2_normalize(&u).unwrap();
        for (a, b) in u.iter().zip(&again) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_random_512() {
        let mut rng = Rng::new(11, 0);
        for _ in 0..10 {
            let v: Vec<f32> = (0..512).map(|_| rng.normal() as f32 * 3.0).collect();
            let u = l2_normalize(&v).unwrap();
            let n: f64 = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::DegenerateEmbedding(_))));
        assert!(matches!(l2_normalize(&[1e-14, 0.0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn construction_validates() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(Tensor::new(vec![1], vec![f32::NAN]), Err(Error::NonFinite(_))));
    }
}
