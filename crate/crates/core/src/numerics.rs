//! Dense single-precision kernels shared by the inference engine and the
//! toy model.
//!
//! Every reduction runs in a fixed loop order so that identical inputs give
//! bit-identical outputs across runs.

use crate::error::{Error, Result};

/// Logit value used for masked entries. Finite so that masked rows never
/// produce NaN through `inf - inf`.
pub const MASKED: f32 = -1e30;

/// Anything at or below this is treated as a masked logit.
const MASK_THRESHOLD: f32 = -1e29;

#[inline]
pub fn is_masked(x: f32) -> bool {
    x <= MASK_THRESHOLD
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Matrix product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// `out[n×m] = a[n×k] · b[k×m]` on raw row-major slices. `out` is overwritten.
pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    assert!(a.len() >= n * k && b.len() >= k * m && out.len() >= n * m);
    // SAFETY: the assert keeps every row-major access in bounds.
    unsafe {
        matrixmultiply::sgemm(
            n, k, m, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), m as isize, 1, 0.0, out.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// Row softmax with per-row max subtraction. Masked entries come out as exactly 0.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r)).map_err(|_| Error::DegenerateRow { row: r })?;
    }
    Ok(out)
}

/// Softmax of a single row, in place. Fails when every entry is masked.
pub fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &x in row.iter() {
        if !is_masked(x) && x > max {
            max = x;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        if is_masked(*x) {
            *x = 0.0;
        } else {
            *x = (*x - max).exp();
            sum += *x as f64;
        }
    }
    for x in row.iter_mut() {
        *x = (*x as f64 / sum) as f32;
    }
    Ok(())
}

/// `v * gain / sqrt(mean(v²) + eps)`.
pub fn rms_norm(v: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if v.len() != gain.len() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match gain length {}",
            v.len(),
            gain.len()
        )));
    }
    let mut out = vec![0.0; v.len()];
    rms_norm_into(v, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns the inverse RMS.
pub fn rms_norm_into(v: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    let mut ss = 0.0f32;
    for &x in v {
        ss += x * x;
    }
    let ms = ss / v.len() as f32 + eps;
    let inv = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(gain) {
        *o = x * inv * g;
    }
    inv
}

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RotaryParams {
    pub head_dim: usize,
    pub base: f32,
}

impl RotaryParams {
    pub fn new(head_dim: usize, base: f32) -> Result<Self> {
        let p = Self { head_dim, base };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("rotary head_dim must be even and positive, got {}", self.head_dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    /// Inverse frequency of pair `i`: `base^(-2i/head_dim)`.
    pub fn inv_freq(&self, i: usize) -> f64 {
        (self.base as f64).powf(-2.0 * i as f64 / self.head_dim as f64)
    }

    /// `(cos, sin)` for every pair at a (possibly fractional) position.
    pub fn angles(&self, position: f32) -> Vec<(f32, f32)> {
        (0..self.head_dim / 2)
            .map(|i| {
                let theta = position as f64 * self.inv_freq(i);
                (theta.cos() as f32, theta.sin() as f32)
            })
            .collect()
    }
}

impl Default for RotaryParams {
    fn default() -> Self {
        Self { head_dim: 64, base: 10000.0 }
    }
}

/// Rotates consecutive pairs `(v[2i], v[2i+1])` by `position * base^(-2i/head_dim)`.
pub fn rope_rotate(v: &[f32], position: f32, params: &RotaryParams) -> Result<Vec<f32>> {
    params.validate()?;
    if v.len() != params.head_dim {
        return Err(Error::Dimension(format!(
            "vector length {} does not match head_dim {}",
            v.len(),
            params.head_dim
        )));
    }
    let mut out = v.to_vec();
    rope_apply(&mut out, &params.angles(position));
    Ok(out)
}

/// Applies precomputed rotation angles to one head vector in place.
#[inline]
pub fn rope_apply(v: &mut [f32], angles: &[(f32, f32)]) {
    for (pair, &(c, s)) in v.chunks_exact_mut(2).zip(angles) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * c - y * s;
        pair[1] = x * s + y * c;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn l2_norm(v: &[f32]) -> f32 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn empty_contraction() {
        let a = Matrix::zeros(1, 0);
        let b = Matrix::zeros(0, 1);
        let c = matmul(&a, &b).unwrap();
        assert_eq!((c.rows(), c.cols()), (1, 1));
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn product_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn product_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::from_vec(17, 33, (0..17 * 33).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Matrix::from_vec(33, 9, (0..33 * 9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x = matmul(&a, &b).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, MASKED]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 3f32.ln()]]).unwrap()).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-6);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![MASKED, MASKED]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        let out = rms_norm(&[1.0; 4], &[1.0; 4], 1e-6).unwrap();
        assert!(out.iter().all(|x| (x - 1.0).abs() < 1e-5));
        let out = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] - 3.0 / 12.5f32.sqrt()).abs() < 1e-6);
        assert!((out[1] - 4.0 / 12.5f32.sqrt()).abs() < 1e-6);
        assert!((out[0] - 0.8485).abs() < 1e-4 && (out[1] - 1.1314).abs() < 1e-4);
        assert!(rms_norm(&[1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let p = RotaryParams::new(8, 10000.0).unwrap();
        let v = [0.3, -1.0, 2.0, 0.5, 0.1, 0.0, -0.7, 1.5];
        assert_eq!(rope_rotate(&v, 0.0, &p).unwrap(), v.to_vec());
    }

    #[test]
    fn rope_quarter_turn() {
        // head_dim 2 means pair 0 only, whose frequency is 1 for any base.
        let p = RotaryParams::new(2, 10000.0).unwrap();
        let out = rope_rotate(&[1.0, 0.0], std::f32::consts::FRAC_PI_2, &p).unwrap();
        assert!(out[0].abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let p = RotaryParams { head_dim: 3, base: 10000.0 };
        assert!(matches!(rope_rotate(&[0.0; 3], 1.0, &p), Err(Error::Config(_))));
    }

    #[test]
    fn rope_relative_offset_identity() {
        let p = RotaryParams::new(16, 10000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p1: f32 = rng.random_range(0.0..64.0);
            let p2: f32 = rng.random_range(0.0..64.0);
            let delta: f32 = rng.random_range(-16.0..16.0);
            let a = dot(&rope_rotate(&q, p1, &p).unwrap(), &rope_rotate(&k, p2, &p).unwrap());
            let b = dot(&rope_rotate(&q, p1 + delta, &p).unwrap(), &rope_rotate(&k, p2 + delta, &p).unwrap());
            let scale = l2_norm(&q) * l2_norm(&k);
            assert!((a - b).abs() <= 1e-4 * scale.max(1.0), "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-30.0f32..30.0, 1..40)) {
            let m = Matrix::from_rows(&[row]).unwrap();
            let s = softmax_rows(&m).unwrap();
            let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn rope_preserves_norm(v in proptest::collection::vec(-5.0f32..5.0, 8), pos in 0.0f32..4096.0) {
            let p = RotaryParams::new(8, 10000.0).unwrap();
            let r = rope_rotate(&v, pos, &p).unwrap();
            let (a, b) = (l2_norm(&v), l2_norm(&r));
            prop_assert!((a - b).abs() <= 1e-5 * a.max(1e-3));
        }
    }
}
