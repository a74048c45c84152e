//! Dense numeric primitives: a row-major f64 matrix, l2 normalization,
//! numerically stable log-softmax, and exact pairwise cosine similarity.
//!
//! Everything here is a pure function over immutable inputs. All arithmetic
//! is f64; vectors whose norm falls below [`NORM_FLOOR`] are rejected rather
//! than clamped so degenerate embeddings surface early.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which a vector counts as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from explicit dimensions and row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: n, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` out of the matrix.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, plain triple loop.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (j, &b) in orow.iter().enumerate() {
                    out_row[j] += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Stacks `other` below `self`.
    pub fn concat_rows(&self, other: &Matrix) -> Result<Matrix> {
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "concat_rows with {} vs {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Appends the columns of `other` to the right of `self`.
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if other.cols == 0 {
            return Ok(self.clone());
        }
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "concat_cols with {} vs {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `[start, end)` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut out = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            for c in start..end {
                out.set(r, c - start, self.get(r, c));
            }
        }
        out
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit l2 norm. Direction is preserved.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_FLOOR {
        return Err(Error::ZeroNorm {
            norm: n,
            floor: NORM_FLOOR,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Log-softmax with the max-shift trick: out[j] = z[j] - max - log(sum exp(z - max)).
///
/// exp of the output sums to 1 and the result is invariant to a constant
/// shift of the logits, with no overflow for large inputs.
pub fn stable_log_softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "log-softmax of an empty slice");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - max - log_sum).collect()
}

/// Softmax probabilities via the stable log-softmax.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    stable_log_softmax(logits).iter().map(|l| l.exp()).collect()
}

/// Cosine similarity between every row of `a` and every row of `b`.
///
/// Entry (i, j) is the cosine of the angle between a[i] and b[j]. Rows with
/// norm at or below the floor are an error.
pub fn pairwise_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "pairwise_cosine over {} vs {} dims",
            a.cols(),
            b.cols()
        )));
    }
    let an: Vec<Vec<f64>> = (0..a.rows())
        .map(|r| l2_normalize(a.row(r)))
        .collect::<Result<_>>()?;
    let bn: Vec<Vec<f64>> = (0..b.rows())
        .map(|r| l2_normalize(b.row(r)))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ar) in an.iter().enumerate() {
        for (j, br) in bn.iter().enumerate() {
            out.set(i, j, dot(ar, br));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_normalize_345_triangle() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_is_identity() {
        let out = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_zero_vector_errors() {
        match l2_normalize(&[0.0, 0.0]) {
            Err(Error::ZeroNorm { .. }) => {}
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0) + 0.1).collect();
            let alpha = rng.gen_range(0.1..50.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let a = l2_normalize(&v).unwrap();
            let b = l2_normalize(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((norm(&a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let out = stable_log_softmax(&[0.0, 0.0]);
        let ln2 = std::f64::consts::LN_2;
        assert!((out[0] + ln2).abs() < 1e-15);
        assert!((out[1] + ln2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_no_overflow_on_large_logits() {
        let out = stable_log_softmax(&[1000.0, 1000.0]);
        let ln2 = std::f64::consts::LN_2;
        assert!((out[0] + ln2).abs() < 1e-12);
        assert!((out[1] + ln2).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_one_zero() {
        // Frozen from a high-precision evaluation of log(e/(e+1)), log(1/(e+1)).
        let out = stable_log_softmax(&[1.0, 0.0]);
        assert!((out[0] - (-0.3132616875182228)).abs() < 1e-12);
        assert!((out[1] - (-1.3132616875182228)).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_exp_sums_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let ls = stable_log_softmax(&z);
            let total: f64 = ls.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");

            let c = rng.gen_range(-100.0..100.0);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let ls2 = stable_log_softmax(&shifted);
            for (a, b) in ls.iter().zip(&ls2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_cosine_identical_and_orthogonal() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!((pairwise_cosine(&a, &b).unwrap().get(0, 0) - 1.0).abs() < 1e-15);
        let c = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(pairwise_cosine(&a, &c).unwrap().get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_cosine_45_degrees() {
        // Frozen from hand trigonometry: cos(45 deg) = 1/sqrt(2).
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let out = pairwise_cosine(&a, &b).unwrap();
        assert!((out.get(0, 0) - 0.7071067811865475).abs() < 1e-12);
        assert!((out.get(0, 1) + 0.7071067811865475).abs() < 1e-12);
    }

    #[test]
    fn pairwise_cosine_zero_row_errors() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            pairwise_cosine(&a, &b),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn pairwise_cosine_row_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let a = Matrix::from_rows(&[
                (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1.5).collect(),
                (0..4).map(|_| rng.gen_range(-1.0..1.0) + 1.5).collect(),
            ])
            .unwrap();
            let b = Matrix::from_rows(&[(0..4)
                .map(|_| rng.gen_range(-1.0..1.0) + 1.5)
                .collect()])
            .unwrap();
            let mut a2 = a.clone();
            let alpha = rng.gen_range(0.5..10.0);
            for v in a2.row_mut(1) {
                *v *= alpha;
            }
            let c1 = pairwise_cosine(&a, &b).unwrap();
            let c2 = pairwise_cosine(&a2, &b).unwrap();
            for (x, y) in c1.data().iter().zip(c2.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for v in c1.data() {
                assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn matrix_concat_and_slice_round_trip() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0]]).unwrap();
        let stacked = a.concat_rows(&b).unwrap();
        assert_eq!(stacked.rows(), 3);
        assert_eq!(stacked.slice_rows(0, 2), a);
        assert_eq!(stacked.slice_rows(2, 3), b);

        let wide = a.concat_cols(&a).unwrap();
        assert_eq!(wide.cols(), 4);
        assert_eq!(wide.slice_cols(2, 4), a);
    }

    #[test]
    fn matrix_from_rows_ragged_errors() {
        let err = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }
}
