//! Straight-loop `f64` implementations of the tape operations.
//!
//! These exist only to serve as the forward model inside finite-difference
//! checks. They share no code with [`Graph`](super::Graph): no gemm, no
//! saved intermediates, no `f32`.

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "reference matrix size");
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for j in 0..b.cols {
                out.data[i * b.cols + j] = (0..self.cols).map(|k| self.at(i, k) * b.at(k, j)).sum();
            }
        }
        out
    }

    /// `self · bᵀ`.
    pub fn matmul_bt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                out.data[i * b.rows + j] = (0..self.cols).map(|k| self.at(i, k) * b.at(j, k)).sum();
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!(self.data.len(), b.data.len());
        let data = self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Mat::new(self.rows, self.cols, data)
    }

    pub fn add_row(&self, bias: &[f64]) -> Mat {
        assert_eq!(self.cols, bias.len());
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias[c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> Mat {
        self.map(|v| v.max(0.0))
    }

    pub fn gelu(&self) -> Mat {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        self.map(|x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
    }

    pub fn layer_norm(&self, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        let n = self.cols as f64;
        for r in 0..self.rows {
            let row = self.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            for c in 0..self.cols {
                out.data[r * self.cols + c] = (row[c] - mean) / sd * gain[c] + bias[c];
            }
        }
        out
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..self.cols {
                out.data[r * self.cols + c] = (row[c] - max).exp() / z;
            }
        }
        out
    }

    pub fn l2_normalize_rows(&self) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            let n = self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..self.cols {
                out.data[r * self.cols + c] /= n;
            }
        }
        out
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::new(idx.len(), self.cols, data)
    }

    pub fn concat_cols(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows);
        let mut data = Vec::with_capacity(self.data.len() + b.data.len());
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(b.row(r));
        }
        Mat::new(self.rows, self.cols + b.cols, data)
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> f64 {
        assert_eq!(self.rows, targets.len());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = self.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        total / targets.len() as f64
    }

    /// Multi-head self-attention where sequence `s` occupies rows
    /// `spans[s].0 .. spans[s].0 + spans[s].1`.
    pub fn attention(q: &Mat, k: &Mat, v: &Mat, spans: &[(usize, usize)], heads: usize) -> Mat {
        let d = q.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(q.rows, d);
        for &(start, len) in spans {
            for h in 0..heads {
                for i in 0..len {
                    let mut scores: Vec<f64> = (0..len)
                        .map(|j| {
                            (0..dh)
                                .map(|c| q.at(start + i, h * dh + c) * k.at(start + j, h * dh + c))
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp() / z;
                    }
                    for c in 0..dh {
                        out.data[(start + i) * d + h * dh + c] = (0..len)
                            .map(|j| scores[j] * v.at(start + j, h * dh + c))
                            .sum();
                    }
                }
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `Σ self ⊙ w`.
    pub fn dot(&self, w: &[f64]) -> f64 {
        assert_eq!(self.data.len(), w.len());
        self.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let a = Mat::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let i = Mat::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(i.matmul(&a), a);
        assert_eq!(a.matmul_bt(&i), a);
        let s = Mat::new(1, 2, vec![0.0, 0.0]).softmax_rows();
        assert_eq!(s.data, vec![0.5, 0.5]);
        let ce = Mat::new(1, 2, vec![0.0, 0.0]).cross_entropy(&[1]);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
