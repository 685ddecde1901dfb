//! Small dense matrix helpers for the ensemble Gram matrices.

/// Determinant of a row-major `n × n` matrix by LU with partial pivoting.
pub fn determinant(a: &[f64], n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for i in col + 1..n {
            let factor = m[i * n + col] / p;
            if factor != 0.0 {
                for j in col..n {
                    m[i * n + j] -= factor * m[col * n + j];
                }
            }
        }
    }
    det
}

/// Determinant of a symmetric positive semi-definite `n × n` matrix by
/// elimination without pivoting. Returns `0.0` at the first non-positive
/// pivot, so exactly repeated rows give an exact zero.
pub fn psd_determinant(a: &[f64], n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let p = m[col * n + col];
        if !(p > 0.0) {
            return 0.0;
        }
        det *= p;
        for i in col + 1..n {
            let factor = m[i * n + col] / p;
            if factor != 0.0 {
                for j in col..n {
                    m[i * n + j] -= factor * m[col * n + j];
                }
            }
        }
    }
    det
}

/// Inverse of a row-major `n × n` matrix by Gauss-Jordan elimination.
/// Returns `None` for an exactly singular pivot.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let p = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = m[i * n + col];
            if factor != 0.0 {
                for j in 0..n {
                    m[i * n + j] -= factor * m[col * n + j];
                    inv[i * n + j] -= factor * inv[col * n + j];
                }
            }
        }
    }
    Some(inv)
}

/// `X = L·Q` for a row-major `k × d` matrix `X` with `k ≤ d`: `L` is
/// `k × k` lower triangular with non-negative diagonal, the rows of `Q` are
/// orthonormal. Gram-Schmidt with one reorthogonalization pass. A row that
/// is exactly dependent on earlier rows gets `L[i][i] = 0` and a zero `Q` row.
pub struct RowLq {
    pub l: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn row_lq(x: &[f64], k: usize, d: usize) -> RowLq {
    debug_assert_eq!(x.len(), k * d);
    let mut l = vec![0.0; k * k];
    let mut q = vec![0.0; k * d];
    for i in 0..k {
        let mut w = x[i * d..(i + 1) * d].to_vec();
        for _ in 0..2 {
            for j in 0..i {
                let qj = &q[j * d..(j + 1) * d];
                let c: f64 = qj.iter().zip(&w).map(|(a, b)| a * b).sum();
                for (wt, qt) in w.iter_mut().zip(qj) {
                    *wt -= c * qt;
                }
                l[i * k + j] += c;
            }
        }
        let r = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        l[i * k + i] = r;
        if r > 0.0 {
            for (qt, wt) in q[i * d..(i + 1) * d].iter_mut().zip(&w) {
                *qt = wt / r;
            }
        }
    }
    RowLq { l, q }
}

impl RowLq {
    /// `ln det(X·Xᵀ) = 2·Σ ln L[i][i]`; `-inf` for dependent rows.
    pub fn gram_logdet(&self, k: usize) -> f64 {
        2.0 * (0..k).map(|i| self.l[i * k + i].ln()).sum::<f64>()
    }

    /// `∂ ln det(X·Xᵀ) / ∂X = 2·(X·Xᵀ)⁻¹·X = 2·L⁻ᵀ·Q`, by back substitution.
    /// Requires a positive diagonal.
    pub fn gram_logdet_grad(&self, k: usize, d: usize) -> Vec<f64> {
        let mut y = vec![0.0; k * d];
        for i in (0..k).rev() {
            let lii = self.l[i * k + i];
            for t in 0..d {
                let mut acc = self.q[i * d + t];
                for j in i + 1..k {
                    acc -= self.l[j * k + i] * y[j * d + t];
                }
                y[i * d + t] = acc / lii;
            }
        }
        y.iter_mut().for_each(|v| *v *= 2.0);
        y
    }
}
