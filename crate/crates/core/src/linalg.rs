//! Small dense f64 linear algebra: square matrices stored row-major.
//!
//! Sized for the matrices this crate actually needs (codec mixing matrices
//! of a few dozen entries, 64x64 feature covariances), not for generality.

/// Square row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatF64 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl MatF64 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn symmetrize(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        out
    }
}

/// Orthonormalizes the columns of a square matrix via modified Gram-Schmidt.
/// Diagonal signs are fixed positive so the result is deterministic.
pub fn orthonormalize(m: &MatF64) -> MatF64 {
    let n = m.n;
    // Work column-wise.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| m.get(i, j)).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
            for i in 0..n {
                cols[j][i] -= dot * cols[k][i];
            }
        }
        let norm: f64 = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "rank-deficient matrix in orthonormalize");
        // Sign convention: first nonzero entry of each column positive.
        let lead = cols[j].iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
        let s = if lead < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            cols[j][i] *= s / norm;
        }
    }
    let mut out = MatF64::zeros(n);
    for j in 0..n {
        for i in 0..n {
            out.set(i, j, cols[j][i]);
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns (eigenvalues, eigenvectors as columns of the returned matrix).
pub fn jacobi_eigen(m: &MatF64) -> (Vec<f64>, MatF64) {
    let n = m.n;
    let mut a = m.symmetrize();
    let mut v = MatF64::identity(n);

    let off = |a: &MatF64| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s
    };

    let scale: f64 = (0..n * n).map(|k| a.data[k] * a.data[k]).sum::<f64>().max(1e-300);
    let tol = 1e-28 * scale;

    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let eigvals = (0..n).map(|i| a.get(i, i)).collect();
    (eigvals, v)
}
