//! Orthonormal two-dimensional DCT-II on square patches.

/// Precomputed orthonormal DCT-II basis for one patch side.
#[derive(Debug, Clone)]
pub struct Dct2 {
    n: usize,
    // basis[k * n + x] = alpha(k) * cos(pi * (2x + 1) * k / 2n)
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(n: usize) -> Self {
        assert!(n > 0);
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let alpha = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for x in 0..n {
                basis[k * n + x] = alpha
                    * (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2 * n) as f64)
                        .cos();
            }
        }
        Dct2 { n, basis }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    /// Coefficients `C · P · Cᵀ`, row index = vertical frequency.
    pub fn forward(&self, patch: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(patch.len(), n * n);
        // rows: tmp = P · Cᵀ, so tmp[y][v] = sum_x P[y][x] C[v][x]
        let mut tmp = vec![0.0; n * n];
        for y in 0..n {
            let row = &patch[y * n..(y + 1) * n];
            for v in 0..n {
                let b = &self.basis[v * n..(v + 1) * n];
                tmp[y * n + v] = dot(row, b);
            }
        }
        // columns: out[u][v] = sum_y C[u][y] tmp[y][v]
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            let dst = &mut out[u * n..(u + 1) * n];
            for y in 0..n {
                let c = self.basis[u * n + y];
                let src = &tmp[y * n..(y + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        out
    }

    /// Inverse transform `Cᵀ · F · C`.
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(coeffs.len(), n * n);
        // tmp[u][x] = sum_v F[u][v] C[v][x]
        let mut tmp = vec![0.0; n * n];
        for u in 0..n {
            let dst = &mut tmp[u * n..(u + 1) * n];
            for v in 0..n {
                let f = coeffs[u * n + v];
                let b = &self.basis[v * n..(v + 1) * n];
                for (d, s) in dst.iter_mut().zip(b) {
                    *d += f * s;
                }
            }
        }
        // out[y][x] = sum_u C[u][y] tmp[u][x]
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            let src = &tmp[u * n..(u + 1) * n];
            for y in 0..n {
                let c = self.basis[u * n + y];
                let dst = &mut out[y * n..(y + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-shot forward transform of a square patch.
pub fn dct2(patch: &[f64], side: usize) -> Vec<f64> {
    Dct2::new(side).forward(patch)
}
