//! Local frequency statistics: band-filtered, column-averaged log-magnitude
//! DCT coefficients.

/// Band index of frequency `(u, v)` for `q` equal-width bands over the
/// Manhattan radius `u + v ∈ [0, 2n − 2]`.
#[inline]
pub fn band_of(u: usize, v: usize, n: usize, q: usize) -> usize {
    (u + v) * q / (2 * n - 1)
}

/// Column gather plan for each band, computed once per patch side.
#[derive(Debug, Clone)]
pub struct BandLayout {
    n: usize,
    q: usize,
    // rows[b * n + v] = vertical frequencies u with band_of(u, v) == b
    rows: Vec<Vec<usize>>,
}

impl BandLayout {
    pub fn new(n: usize, q: usize) -> Self {
        assert!(n > 0 && q >= 1);
        let mut rows = vec![Vec::new(); q * n];
        for v in 0..n {
            for u in 0..n {
                rows[band_of(u, v, n, q) * n + v].push(u);
            }
        }
        BandLayout { n, q, rows }
    }

    pub fn bands(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.q * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries of band `b` in column `v`.
    pub fn members(&self, b: usize, v: usize) -> &[usize] {
        &self.rows[b * self.n + v]
    }

    pub(crate) fn lfs_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(coeffs.len(), n * n);
        for b in 0..self.q {
            for v in 0..n {
                let members = self.members(b, v);
                out[b * n + v] = if members.is_empty() {
                    0.0
                } else {
                    members
                        .iter()
                        .map(|&u| coeffs[u * n + v].abs().ln_1p())
                        .sum::<f64>()
                        / members.len() as f64
                };
            }
        }
    }
}

/// `q · n` statistics, bands concatenated low to high.
pub fn lfs(coeffs: &[f64], n: usize, q: usize) -> Vec<f64> {
    let layout = BandLayout::new(n, q);
    let mut out = vec![0.0; layout.len()];
    layout.lfs_into(coeffs, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchfeat::dct::dct2;

    #[test]
    fn bands_partition_and_are_contiguous() {
        for n in [1, 2, 5, 16] {
            for q in 1..=(2 * n - 1) {
                let layout = BandLayout::new(n, q);
                let total: usize = (0..q)
                    .flat_map(|b| (0..n).map(move |v| (b, v)))
                    .map(|(b, v)| layout.members(b, v).len())
                    .sum();
                assert_eq!(total, n * n);
                // band index is nondecreasing in radius and hits every band
                let by_radius: Vec<usize> = (0..2 * n - 1).map(|r| r * q / (2 * n - 1)).collect();
                assert!(by_radius.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
                assert_eq!(*by_radius.last().unwrap(), q - 1);
            }
        }
    }

    #[test]
    fn constant_patch_only_band0_column0() {
        let coeffs = dct2(&[1.0; 256], 16);
        let out = lfs(&coeffs, 16, 3);
        assert_eq!(out.len(), 48);
        // band 0 spans radius 0..=10, so column 0 holds rows 0..=10
        let expected = 17f64.ln() / 11.0;
        assert!((out[0] - expected).abs() < 1e-9);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn single_band_is_column_mean_of_log_magnitude() {
        let n = 6;
        let coeffs: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let out = lfs(&coeffs, n, 1);
        for v in 0..n {
            let mean = (0..n).map(|u| coeffs[u * n + v].abs().ln_1p()).sum::<f64>() / n as f64;
            assert!((out[v] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_within_band_column_is_invariant() {
        let n = 8;
        let coeffs: Vec<f64> = (0..n * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let layout = BandLayout::new(n, 3);
        let members = layout.members(1, 2).to_vec();
        assert!(members.len() >= 2);
        let mut swapped = coeffs.clone();
        let (a, b) = (members[0], members[members.len() - 1]);
        swapped.swap(a * n + 2, b * n + 2);
        let x = lfs(&coeffs, n, 3);
        let y = lfs(&swapped, n, 3);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
