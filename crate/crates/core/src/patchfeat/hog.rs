//! Histogram of oriented gradients over one square patch.

pub const NORM_EPS: f64 = 1e-6;

/// Per-cell unsigned orientation histograms, jointly L2-normalized.
///
/// `patch` is row-major with side `side`; `side` must be a multiple of
/// `cell`. Output layout: cells row-major, `bins` entries per cell.
pub fn hog(patch: &[f64], side: usize, cell: usize, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; hog_len(side, cell, bins)];
    hog_into(patch, side, cell, bins, &mut out);
    out
}

pub fn hog_len(side: usize, cell: usize, bins: usize) -> usize {
    let cells = side / cell;
    cells * cells * bins
}

pub(crate) fn hog_into(patch: &[f64], side: usize, cell: usize, bins: usize, out: &mut [f64]) {
    debug_assert_eq!(patch.len(), side * side);
    debug_assert_eq!(side % cell, 0);
    let cells = side / cell;
    let bin_width = 180.0 / bins as f64;
    out.iter_mut().for_each(|v| *v = 0.0);
    let at = |x: usize, y: usize| patch[y * side + x];
    for y in 0..side {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(side - 1));
        for x in 0..side {
            let (left, right) = (x.saturating_sub(1), (x + 1).min(side - 1));
            let gx = at(right, y) - at(left, y);
            let gy = at(x, down) - at(x, up);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = angle / bin_width;
            let lo_f = pos.floor();
            let frac = pos - lo_f;
            let lo = (lo_f as usize) % bins;
            let hi = (lo + 1) % bins;
            let base = ((y / cell) * cells + x / cell) * bins;
            out[base + lo] += mag * (1.0 - frac);
            out[base + hi] += mag * frac;
        }
    }
    let norm = (out.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_patch_is_all_zero() {
        let h = hog(&[0.3; 256], 16, 8, 9);
        assert_eq!(h.len(), 36);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge_lands_in_zero_degree_bin() {
        // columns 0..4 dark, 4..16 bright: nonzero gx only at x = 3 and x = 4,
        // both inside the left column of 8×8 cells, pointing along +x (0°).
        let side = 16;
        let patch: Vec<f64> = (0..side * side)
            .map(|i| if i % side >= 4 { 1.0 } else { 0.0 })
            .collect();
        let h = hog(&patch, side, 8, 9);
        let cells = [h[0..9].to_vec(), h[9..18].to_vec(), h[18..27].to_vec(), h[27..36].to_vec()];
        // cell order: (0,0) (0,1) (1,0) (1,1) with (row, col)
        for c in [0, 2] {
            assert!(cells[c][0] > 0.0);
            assert!(cells[c][1..].iter().all(|&v| v == 0.0));
        }
        for c in [1, 3] {
            assert!(cells[c].iter().all(|&v| v == 0.0));
        }
        // 16 rows × 2 columns of unit gradients, split over two cells
        let expected = 1.0 / (2.0f64 + NORM_EPS * NORM_EPS / 256.0).sqrt();
        assert!((cells[0][0] - expected).abs() < 1e-9);
    }

    #[test]
    fn diagonal_gradient_interpolates_between_bins() {
        // intensity x + y: gradient at 45°, 2.25 bin widths into 9 bins of 20°
        let side = 8;
        let patch: Vec<f64> = (0..side * side)
            .map(|i| ((i % side) + (i / side)) as f64 / 16.0)
            .collect();
        let h = hog(&patch, side, 8, 9);
        assert!(h[2] > 0.0 && h[3] > 0.0);
        assert!(h[2] > h[3]);
        let rest: f64 = h.iter().enumerate().filter(|(i, _)| *i != 2 && *i != 3).map(|(_, v)| v).sum();
        // border pixels see one-sided differences; interior dominates
        assert!(rest < h[2]);
    }
}
