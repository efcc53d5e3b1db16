//! Patch-level spatial and frequency features fused over multi-scale
//! sliding windows.
//!
//! An image is cut into an `n × n` grid of patches. Each patch yields a HOG
//! descriptor followed by its local frequency statistics; windows of
//! `m × m` patches then average (or recompute) those rows, and every window
//! placement is concatenated into the final feature vector.

pub mod dct;
pub mod hog;
pub mod lfs;

use std::fmt;
use std::str::FromStr;

use crate::error::{DafError, Result};
use crate::imageio::GrayImage;
use crate::registry::Registry;

pub use dct::{dct2, Dct2};
pub use hog::hog;
pub use lfs::{lfs, BandLayout};

/// Sliding window over the patch grid, both measured in patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
}

impl Window {
    pub fn new(size: usize, stride: usize) -> Self {
        Window { size, stride }
    }

    /// Non-overlapping window of side `size`.
    pub fn tiled(size: usize) -> Self {
        Window::new(size, size)
    }

    /// Placements along one axis of an `n`-patch grid.
    pub fn placements(&self, n: usize) -> usize {
        (n - self.size) / self.stride + 1
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.size, self.stride)
    }
}

impl FromStr for Window {
    type Err = DafError;

    /// `SIZE` (non-overlapping) or `SIZE:STRIDE`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DafError::Config(format!("bad window '{s}', expected SIZE or SIZE:STRIDE"));
        let s = s.trim();
        match s.split_once(':') {
            Some((a, b)) => Ok(Window::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            )),
            None => Ok(Window::tiled(s.parse().map_err(|_| bad())?)),
        }
    }
}

/// How window features are formed from the patches they cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Mean of the covered per-patch rows.
    Average,
    /// Recompute HOG + LFS on the covered region, box-downsampled to one
    /// patch side.
    Recalc,
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Average => "average",
            FusionMode::Recalc => "recalc",
        }
    }
}

impl FromStr for FusionMode {
    type Err = DafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionMode::Average),
            "recalc" => Ok(FusionMode::Recalc),
            _ => Err(DafError::Config(format!(
                "unknown fusion '{s}' (known: {})",
                fusions().names().join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub input_size: usize,
    pub grid: usize,
    pub hog_cell: usize,
    pub hog_bins: usize,
    pub windows: Vec<Window>,
    pub bands: usize,
    pub fusion: FusionMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            input_size: 256,
            grid: 16,
            hog_cell: 8,
            hog_bins: 9,
            windows: vec![
                Window::tiled(8),
                Window::tiled(4),
                Window::tiled(2),
                Window::tiled(1),
            ],
            bands: 3,
            fusion: FusionMode::Average,
        }
    }
}

impl PatchConfig {
    pub fn patch_side(&self) -> usize {
        self.input_size / self.grid
    }

    pub fn hog_dim(&self) -> usize {
        hog::hog_len(self.patch_side(), self.hog_cell, self.hog_bins)
    }

    pub fn lfs_dim(&self) -> usize {
        self.bands * self.patch_side()
    }

    /// Per-patch row width: HOG followed by LFS.
    pub fn patch_dim(&self) -> usize {
        self.hog_dim() + self.lfs_dim()
    }

    pub fn placements(&self) -> usize {
        self.windows
            .iter()
            .map(|w| {
                let k = w.placements(self.grid);
                k * k
            })
            .sum()
    }

    /// Σ_i placements(w_i)² · d_patch.
    pub fn dim(&self) -> usize {
        self.placements() * self.patch_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let geo = |m: String| Err(DafError::Geometry(m));
        if self.grid == 0 || self.input_size == 0 || self.input_size % self.grid != 0 {
            return geo(format!(
                "image side {} not divisible by grid {}",
                self.input_size, self.grid
            ));
        }
        let side = self.patch_side();
        if self.hog_cell == 0 || side % self.hog_cell != 0 {
            return geo(format!(
                "patch side {side} not divisible by hog cell {}",
                self.hog_cell
            ));
        }
        if self.hog_bins == 0 {
            return geo("hog_bins must be positive".into());
        }
        if self.bands == 0 || self.bands > 2 * side - 1 {
            return geo(format!(
                "bands must be in [1, {}] for patch side {side}, got {}",
                2 * side - 1,
                self.bands
            ));
        }
        if self.windows.is_empty() {
            return geo("at least one window required".into());
        }
        for w in &self.windows {
            if w.size == 0 || w.size > self.grid || w.stride == 0 {
                return geo(format!(
                    "window {w} invalid for a {}-patch grid",
                    self.grid
                ));
            }
        }
        Ok(())
    }

    /// Range of the LFS band `band` inside a `patch_dim` block.
    pub fn band_range(&self, band: usize) -> std::ops::Range<usize> {
        let side = self.patch_side();
        let start = self.hog_dim() + band * side;
        start..start + side
    }
}

/// Flat real-valued feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-patch feature rows in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub n: usize,
    pub dim: usize,
    rows: Vec<f64>,
}

impl PatchGrid {
    pub fn new(n: usize, dim: usize, rows: Vec<f64>) -> Self {
        assert_eq!(rows.len(), n * n * dim, "grid holds n² rows of dim entries");
        PatchGrid { n, dim, rows }
    }

    pub fn row(&self, py: usize, px: usize) -> &[f64] {
        let i = py * self.n + px;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Splits the image into `grid²` square patches, row-major.
pub fn partition(img: &GrayImage, grid: usize) -> Result<Vec<GrayImage>> {
    if grid == 0
        || img.width() != img.height()
        || img.width() % grid != 0
    {
        return Err(DafError::Geometry(format!(
            "{}x{} image cannot be split into a {grid}x{grid} grid",
            img.width(),
            img.height()
        )));
    }
    let side = img.width() / grid;
    let mut out = Vec::with_capacity(grid * grid);
    for py in 0..grid {
        for px in 0..grid {
            out.push(img.crop(px * side, py * side, side, side));
        }
    }
    Ok(out)
}

/// Mean of the covered per-patch rows for every window placement.
pub fn multiscale(grid: &PatchGrid, windows: &[Window]) -> Result<FeatureVector> {
    let mut out = Vec::new();
    for w in windows {
        if w.size == 0 || w.size > grid.n || w.stride == 0 {
            return Err(DafError::Geometry(format!(
                "window {w} exceeds a {}-patch grid",
                grid.n
            )));
        }
        let k = w.placements(grid.n);
        let inv = 1.0 / (w.size * w.size) as f64;
        for wy in 0..k {
            for wx in 0..k {
                let start = out.len();
                out.resize(start + grid.dim, 0.0);
                let block = &mut out[start..];
                for py in wy * w.stride..wy * w.stride + w.size {
                    for px in wx * w.stride..wx * w.stride + w.size {
                        for (d, s) in block.iter_mut().zip(grid.row(py, px)) {
                            *d += s;
                        }
                    }
                }
                block.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    Ok(FeatureVector::new(out))
}

/// Builds window features for one image; implementations registered by name.
pub trait WindowFusion: Send + Sync {
    fn fuse(&self, extractor: &FeatureExtractor, img: &GrayImage, grid: &PatchGrid)
        -> Result<FeatureVector>;
}

struct AverageFusion;

impl WindowFusion for AverageFusion {
    fn fuse(&self, ex: &FeatureExtractor, _img: &GrayImage, grid: &PatchGrid) -> Result<FeatureVector> {
        multiscale(grid, &ex.cfg.windows)
    }
}

struct RecalcFusion;

impl WindowFusion for RecalcFusion {
    fn fuse(&self, ex: &FeatureExtractor, img: &GrayImage, grid: &PatchGrid) -> Result<FeatureVector> {
        let side = ex.cfg.patch_side();
        let d = ex.cfg.patch_dim();
        let mut out = Vec::with_capacity(ex.cfg.dim());
        let mut region = vec![0.0; side * side];
        for w in &ex.cfg.windows {
            let k = w.placements(grid.n);
            for wy in 0..k {
                for wx in 0..k {
                    if w.size == 1 {
                        out.extend_from_slice(grid.row(wy * w.stride, wx * w.stride));
                        continue;
                    }
                    // box-downsample the m·side region back to one patch side
                    let (x0, y0) = (wx * w.stride * side, wy * w.stride * side);
                    let m = w.size;
                    let inv = 1.0 / (m * m) as f64;
                    for y in 0..side {
                        for x in 0..side {
                            let mut acc = 0.0;
                            for dy in 0..m {
                                for dx in 0..m {
                                    acc += img.get(x0 + x * m + dx, y0 + y * m + dy);
                                }
                            }
                            region[y * side + x] = acc * inv;
                        }
                    }
                    let start = out.len();
                    out.resize(start + d, 0.0);
                    ex.patch_features_into(&region, &mut out[start..]);
                }
            }
        }
        Ok(FeatureVector::new(out))
    }
}

pub fn fusions() -> Registry<dyn WindowFusion> {
    let mut r: Registry<dyn WindowFusion> = Registry::new("fusion");
    r.register("average", Box::new(AverageFusion))
        .register("recalc", Box::new(RecalcFusion));
    r
}

/// Reusable extractor holding the transform tables for one config.
pub struct FeatureExtractor {
    cfg: PatchConfig,
    dct: Dct2,
    bands: BandLayout,
    fusion: Box<dyn WindowFusion>,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: PatchConfig) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.patch_side();
        let fusion: Box<dyn WindowFusion> = match cfg.fusion {
            FusionMode::Average => Box::new(AverageFusion),
            FusionMode::Recalc => Box::new(RecalcFusion),
        };
        Ok(FeatureExtractor {
            dct: Dct2::new(side),
            bands: BandLayout::new(side, cfg.bands),
            cfg,
            fusion,
        })
    }

    pub fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    fn patch_features_into(&self, patch: &[f64], out: &mut [f64]) {
        let side = self.cfg.patch_side();
        let hog_dim = self.cfg.hog_dim();
        let (h, f) = out.split_at_mut(hog_dim);
        hog::hog_into(patch, side, self.cfg.hog_cell, self.cfg.hog_bins, h);
        let coeffs = self.dct.forward(patch);
        self.bands.lfs_into(&coeffs, f);
    }

    /// HOG ++ LFS for one row-major patch.
    pub fn patch_features(&self, patch: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cfg.patch_dim()];
        self.patch_features_into(patch, &mut out);
        out
    }

    pub fn patch_grid(&self, img: &GrayImage) -> Result<PatchGrid> {
        if img.width() != self.cfg.input_size || img.height() != self.cfg.input_size {
            return Err(DafError::Geometry(format!(
                "expected {0}x{0} input, got {1}x{2}",
                self.cfg.input_size,
                img.width(),
                img.height()
            )));
        }
        let patches = partition(img, self.cfg.grid)?;
        let d = self.cfg.patch_dim();
        let mut rows = vec![0.0; patches.len() * d];
        for (p, out) in patches.iter().zip(rows.chunks_mut(d)) {
            self.patch_features_into(p.data(), out);
        }
        Ok(PatchGrid::new(self.cfg.grid, d, rows))
    }

    pub fn extract(&self, img: &GrayImage) -> Result<FeatureVector> {
        let grid = self.patch_grid(img)?;
        let fv = self.fusion.fuse(self, img, &grid)?;
        debug_assert_eq!(fv.len(), self.dim());
        Ok(fv)
    }
}

/// partition → per-patch HOG ++ LFS → window fusion.
pub fn extract(img: &GrayImage, cfg: &PatchConfig) -> Result<FeatureVector> {
    FeatureExtractor::new(cfg.clone())?.extract(img)
}

/// Mean squared LFS value of `band` over every window block of `features`.
pub fn lfs_band_energy(features: &[f64], cfg: &PatchConfig, band: usize) -> f64 {
    let d = cfg.patch_dim();
    let range = cfg.band_range(band);
    let (mut acc, mut count) = (0.0, 0usize);
    for block in features.chunks_exact(d) {
        for v in &block[range.clone()] {
            acc += v * v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(n: usize, s: u64) -> GrayImage {
        let mut rng = seed::rng(s);
        GrayImage::from_fn(n, n, |_, _| rng.random::<f64>())
    }

    #[test]
    fn partition_shapes() {
        let img = noise(256, 1);
        let p = partition(&img, 16).unwrap();
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|q| q.width() == 16 && q.height() == 16));
        assert_eq!(p[17].get(0, 0), img.get(16, 16));
        let whole = partition(&img, 1).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0], img);
        assert!(matches!(partition(&img, 3), Err(DafError::Geometry(_))));
    }

    #[test]
    fn default_dimension() {
        let cfg = PatchConfig::default();
        assert_eq!(cfg.patch_dim(), 84);
        let counts: Vec<usize> = cfg
            .windows
            .iter()
            .map(|w| w.placements(cfg.grid).pow(2))
            .collect();
        assert_eq!(counts, vec![4, 16, 64, 256]);
        assert_eq!(cfg.dim(), 28_560);
        let fv = extract(&noise(256, 2), &cfg).unwrap();
        assert_eq!(fv.len(), 28_560);
        assert!(fv.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unit_window_is_plain_concatenation() {
        let cfg = PatchConfig {
            input_size: 32,
            grid: 4,
            windows: vec![Window::tiled(1)],
            ..PatchConfig::default()
        };
        let ex = FeatureExtractor::new(cfg).unwrap();
        let img = noise(32, 3);
        let grid = ex.patch_grid(&img).unwrap();
        let fv = ex.extract(&img).unwrap();
        let mut concat = Vec::new();
        for py in 0..4 {
            for px in 0..4 {
                concat.extend_from_slice(grid.row(py, px));
            }
        }
        assert_eq!(fv.as_slice(), concat.as_slice());
    }

    #[test]
    fn identical_patches_give_identical_windows() {
        let row: Vec<f64> = (0..5).map(|i| i as f64 * 0.5).collect();
        let rows: Vec<f64> = std::iter::repeat(row.clone()).take(16).flatten().collect();
        let grid = PatchGrid::new(4, 5, rows);
        let fv = multiscale(&grid, &[Window::tiled(2), Window::new(3, 1)]).unwrap();
        for block in fv.as_slice().chunks(5) {
            for (a, b) in block.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_window_is_mean_of_four() {
        let rows = vec![
            1.0, 10.0, //
            2.0, 20.0, //
            3.0, 30.0, //
            6.0, 60.0,
        ];
        let grid = PatchGrid::new(2, 2, rows);
        let fv = multiscale(&grid, &[Window::tiled(2)]).unwrap();
        assert_eq!(fv.as_slice(), &[3.0, 30.0]);
        assert!(multiscale(&grid, &[Window::tiled(3)]).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = PatchConfig {
            input_size: 64,
            grid: 4,
            windows: vec![Window::tiled(2), Window::tiled(1)],
            ..PatchConfig::default()
        };
        let img = noise(64, 4);
        let a = extract(&img, &cfg).unwrap();
        let b = extract(&img.clone(), &cfg).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn recalc_matches_dimension_and_unit_windows() {
        let base = PatchConfig {
            input_size: 64,
            grid: 4,
            windows: vec![Window::tiled(2), Window::new(3, 1), Window::tiled(1)],
            ..PatchConfig::default()
        };
        let recalc = PatchConfig {
            fusion: FusionMode::Recalc,
            ..base.clone()
        };
        let img = noise(64, 5);
        let a = extract(&img, &base).unwrap();
        let b = extract(&img, &recalc).unwrap();
        assert_eq!(a.len(), base.dim());
        assert_eq!(b.len(), base.dim());
        let d = base.patch_dim();
        let tail = 16 * d;
        assert_eq!(&a.as_slice()[a.len() - tail..], &b.as_slice()[b.len() - tail..]);
        assert_ne!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PatchConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.grid = 3;
        assert!(cfg.validate().is_err());
        let cfg = PatchConfig {
            hog_cell: 5,
            ..PatchConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PatchConfig {
            windows: vec![Window::tiled(17)],
            ..PatchConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!("4:2".parse::<Window>().unwrap(), Window::new(4, 2));
        assert_eq!("8".parse::<Window>().unwrap(), Window::tiled(8));
    }

    #[test]
    fn dimension_formula_exhaustive_small() {
        // placements enumerated directly, not through Window::placements
        for n in 1..=6usize {
            for m in 1..=n {
                for s in 1..=n {
                    let mut placements = 0;
                    let mut y = 0;
                    while y + m <= n {
                        let mut x = 0;
                        while x + m <= n {
                            placements += 1;
                            x += s;
                        }
                        y += s;
                    }
                    let rows: Vec<f64> = (0..n * n * 2).map(|i| i as f64).collect();
                    let grid = PatchGrid::new(n, 2, rows);
                    let fv = multiscale(&grid, &[Window::new(m, s)]).unwrap();
                    assert_eq!(fv.len(), placements * 2, "n={n} m={m} s={s}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn window_blocks_are_means(n in 1usize..6, d in 1usize..5, m_raw in 1usize..6, s in 1usize..4, seed_value in any::<u64>()) {
            let m = 1 + (m_raw - 1) % n;
            let mut rng = seed::rng(seed_value);
            let rows: Vec<f64> = (0..n * n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let grid = PatchGrid::new(n, d, rows);
            let w = Window::new(m, s);
            let fv = multiscale(&grid, &[w]).unwrap();
            let k = w.placements(n);
            for wy in 0..k {
                for wx in 0..k {
                    let block = &fv.as_slice()[(wy * k + wx) * d..(wy * k + wx + 1) * d];
                    for j in 0..d {
                        let mut acc = 0.0;
                        for py in wy * s..wy * s + m {
                            for px in wx * s..wx * s + m {
                                acc += grid.row(py, px)[j];
                            }
                        }
                        prop_assert!((block[j] - acc / (m * m) as f64).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
