//! Synthetic labeled corpus for end-to-end checks.
//!
//! Real images are smooth random low-frequency fields plus i.i.d. Gaussian
//! sensor noise. Fakes are drawn the same way and then carry a faint
//! Nyquist-rate periodic pattern, which lands in the top DCT bands of every
//! patch. With amplitude 0 both classes share one distribution.

use std::f64::consts::TAU;
use std::path::Path;

use daf_core::imageio::GrayImage;
use daf_core::registry::Registry;
use daf_core::{seed, DafError};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::CliResult;
use crate::manifest::{Manifest, ManifestRow};

pub const DEFAULT_AMPLITUDE: f64 = 0.03;
pub const DEFAULT_NOISE: f64 = 0.02;
pub const DEFAULT_SIZE: usize = 256;
const COMPONENTS: usize = 6;
const MAX_CYCLES: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    /// Peak value of the periodic artifact on the [0,1] intensity scale.
    pub amplitude: f64,
    pub noise_sigma: f64,
}

impl FixtureSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        FixtureSpec {
            count,
            seed,
            size: DEFAULT_SIZE,
            amplitude: DEFAULT_AMPLITUDE,
            noise_sigma: DEFAULT_NOISE,
        }
    }
}

/// A periodic pattern in `[-1, 1]` added to fake images.
pub trait Artifact: Send + Sync {
    fn name(&self) -> &'static str;
    fn value(&self, x: usize, y: usize, phase: usize) -> f64;
}

struct Checker;

impl Artifact for Checker {
    fn name(&self) -> &'static str {
        "checker"
    }

    fn value(&self, x: usize, y: usize, phase: usize) -> f64 {
        if (x + y + phase) % 2 == 0 { 1.0 } else { -1.0 }
    }
}

struct Stripes;

impl Artifact for Stripes {
    fn name(&self) -> &'static str {
        "stripes"
    }

    /// Odd phases run horizontally, even phases vertically.
    fn value(&self, x: usize, y: usize, phase: usize) -> f64 {
        let t = if phase % 2 == 0 { x } else { y };
        if (t + phase / 2) % 2 == 0 { 1.0 } else { -1.0 }
    }
}

pub fn artifacts() -> Registry<dyn Artifact> {
    let mut r: Registry<dyn Artifact> = Registry::new("artifact");
    r.register("checker", Box::new(Checker)).register("stripes", Box::new(Stripes));
    r
}

fn smooth_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..COMPONENTS)
        .map(|_| {
            (
                rng.random_range(0.03..0.1),
                rng.random_range(-MAX_CYCLES..MAX_CYCLES),
                rng.random_range(0.0..MAX_CYCLES),
                rng.random_range(0.0..TAU),
            )
        })
        .collect();
    let base = rng.random_range(0.35..0.65);
    let s = size as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = base
                + comps
                    .iter()
                    .map(|&(a, fx, fy, ph)| a * (TAU * (fx * x as f64 + fy * y as f64) / s + ph).cos())
                    .sum::<f64>();
        }
    }
    out
}

/// Image `index` of the corpus with its label and tag. Even indices are
/// real, odd indices fake.
pub fn render(spec: &FixtureSpec, index: usize) -> (GrayImage, u8, &'static str) {
    let mut rng = seed::child_rng(spec.seed, &[index as u64]);
    let size = spec.size;
    let mut px = smooth_field(size, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for v in px.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let label = (index % 2) as u8;
    let tag = if label == 0 {
        "real"
    } else {
        let registry = artifacts();
        let names = registry.names();
        let name = names[rng.random_range(0..names.len())];
        let art = registry.get(name).expect("registered artifact");
        let phase = rng.random_range(0..4);
        for y in 0..size {
            for x in 0..size {
                px[y * size + x] += spec.amplitude * art.value(x, y, phase);
            }
        }
        art.name()
    };
    (GrayImage::new(size, size, px), label, tag)
}

pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&img.to_u8(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .expect("in-memory png encoding");
    out
}

/// Writes `count` PNG images and `manifest.csv` into `out_dir`.
pub fn generate(out_dir: &Path, spec: &FixtureSpec) -> CliResult<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| DafError::io(out_dir, e))?;
    let rows = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let (img, label, tag) = render(spec, i);
            let name = format!("img_{i:05}.png");
            let path = out_dir.join(&name);
            std::fs::write(&path, encode_png(&img)).map_err(|e| DafError::io(&path, e))?;
            Ok(ManifestRow { path: name.into(), label, tag: tag.to_string() })
        })
        .collect::<Result<Vec<_>, DafError>>()?;
    let manifest = Manifest::new(rows, out_dir.to_path_buf());
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
