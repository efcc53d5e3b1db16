//! Image decoding, normalization, perturbation and augmentation.
//!
//! Everything downstream consumes a square grayscale raster with
//! intensities in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DafError, Result};
use crate::registry::Registry;
use crate::seed;

pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Quantizes to 8-bit luma.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        GrayImage::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        GrayImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }
}

/// Decodes a PNG or JPEG file, converts to luminance and resizes to
/// `size`×`size`.
pub fn load_image(path: &Path, size: usize) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| DafError::io(path, e))?;
    decode_image(&bytes, size).map_err(|reason| DafError::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Decodes an in-memory PNG or JPEG.
pub fn decode_image(bytes: &[u8], size: usize) -> std::result::Result<GrayImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(format!("unsupported format {format:?}"));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    let luma: Vec<f64> = rgb
        .pixels()
        .map(|p| {
            (LUMA_R * f64::from(p[0]) + LUMA_G * f64::from(p[1]) + LUMA_B * f64::from(p[2]))
                / 255.0
        })
        .collect();
    let gray = GrayImage::new(w, h, luma);
    Ok(resize_bilinear(&gray, size, size).clamp_unit())
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    if img.width == out_w && img.height == out_h {
        return img.clone();
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let taps = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, sx, img.width)).collect();
    GrayImage::from_fn(out_w, out_h, |x, y| {
        let (y0, y1, fy) = taps(y, sy, img.height);
        let (x0, x1, fx) = cols[x];
        let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
        let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// One robustness perturbation applied after normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbSpec {
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbSpec::Blur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                DafError::InvalidSpec(format!("blur sigma must be positive, got {sigma}")),
            ),
            PerturbSpec::Jpeg { quality } if !(1..=100).contains(&quality) => Err(
                DafError::InvalidSpec(format!("jpeg quality must be in [1,100], got {quality}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbSpec::Blur { .. } => "blur",
            PerturbSpec::Jpeg { .. } => "jpeg",
        }
    }
}

impl std::str::FromStr for PerturbSpec {
    type Err = DafError;

    /// Parses `blur:SIGMA` or `jpeg:QUALITY`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| DafError::InvalidSpec(format!("expected KIND:VALUE, got '{s}'")))?;
        let registry = perturbations();
        let parser = registry
            .lookup(kind)
            .map_err(|e| DafError::InvalidSpec(e.to_string()))?;
        let spec = parser.parse(arg)?;
        spec.validate()?;
        Ok(spec)
    }
}

impl std::fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PerturbSpec::Blur { sigma } => write!(f, "blur:{sigma}"),
            PerturbSpec::Jpeg { quality } => write!(f, "jpeg:{quality}"),
        }
    }
}

/// A named degradation applied to a normalized image.
pub trait Perturbation: Send + Sync {
    fn parse(&self, arg: &str) -> Result<PerturbSpec>;
    fn apply(&self, img: &GrayImage, spec: &PerturbSpec, rng_seed: u64) -> Result<GrayImage>;
}

struct GaussianBlur;

impl Perturbation for GaussianBlur {
    fn parse(&self, arg: &str) -> Result<PerturbSpec> {
        let sigma = arg
            .parse::<f64>()
            .map_err(|_| DafError::InvalidSpec(format!("bad blur sigma '{arg}'")))?;
        Ok(PerturbSpec::Blur { sigma })
    }

    fn apply(&self, img: &GrayImage, spec: &PerturbSpec, _rng_seed: u64) -> Result<GrayImage> {
        let PerturbSpec::Blur { sigma } = *spec else {
            return Err(DafError::InvalidSpec(format!("blur cannot apply {spec}")));
        };
        Ok(gaussian_blur(img, sigma))
    }
}

struct JpegRecompress;

impl Perturbation for JpegRecompress {
    fn parse(&self, arg: &str) -> Result<PerturbSpec> {
        let quality = arg
            .parse::<u8>()
            .map_err(|_| DafError::InvalidSpec(format!("bad jpeg quality '{arg}'")))?;
        Ok(PerturbSpec::Jpeg { quality })
    }

    fn apply(&self, img: &GrayImage, spec: &PerturbSpec, _rng_seed: u64) -> Result<GrayImage> {
        let PerturbSpec::Jpeg { quality } = *spec else {
            return Err(DafError::InvalidSpec(format!("jpeg cannot apply {spec}")));
        };
        jpeg_roundtrip(img, quality)
    }
}

/// Registry of available perturbations, keyed by the `KIND` in `KIND:VALUE`.
pub fn perturbations() -> Registry<dyn Perturbation> {
    let mut r: Registry<dyn Perturbation> = Registry::new("perturbation");
    r.register("blur", Box::new(GaussianBlur))
        .register("jpeg", Box::new(JpegRecompress));
    r
}

pub fn perturb(img: &GrayImage, spec: &PerturbSpec, rng_seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let registry = perturbations();
    let p = registry
        .lookup(spec.name())
        .map_err(|e| DafError::InvalidSpec(e.to_string()))?;
    Ok(p.apply(img, spec, rng_seed)?.clamp_unit())
}

/// Discrete Gaussian of radius `ceil(3σ)`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric (edge-duplicating) reflection.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as i64 + k as i64 - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for (k, kv) in kernel.iter().enumerate() {
        for y in 0..h {
            let src = reflect(y as i64 + k as i64 - radius, h);
            let src_row = &tmp[src * w..(src + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    GrayImage::new(w, h, out).clamp_unit()
}

/// Baseline JPEG encode at `quality`, then decode back to a raster.
pub fn jpeg_roundtrip(img: &GrayImage, quality: u8) -> Result<GrayImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(
            &img.to_u8(),
            img.width as u32,
            img.height as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| DafError::InvalidSpec(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load(Cursor::new(&buf), ImageFormat::Jpeg)
        .map_err(|e| DafError::InvalidSpec(format!("jpeg decode failed: {e}")))?
        .to_luma8();
    Ok(GrayImage::from_u8(
        decoded.width() as usize,
        decoded.height() as usize,
        decoded.as_raw(),
    ))
}

/// Random training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub flip_prob: f64,
    pub crop_prob: f64,
    pub noise_prob: f64,
    pub crop_factor: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            enabled: false,
            flip_prob: 0.5,
            crop_prob: 0.5,
            noise_prob: 0.5,
            crop_factor: 0.875,
            noise_sigma: 0.02,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("crop_prob", self.crop_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DafError::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.crop_factor > 0.0 && self.crop_factor <= 1.0) {
            return Err(DafError::Config(format!(
                "crop_factor must be in (0,1], got {}",
                self.crop_factor
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(DafError::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

pub fn augment(img: &GrayImage, spec: &AugmentSpec, rng_seed: u64) -> GrayImage {
    if !spec.enabled {
        return img.clone();
    }
    let mut rng = seed::rng(rng_seed);
    let mut out = img.clone();
    if rng.random::<f64>() < spec.flip_prob {
        out = out.flip_horizontal();
    }
    if rng.random::<f64>() < spec.crop_prob {
        let side = |n: usize| ((spec.crop_factor * n as f64).round() as usize).clamp(1, n);
        let (cw, ch) = (side(out.width), side(out.height));
        let x0 = rng.random_range(0..=out.width - cw);
        let y0 = rng.random_range(0..=out.height - ch);
        out = resize_bilinear(&out.crop(x0, y0, cw, ch), out.width, out.height);
    }
    if rng.random::<f64>() < spec.noise_prob && spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.clamp_unit()
}
