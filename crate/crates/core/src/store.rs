//! Binary persistence for models and feature caches.
//!
//! Model file: `"DAF1"`, version `u32`, payload length `u64`, payload,
//! CRC-32 of the payload (`u32`). The payload holds the config snapshot,
//! base dimension and every tree node; floats are stored as raw bits, so
//! saving a loaded model reproduces the file byte for byte.
//!
//! Feature cache: `"DAFC"`, version `u32`, rows `u64`, dim `u64`, 32-byte
//! manifest digest, one label byte per row, then row-major `f32` values.
//! Rows are read by offset, so a subset read touches only that subset.
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::assembly::RowSource;
use crate::cascade::{CascadeLayer, DeepForestModel};
use crate::data::Matrix;
use crate::error::{DafError, Result};
use crate::trees::{Forest, ForestKind, Node, Tree};

pub const MODEL_MAGIC: &[u8; 4] = b"DAF1";
pub const MODEL_VERSION: u32 = 1;
pub const CACHE_MAGIC: &[u8; 4] = b"DAFC";
pub const CACHE_VERSION: u32 = 1;
const CACHE_HEADER: u64 = 4 + 4 + 8 + 8 + 32;

const TAG_SPLIT: u8 = 0;
const TAG_LEAF: u8 = 1;

fn format(msg: impl Into<String>) -> DafError {
    DafError::Format(msg.into())
}

fn encode_model(model: &DeepForestModel) -> Vec<u8> {
    let mut p = Vec::new();
    let snapshot = model.snapshot().as_bytes();
    p.write_u32::<LittleEndian>(snapshot.len() as u32).unwrap();
    p.extend_from_slice(snapshot);
    p.write_u64::<LittleEndian>(model.base_dim() as u64).unwrap();
    p.write_u32::<LittleEndian>(model.layers().len() as u32).unwrap();
    for layer in model.layers() {
        p.write_u32::<LittleEndian>(layer.forests().len() as u32).unwrap();
        for f in layer.forests() {
            p.write_u8(f.kind().to_byte()).unwrap();
            p.write_u64::<LittleEndian>(f.feature_dim() as u64).unwrap();
            p.write_u8(u8::from(f.val_accuracy().is_some())).unwrap();
            p.write_u64::<LittleEndian>(f.val_accuracy().unwrap_or(0.0).to_bits()).unwrap();
            p.write_u32::<LittleEndian>(f.trees().len() as u32).unwrap();
            for t in f.trees() {
                p.write_u32::<LittleEndian>(t.nodes().len() as u32).unwrap();
                for node in t.nodes() {
                    match *node {
                        Node::Split { feature, threshold, left, right } => {
                            p.write_u8(TAG_SPLIT).unwrap();
                            p.write_u32::<LittleEndian>(feature).unwrap();
                            p.write_u64::<LittleEndian>(threshold.to_bits()).unwrap();
                            p.write_u32::<LittleEndian>(left).unwrap();
                            p.write_u32::<LittleEndian>(right).unwrap();
                        }
                        Node::Leaf { counts } => {
                            p.write_u8(TAG_LEAF).unwrap();
                            p.write_u32::<LittleEndian>(counts[0]).unwrap();
                            p.write_u32::<LittleEndian>(counts[1]).unwrap();
                        }
                    }
                }
            }
        }
    }
    p
}

/// Serializes a model into the complete file image.
pub fn model_bytes(model: &DeepForestModel) -> Vec<u8> {
    let payload = encode_model(model);
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(MODEL_MAGIC);
    out.write_u32::<LittleEndian>(MODEL_VERSION).unwrap();
    out.write_u64::<LittleEndian>(payload.len() as u64).unwrap();
    out.extend_from_slice(&payload);
    out.write_u32::<LittleEndian>(crc32fast::hash(&payload)).unwrap();
    out
}

pub fn save_model(model: &DeepForestModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_bytes(model)).map_err(|e| DafError::io(path, e))
}

/// Reader that turns premature end of payload into a format error.
struct Payload<'a>(&'a [u8]);

impl Payload<'_> {
    fn short(_: std::io::Error) -> DafError {
        format("payload ends early")
    }

    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(Self::short)
    }

    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LittleEndian>().map_err(Self::short)
    }

    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LittleEndian>().map_err(Self::short)
    }

    fn f64(&mut self) -> Result<f64> {
        self.u64().map(f64::from_bits)
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| format("size exceeds address space"))
    }

    /// A count that must be coverable by the remaining bytes.
    fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes) > self.0.len() {
            return Err(format("count exceeds payload"));
        }
        Ok(n)
    }
}

fn decode_model(payload: &[u8]) -> Result<DeepForestModel> {
    let mut r = Payload(payload);
    let len = r.count(1)?;
    let (text, rest) = r.0.split_at(len);
    let snapshot = std::str::from_utf8(text)
        .map_err(|_| format("config snapshot is not UTF-8"))?
        .to_string();
    r.0 = rest;
    let base_dim = r.usize()?;
    let n_layers = r.count(4)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_forests = r.count(22)?;
        let mut forests = Vec::with_capacity(n_forests);
        for _ in 0..n_forests {
            let kind_byte = r.u8()?;
            let kind = ForestKind::from_byte(kind_byte)
                .ok_or_else(|| format(format!("unknown forest kind {kind_byte}")))?;
            let dim = r.usize()?;
            let has_acc = r.u8()?;
            let acc = r.f64()?;
            let val = match has_acc {
                0 => None,
                1 => Some(acc),
                b => return Err(format(format!("bad accuracy flag {b}"))),
            };
            let n_trees = r.count(4)?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let n_nodes = r.count(9)?;
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    nodes.push(match r.u8()? {
                        TAG_SPLIT => Node::Split {
                            feature: r.u32()?,
                            threshold: r.f64()?,
                            left: r.u32()?,
                            right: r.u32()?,
                        },
                        TAG_LEAF => Node::Leaf {
                            counts: [r.u32()?, r.u32()?],
                        },
                        t => return Err(format(format!("unknown node tag {t}"))),
                    });
                }
                trees.push(Tree::from_nodes(nodes).map_err(|e| format(e.to_string()))?);
            }
            forests.push(Forest::from_parts(kind, trees, dim, val).map_err(|e| format(e.to_string()))?);
        }
        layers.push(CascadeLayer::new(forests));
    }
    if !r.0.is_empty() {
        return Err(format("trailing bytes after model payload"));
    }
    DeepForestModel::from_layers(layers, base_dim, snapshot)
}

/// Parses a complete model file image.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DeepForestModel> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(format("bad magic, not a model file"));
    }
    if bytes.len() < 8 {
        return Err(format("truncated header"));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != MODEL_VERSION {
        return Err(DafError::Version {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(format("truncated header"));
    }
    let len = LittleEndian::read_u64(&bytes[8..16]);
    if len.checked_add(20) != Some(bytes.len() as u64) {
        return Err(format(format!(
            "file is {} bytes, header implies {}",
            bytes.len(),
            len.saturating_add(20)
        )));
    }
    let payload = &bytes[16..bytes.len() - 4];
    let stored = LittleEndian::read_u32(&bytes[bytes.len() - 4..]);
    if crc32fast::hash(payload) != stored {
        return Err(format("checksum mismatch"));
    }
    decode_model(payload)
}

pub fn load_model(path: &Path) -> Result<DeepForestModel> {
    let bytes = std::fs::read(path).map_err(|e| DafError::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        DafError::Format(m) => DafError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Streams rows into a feature cache whose labels are known up front.
pub struct CacheWriter {
    out: BufWriter<File>,
    path: PathBuf,
    n: usize,
    d: usize,
    written: usize,
    buf: Vec<u8>,
}

impl CacheWriter {
    pub fn create(path: &Path, labels: &[u8], dim: usize, digest: [u8; 32]) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(format(format!("label {bad} is not 0 or 1")));
        }
        let io = |e| DafError::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(CACHE_MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(CACHE_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(labels.len() as u64).map_err(io)?;
        out.write_u64::<LittleEndian>(dim as u64).map_err(io)?;
        out.write_all(&digest).map_err(io)?;
        out.write_all(labels).map_err(io)?;
        Ok(CacheWriter {
            out,
            path: path.to_path_buf(),
            n: labels.len(),
            d: dim,
            written: 0,
            buf: vec![0; dim * 4],
        })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(DafError::DimensionMismatch {
                expected: self.d,
                found: row.len(),
            });
        }
        if self.written == self.n {
            return Err(DafError::InvalidCount {
                requested: self.n + 1,
                available: self.n,
            });
        }
        for (chunk, &v) in self.buf.chunks_exact_mut(4).zip(row) {
            LittleEndian::write_f32(chunk, v as f32);
        }
        self.out.write_all(&self.buf).map_err(|e| DafError::io(&self.path, e))?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.n {
            return Err(DafError::InvalidCount {
                requested: self.n,
                available: self.written,
            });
        }
        self.out.flush().map_err(|e| DafError::io(&self.path, e))
    }
}

/// Writes a whole matrix as a cache.
pub fn write_cache(rows: &Matrix, labels: &[u8], digest: [u8; 32], path: &Path) -> Result<()> {
    if rows.rows() != labels.len() {
        return Err(DafError::DimensionMismatch {
            expected: rows.rows(),
            found: labels.len(),
        });
    }
    let mut w = CacheWriter::create(path, labels, rows.cols(), digest)?;
    for r in rows.iter_rows() {
        w.push_row(r)?;
    }
    w.finish()
}

/// An opened cache: header and labels in memory, rows read on demand.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    path: PathBuf,
    dim: usize,
    labels: Vec<u8>,
    digest: [u8; 32],
}

impl FeatureCache {
    pub fn open(path: &Path) -> Result<Self> {
        let io = |e| DafError::io(path, e);
        let mut f = File::open(path).map_err(io)?;
        let size = f.metadata().map_err(io)?.len();
        if size < CACHE_HEADER {
            return Err(format(format!("{}: truncated cache header", path.display())));
        }
        let mut head = [0u8; CACHE_HEADER as usize];
        f.read_exact(&mut head).map_err(io)?;
        if &head[..4] != CACHE_MAGIC {
            return Err(format(format!("{}: bad magic, not a feature cache", path.display())));
        }
        let version = LittleEndian::read_u32(&head[4..8]);
        if version != CACHE_VERSION {
            return Err(DafError::Version {
                found: version,
                supported: CACHE_VERSION,
            });
        }
        let n = LittleEndian::read_u64(&head[8..16]);
        let d = LittleEndian::read_u64(&head[16..24]);
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|v| v.checked_add(n))
            .and_then(|v| v.checked_add(CACHE_HEADER));
        if expected != Some(size) {
            return Err(format(format!(
                "{}: file is {size} bytes, header implies {}",
                path.display(),
                expected.map_or("overflow".to_string(), |e| e.to_string())
            )));
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&head[24..56]);
        let mut labels = vec![0u8; n as usize];
        f.read_exact(&mut labels).map_err(io)?;
        if labels.iter().any(|&l| l > 1) {
            return Err(format(format!("{}: label outside {{0,1}}", path.display())));
        }
        Ok(FeatureCache {
            path: path.to_path_buf(),
            dim: d as usize,
            labels,
            digest,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Reads the requested rows, in the given order.
    pub fn read_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let n = self.labels.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DafError::IndexOutOfRange { index: bad, len: n });
        }
        let io = |e| DafError::io(&self.path, e);
        let mut f = File::open(&self.path).map_err(io)?;
        let row_bytes = self.dim * 4;
        let base = CACHE_HEADER + n as u64;
        let mut buf = vec![0u8; row_bytes];
        let mut floats = vec![0f32; self.dim];
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut pos = None;
        for &i in indices {
            let off = base + (i * row_bytes) as u64;
            if pos != Some(off) {
                f.seek(SeekFrom::Start(off)).map_err(io)?;
            }
            f.read_exact(&mut buf).map_err(io)?;
            pos = Some(off + row_bytes as u64);
            LittleEndian::read_f32_into(&buf, &mut floats);
            data.extend(floats.iter().map(|&v| v as f64));
        }
        Matrix::new(indices.len(), self.dim, data)
    }
}

impl RowSource for FeatureCache {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn load(&self, indices: &[usize]) -> Result<Matrix> {
        self.read_rows(indices)
    }
}

/// Reads a subset of rows and their labels from a cache file.
pub fn read_cache(path: &Path, subset: &[usize]) -> Result<(Matrix, Vec<u8>)> {
    let cache = FeatureCache::open(path)?;
    let rows = cache.read_rows(subset)?;
    Ok((rows, subset.iter().map(|&i| cache.labels[i]).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct ForestSummary {
    pub kind: &'static str,
    pub trees: usize,
    pub nodes: usize,
    pub max_depth: usize,
    pub val_accuracy: Option<f64>,
}

/// Inspection view of a model, exported as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub layers: usize,
    pub forests_per_layer: usize,
    pub base_dim: usize,
    pub forests: Vec<Vec<ForestSummary>>,
    pub config: String,
}

impl ModelSummary {
    pub fn of(model: &DeepForestModel) -> Self {
        ModelSummary {
            layers: model.layers().len(),
            forests_per_layer: model.forests_per_layer(),
            base_dim: model.base_dim(),
            forests: model
                .layers()
                .iter()
                .map(|l| {
                    l.forests()
                        .iter()
                        .map(|f| ForestSummary {
                            kind: f.kind().name(),
                            trees: f.trees().len(),
                            nodes: f.trees().iter().map(|t| t.nodes().len()).sum(),
                            max_depth: f.trees().iter().map(Tree::depth).max().unwrap_or(0),
                            val_accuracy: f.val_accuracy(),
                        })
                        .collect()
                })
                .collect(),
            config: model.snapshot().to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
