//! Persistence: model and decomposition containers, pilot datasets, and the
//! synthetic generators.
//!
//! # Model container
//!
//! A directory holding `manifest.json` and one raw blob per matrix. Blobs are
//! little-endian IEEE-754 binary32, row-major, no header. The manifest records
//! format version, the endianness tag `"little"`, dimensions, gate order and,
//! per blob, its file name, shape and SHA-256 of the blob bytes.
//!
//! # Decomposition container
//!
//! Same layout. Per gate the blobs are `<g>.sigma` (binary32 × steps),
//! `<g>.u` (binary32 × steps·R), `<g>.nnz` (u32 × steps), `<g>.idx`
//! (u32 × Σnnz) and `<g>.val` (binary32 × Σnnz), followed by `head.f32`.
//!
//! # Dataset container
//!
//! One file. All integers little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 8 | magic `ALSTMDS\0` |
//! | 8 | 4 | version (u32, = 1) |
//! | 12 | 4 | endianness tag, ASCII `LE\0\0` |
//! | 16 | 4 | frame dimension D (u32) |
//! | 20 | 8 | total frame count (u64) |
//! | 28 | 4 | sequence count S (u32) |
//! | 32 | 8·S | frames per sequence (u64 each) |
//! | 32+8S | 4·D·frames | payload, binary32 |

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{ApproxConfig, ApproxLstm, GateDecomposition, RefinementStep};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector, SparseVector};
use crate::lstm::{Gate, LstmModel};

pub const FORMAT_VERSION: u32 = 1;
pub const ENDIANNESS_TAG: &str = "little";
pub const MANIFEST_FILE: &str = "manifest.json";
const DATASET_MAGIC: &[u8; 8] = b"ALSTMDS\0";
const DATASET_ENDIAN: &[u8; 4] = b"LE\0\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub dtype: BlobType,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobType {
    F32,
    U32,
}

impl BlobType {
    fn width(self) -> u64 {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub name: String,
    pub seed: Option<u64>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub actions: usize,
    pub gate_order: Vec<String>,
    pub content_hash: String,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxManifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub actions: usize,
    pub nz: usize,
    pub n_steps: usize,
    pub gate_order: Vec<String>,
    pub source_model_hash: String,
    pub residual_fro_norms: Vec<Vec<f64>>,
    pub blobs: Vec<BlobEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|x| (x as f32).to_le_bytes())
        .collect()
}

fn u32_bytes(values: impl IntoIterator<Item = usize>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for v in values {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct BlobWriter<'a> {
    dir: &'a Path,
    entries: Vec<BlobEntry>,
}

impl<'a> BlobWriter<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir,
            entries: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, dtype: BlobType, bytes: Vec<u8>) -> Result<()> {
        let file = format!("{name}.{}", if dtype == BlobType::F32 { "f32" } else { "u32" });
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push(BlobEntry {
            name: name.to_string(),
            file,
            dtype,
            len: bytes.len() as u64 / dtype.width(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }
}

struct BlobReader<'a> {
    dir: &'a Path,
    entries: &'a [BlobEntry],
}

impl BlobReader<'_> {
    fn raw(&self, name: &str, expected_len: u64) -> Result<Vec<u8>> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Structural {
                blob: name.to_string(),
                detail: "missing from manifest".into(),
            })?;
        if entry.len != expected_len {
            return Err(Error::Structural {
                blob: name.to_string(),
                detail: format!(
                    "manifest declares {} elements, dimensions require {expected_len}",
                    entry.len
                ),
            });
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Structural {
                blob: name.to_string(),
                detail: format!("illegal blob file name `{}`", entry.file),
            });
        }
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let want = expected_len * entry.dtype.width();
        if bytes.len() as u64 != want {
            return Err(Error::Structural {
                blob: name.to_string(),
                detail: format!("blob holds {} bytes, expected {want}", bytes.len()),
            });
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::HashMismatch {
                blob: name.to_string(),
            });
        }
        Ok(bytes)
    }

    fn f32s(&self, name: &str, expected_len: usize) -> Result<Vec<f64>> {
        let bytes = self.raw(name, expected_len as u64)?;
        let out: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Structural {
                blob: name.to_string(),
                detail: "non-finite value".into(),
            });
        }
        Ok(out)
    }

    fn u32s(&self, name: &str, expected_len: usize) -> Result<Vec<usize>> {
        let bytes = self.raw(name, expected_len as u64)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DenseMatrix> {
        DenseMatrix::new(rows, cols, self.f32s(name, rows * cols)?)
    }
}

fn gate_order() -> Vec<String> {
    Gate::ALL.iter().map(|g| g.tag().to_string()).collect()
}

fn check_header(version: u32, endianness: &str, order: &[String]) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    if endianness != ENDIANNESS_TAG {
        return Err(Error::Endianness(endianness.to_string()));
    }
    if order != gate_order().as_slice() {
        return Err(Error::Format(format!("unexpected gate order {order:?}")));
    }
    Ok(())
}

fn read_manifest<T: serde::de::DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // peek at the version first so newer manifests fail with a clear kind
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(Error::UnknownVersion(v as u32));
        }
    }
    serde_json::from_value(raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `model` to the directory `dir`, rounding weights to binary32.
pub fn save_model(model: &LstmModel, dir: &Path) -> Result<ModelManifest> {
    let mut w = BlobWriter::new(dir)?;
    for g in Gate::ALL {
        w.put(
            &format!("gate_{}", g.tag()),
            BlobType::F32,
            f32_bytes(model.gate(g).data().iter().copied()),
        )?;
    }
    w.put("head", BlobType::F32, f32_bytes(model.head().data().iter().copied()))?;
    let manifest = ModelManifest {
        format: "anytime-lstm/model".into(),
        version: FORMAT_VERSION,
        endianness: ENDIANNESS_TAG.into(),
        name: model.name.clone(),
        seed: model.seed,
        input_dim: model.input_dim(),
        hidden_dim: model.hidden_dim(),
        actions: model.actions(),
        gate_order: gate_order(),
        content_hash: model.content_hash(),
        blobs: w.entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<LstmModel> {
    let m: ModelManifest = read_manifest(dir)?;
    check_header(m.version, &m.endianness, &m.gate_order)?;
    let r = m.hidden_dim;
    let c = m.input_dim + m.hidden_dim;
    let reader = BlobReader {
        dir,
        entries: &m.blobs,
    };
    let gates = [
        reader.matrix("gate_f", r, c)?,
        reader.matrix("gate_i", r, c)?,
        reader.matrix("gate_c", r, c)?,
        reader.matrix("gate_o", r, c)?,
    ];
    let head = reader.matrix("head", m.actions, r)?;
    let mut model = LstmModel::new(m.input_dim, r, gates, head)?;
    model.name = m.name;
    model.seed = m.seed;
    Ok(model)
}

pub fn save_approx(approx: &ApproxLstm, dir: &Path) -> Result<ApproxManifest> {
    let mut w = BlobWriter::new(dir)?;
    for g in Gate::ALL {
        let d = approx.gate(g);
        let tag = g.tag();
        w.put(
            &format!("{tag}.sigma"),
            BlobType::F32,
            f32_bytes(d.steps.iter().map(|s| s.sigma)),
        )?;
        w.put(
            &format!("{tag}.u"),
            BlobType::F32,
            f32_bytes(d.steps.iter().flat_map(|s| s.u.iter().copied())),
        )?;
        w.put(
            &format!("{tag}.nnz"),
            BlobType::U32,
            u32_bytes(d.steps.iter().map(|s| s.v_pruned.nnz()))?,
        )?;
        w.put(
            &format!("{tag}.idx"),
            BlobType::U32,
            u32_bytes(d.steps.iter().flat_map(|s| s.v_pruned.indices().iter().copied()))?,
        )?;
        w.put(
            &format!("{tag}.val"),
            BlobType::F32,
            f32_bytes(d.steps.iter().flat_map(|s| s.v_pruned.values().iter().copied())),
        )?;
    }
    w.put("head", BlobType::F32, f32_bytes(approx.head().data().iter().copied()))?;
    let cfg = approx.config();
    let manifest = ApproxManifest {
        format: "anytime-lstm/decomposition".into(),
        version: FORMAT_VERSION,
        endianness: ENDIANNESS_TAG.into(),
        input_dim: approx.input_dim(),
        hidden_dim: approx.hidden_dim(),
        actions: approx.actions(),
        nz: cfg.nz,
        n_steps: cfg.n_steps,
        gate_order: gate_order(),
        source_model_hash: approx.source_hash().to_string(),
        residual_fro_norms: Gate::ALL
            .iter()
            .map(|&g| approx.gate(g).residual_fro_norms.clone())
            .collect(),
        blobs: w.entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_approx(dir: &Path) -> Result<ApproxLstm> {
    let m: ApproxManifest = read_manifest(dir)?;
    check_header(m.version, &m.endianness, &m.gate_order)?;
    let (r, c, n) = (m.hidden_dim, m.input_dim + m.hidden_dim, m.n_steps);
    if m.residual_fro_norms.len() != 4 {
        return Err(Error::Format("expected four residual traces".into()));
    }
    let reader = BlobReader {
        dir,
        entries: &m.blobs,
    };
    let mut gates = Vec::with_capacity(4);
    for g in Gate::ALL {
        let tag = g.tag();
        let sigma = reader.f32s(&format!("{tag}.sigma"), n)?;
        let u = reader.f32s(&format!("{tag}.u"), n * r)?;
        let nnz = reader.u32s(&format!("{tag}.nnz"), n)?;
        let total: usize = nnz.iter().sum();
        let idx = reader.u32s(&format!("{tag}.idx"), total)?;
        let val = reader.f32s(&format!("{tag}.val"), total)?;
        let mut steps = Vec::with_capacity(n);
        let mut off = 0;
        for (k, (&s, &cnt)) in sigma.iter().zip(&nnz).enumerate() {
            let p = SparseVector::new(c, idx[off..off + cnt].to_vec(), val[off..off + cnt].to_vec())
                .map_err(|e| Error::Structural {
                    blob: format!("{tag}.idx"),
                    detail: e.to_string(),
                })?;
            off += cnt;
            steps.push(RefinementStep {
                sigma: s,
                u: DenseVector::new(u[k * r..(k + 1) * r].to_vec())?,
                v_pruned: p,
            });
        }
        gates.push(GateDecomposition {
            gate: g,
            nz: m.nz,
            steps,
            residual_fro_norms: m.residual_fro_norms[g.index()].clone(),
        });
    }
    let head = reader.matrix("head", m.actions, r)?;
    let gates: [GateDecomposition; 4] = gates
        .try_into()
        .map_err(|_| Error::Format("gate count".into()))?;
    ApproxLstm::from_parts(
        m.input_dim,
        r,
        gates,
        head,
        ApproxConfig {
            nz: m.nz,
            n_steps: n,
        },
        m.source_model_hash,
    )
}

/// A pilot dataset: consecutive sequences of `frame_dim`-wide frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frame_dim: usize,
    pub sequences: Vec<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// SHA-256 of the serialized container bytes.
    pub fn content_hash(&self) -> String {
        sha256_hex(&encode_dataset(self).unwrap_or_default())
    }
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let d = u32::try_from(ds.frame_dim).map_err(|_| Error::Format("frame dim exceeds u32".into()))?;
    let s = u32::try_from(ds.sequences.len())
        .map_err(|_| Error::Format("sequence count exceeds u32".into()))?;
    let frames = ds.frame_count();
    let mut out = Vec::with_capacity(32 + 8 * ds.sequences.len() + 4 * frames * ds.frame_dim);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(DATASET_ENDIAN);
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&(frames as u64).to_le_bytes());
    out.extend_from_slice(&s.to_le_bytes());
    for seq in &ds.sequences {
        out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
    }
    for frame in ds.sequences.iter().flatten() {
        if frame.len() != ds.frame_dim {
            return Err(Error::Format(format!(
                "frame of length {} in a dataset of dimension {}",
                frame.len(),
                ds.frame_dim
            )));
        }
        out.extend(f32_bytes(frame.iter().copied()));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let structural = |detail: String| Error::Structural {
        blob: "dataset".into(),
        detail,
    };
    if bytes.len() < 32 {
        return Err(structural(format!("header truncated at {} bytes", bytes.len())));
    }
    if &bytes[0..8] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    if &bytes[12..16] != DATASET_ENDIAN {
        return Err(Error::Endianness(String::from_utf8_lossy(&bytes[12..16]).into_owned()));
    }
    let d = u32_at(16) as usize;
    let frames = u64_at(20) as usize;
    let s = u32_at(28) as usize;
    let header = 32 + 8 * s;
    if bytes.len() < header {
        return Err(structural("sequence table truncated".into()));
    }
    let lens: Vec<usize> = (0..s).map(|k| u64_at(32 + 8 * k) as usize).collect();
    if lens.iter().sum::<usize>() != frames {
        return Err(structural("sequence lengths do not sum to the frame count".into()));
    }
    let want = frames
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| structural("payload size overflows".into()))?;
    if bytes.len() - header != want {
        return Err(structural(format!(
            "payload holds {} bytes, expected {want}",
            bytes.len() - header
        )));
    }
    let mut values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut sequences = Vec::with_capacity(s);
    for len in lens {
        let seq: Vec<Vec<f64>> = (0..len)
            .map(|_| values.by_ref().take(d).collect())
            .collect();
        sequences.push(seq);
    }
    Ok(Dataset {
        frame_dim: d,
        sequences,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Seeded synthetic model.
///
/// Weights are drawn from N(0, 1/C) using ChaCha8 (RFC 7539 block function,
/// 8 rounds) seeded via `seed_from_u64`, in the order gate f, i, c, o, head,
/// each row-major. The head uses N(0, 1/R).
pub fn gen_synthetic(seed: u64, input_dim: usize, hidden_dim: usize, actions: usize) -> Result<LstmModel> {
    if input_dim == 0 || hidden_dim == 0 || actions == 0 {
        return Err(Error::invalid("dimensions must be at least 1"));
    }
    let c = input_dim + hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect()
    };
    let gate_std = 1.0 / (c as f64).sqrt();
    let gates = [
        DenseMatrix::new(hidden_dim, c, gaussian(hidden_dim * c, gate_std))?,
        DenseMatrix::new(hidden_dim, c, gaussian(hidden_dim * c, gate_std))?,
        DenseMatrix::new(hidden_dim, c, gaussian(hidden_dim * c, gate_std))?,
        DenseMatrix::new(hidden_dim, c, gaussian(hidden_dim * c, gate_std))?,
    ];
    let head = DenseMatrix::new(
        actions.max(2),
        hidden_dim,
        gaussian(actions.max(2) * hidden_dim, 1.0 / (hidden_dim as f64).sqrt()),
    )?;
    let mut model = LstmModel::new(input_dim, hidden_dim, gates, head)?;
    model.name = format!("synthetic-d{input_dim}-r{hidden_dim}-a{actions}");
    model.seed = Some(seed);
    Ok(model)
}

/// Seeded pilot dataset with standard-normal frames. Values are rounded
/// to binary32 so the in-memory dataset equals its stored image.
pub fn gen_pilot(seed: u64, frame_dim: usize, sequences: usize, frames_per_sequence: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..sequences)
        .map(|_| {
            (0..frames_per_sequence)
                .map(|_| {
                    (0..frame_dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z as f32 as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Dataset {
        frame_dim,
        sequences,
    }
}
