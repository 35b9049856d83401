//! Checkpoint archives.
//!
//! A checkpoint is a directory holding `manifest.json` (config echo, run
//! state, class counts), `grade_spaces.json` and three tensor blobs:
//! `generator.bin`, `discriminator.bin` and `optimizer.bin`.
//!
//! Blob layout, little endian:
//!
//! ```text
//! magic  b"DRGANT01"
//! u64    tensor count
//! repeated:
//!   u32  name length, then UTF-8 name bytes
//!   u8   dtype (0 = f64)
//!   u32  rank, then u64 per dimension
//!   f64  values, row-major
//! ```

use std::fs;
use std::path::Path;

use drgan_core::grading::{GradeSpace, GradingBackbone};
use drgan_core::tensor::Tensor;
use drgan_core::trainer::{GanModel, RunState, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, read_json, write_json, Result};

pub const BLOB_MAGIC: &[u8; 8] = b"DRGANT01";
const DTYPE_F64: u8 = 0;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Option<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != BLOB_MAGIC {
        return None;
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).ok()?;
        if r.take(1)?[0] != DTYPE_F64 {
            return None;
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(&shape, data)));
    }
    (r.pos == bytes.len()).then_some(out)
}

pub fn write_blob(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)).map_err(io_err(path))
}

pub fn read_blob(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes).ok_or_else(|| format_err(path, "malformed tensor blob"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    pub state: RunState,
    pub class_counts: [usize; 5],
    pub blobs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceFile {
    pub grade: u8,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub n: usize,
}

pub fn write_spaces(path: &Path, spaces: &[GradeSpace]) -> Result<()> {
    let rows: Vec<SpaceFile> =
        spaces.iter().map(|s| SpaceFile { grade: s.grade.level(), mu: s.mu.clone(), sigma2: s.sigma2.clone(), n: s.n }).collect();
    write_json(path, &rows)
}

pub fn read_spaces(path: &Path) -> Result<Vec<GradeSpace>> {
    let rows: Vec<SpaceFile> = read_json(path)?;
    rows.into_iter()
        .map(|r| {
            if r.mu.len() != r.sigma2.len() || r.sigma2.iter().any(|s| !(*s >= 0.0)) {
                return Err(format_err(path, format!("grade {} has inconsistent mu/sigma2", r.grade)));
            }
            Ok(GradeSpace { grade: drgan_core::data::GradeLabel::new(r.grade)?, mu: r.mu, sigma2: r.sigma2, n: r.n })
        })
        .collect()
}

const BLOBS: [(&str, &str); 3] = [("generator.bin", "g."), ("discriminator.bin", "d."), ("optimizer.bin", "_adam_")];

fn blob_for(name: &str) -> usize {
    if name.contains("_adam_") {
        2
    } else if name.starts_with("g.") {
        0
    } else {
        1
    }
}

pub fn save_checkpoint(model: &GanModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut parts: [Vec<(String, Tensor)>; 3] = Default::default();
    for (name, t) in model.named_tensors() {
        parts[blob_for(&name)].push((name, t));
    }
    for ((file, _), tensors) in BLOBS.iter().zip(&parts) {
        write_blob(&dir.join(file), tensors)?;
    }
    write_spaces(&dir.join("grade_spaces.json"), &model.spaces)?;
    let manifest = Manifest {
        format: "drgan-checkpoint-1".into(),
        config: model.config.clone(),
        state: model.state.clone(),
        class_counts: model.class_counts,
        blobs: BLOBS.iter().map(|b| b.0.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<GanModel> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let spaces = read_spaces(&dir.join("grade_spaces.json"))?;
    let mut model = GanModel::new(manifest.config, spaces)?;
    let mut tensors = Vec::new();
    for file in &manifest.blobs {
        tensors.extend(read_blob(&dir.join(file))?);
    }
    model.load_tensors(&tensors)?;
    model.state = manifest.state;
    model.class_counts = manifest.class_counts;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraderManifest {
    pub seed: u64,
    pub accuracy: f64,
}

/// Grader directory: `grader.json` plus `grader.bin`.
pub fn save_grader(net: &GradingBackbone, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tensors: Vec<(String, Tensor)> = net.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    write_blob(&dir.join("grader.bin"), &tensors)?;
    write_json(&dir.join("grader.json"), &GraderManifest { seed, accuracy: net.achieved_accuracy })
}

pub fn load_grader(dir: &Path) -> Result<GradingBackbone> {
    let m: GraderManifest = read_json(&dir.join("grader.json"))?;
    let mut net = GradingBackbone::new(m.seed);
    let tensors = read_blob(&dir.join("grader.bin"))?;
    net.store.load_values(tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
    net.achieved_accuracy = m.accuracy;
    Ok(net)
}
