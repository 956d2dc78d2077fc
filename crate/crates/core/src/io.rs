//! On-disk formats.
//!
//! Arrays are stored as little-endian `f64` after a 16-byte header: the
//! magic `GGFB` followed by three little-endian `u32` extents. Payload order
//! is column-major, so a matrix `n × c` is written with extents `(n, c, 1)`
//! and a coefficient tensor with `(t, s, m)`. Datasets are described by a
//! JSON manifest that names the array files relative to its own directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GgflError, Result};
use crate::model::{build_grid_graph, ProblemData, SpatialGraph};
use crate::synthetic::{GenConfig, SyntheticDataset};
use crate::tensor::Tensor3;

pub const MAGIC: [u8; 4] = *b"GGFB";
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor3) -> Result<Vec<u8>> {
    let (a, b, c) = t.shape();
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| GgflError::Format(format!("extent {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.len());
    out.extend_from_slice(&MAGIC);
    for v in [a, b, c] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for v in t.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor3> {
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(GgflError::Format("missing GGFB header".into()));
    }
    let ext = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (a, b, c) = (ext(0), ext(1), ext(2));
    let count = a
        .checked_mul(b)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| GgflError::Format("array extents overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 8 * count {
        return Err(GgflError::Format(format!(
            "expected {} payload bytes for shape ({a}, {b}, {c}), found {}",
            8 * count,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
        .collect();
    Tensor3::from_vec(a, b, c, data)
}

pub fn write_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor3> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let t = Tensor3::from_vec(m.nrows(), m.ncols(), 1, m.as_slice().to_vec())?;
    write_tensor(path, &t)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let t = read_tensor(path)?;
    let (r, c, k) = t.shape();
    if k != 1 {
        return Err(GgflError::Format(format!(
            "{} holds a ({r}, {c}, {k}) array, expected a matrix",
            path.display()
        )));
    }
    Ok(DMatrix::from_column_slice(r, c, t.as_slice()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub n: usize,
    pub design: String,
    pub responses: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub t: usize,
    pub s: usize,
    pub m: usize,
    /// Grid shape used to build the 4-neighbour graph when `edges` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize, f64)>>,
    pub train: SplitFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<SplitFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change_point: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
}

impl DatasetManifest {
    pub fn graph(&self) -> Result<SpatialGraph> {
        match (&self.edges, self.grid) {
            (Some(e), _) => SpatialGraph::new(self.s, e.iter().copied()),
            (None, Some((r, c))) => {
                if r * c != self.s {
                    return Err(GgflError::InvalidConfig(format!("grid {r}x{c} does not cover s = {}", self.s)));
                }
                build_grid_graph(r, c)
            }
            (None, None) => Err(GgflError::InvalidConfig("manifest needs either grid or edges".into())),
        }
    }

    /// Every file the manifest references, relative to its directory.
    pub fn files(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for split in [Some(&self.train), self.validation.as_ref(), self.test.as_ref()].into_iter().flatten() {
            out.push(split.design.as_str());
            out.push(split.responses.as_str());
            out.extend(split.weights.as_deref());
        }
        out.extend(self.truth.as_deref());
        out
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub graph: SpatialGraph,
    pub train: ProblemData,
    pub validation: Option<ProblemData>,
    pub test: Option<ProblemData>,
    pub truth: Option<Tensor3>,
}

fn write_split(dir: &Path, name: &str, data: &ProblemData) -> Result<SplitFiles> {
    let design = format!("{name}_x.bin");
    let responses = format!("{name}_y.bin");
    write_matrix(&dir.join(&design), data.design())?;
    write_matrix(&dir.join(&responses), data.responses())?;
    let weights = match data.weights() {
        Some(w) => {
            let file = format!("{name}_w.bin");
            write_matrix(&dir.join(&file), &DMatrix::from_column_slice(w.len(), 1, w.as_slice()))?;
            Some(file)
        }
        None => None,
    };
    Ok(SplitFiles {
        n: data.dims().n,
        design,
        responses,
        weights,
    })
}

/// Writes arrays and `manifest.json` into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let d = ds.train.dims();
    let truth = "truth.bin".to_string();
    write_tensor(&dir.join(&truth), &ds.truth)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        t: d.t,
        s: d.s,
        m: d.m,
        grid: Some(ds.config.grid),
        edges: None,
        train: write_split(dir, "train", &ds.train)?,
        validation: Some(write_split(dir, "val", &ds.validation)?),
        test: Some(write_split(dir, "test", &ds.test)?),
        truth: Some(truth),
        change_point: Some(ds.change_point),
        generator: Some(ds.config.clone()),
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

fn read_split(dir: &Path, m: &DatasetManifest, files: &SplitFiles) -> Result<ProblemData> {
    let x = read_matrix(&dir.join(&files.design))?;
    let y = read_matrix(&dir.join(&files.responses))?;
    let w = match &files.weights {
        Some(f) => Some(DVector::from_column_slice(read_matrix(&dir.join(f))?.as_slice())),
        None => None,
    };
    if x.nrows() != files.n {
        return Err(GgflError::Format(format!(
            "{} has {} rows but the manifest declares n = {}",
            files.design,
            x.nrows(),
            files.n
        )));
    }
    ProblemData::new(m.t, m.s, x, y, w)
}

/// Resolves a manifest path; a directory means `<dir>/manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let mpath = manifest_path(path);
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(GgflError::Format(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let graph = manifest.graph()?;
    let train = read_split(dir, &manifest, &manifest.train)?;
    let validation = manifest.validation.as_ref().map(|f| read_split(dir, &manifest, f)).transpose()?;
    let test = manifest.test.as_ref().map(|f| read_split(dir, &manifest, f)).transpose()?;
    let truth = manifest.truth.as_ref().map(|f| read_tensor(&dir.join(f))).transpose()?;
    if let Some(t) = &truth {
        if t.shape() != (manifest.t, manifest.s, manifest.m) {
            return Err(GgflError::Format(format!(
                "truth shape {:?} does not match the manifest",
                t.shape()
            )));
        }
    }
    Ok(LoadedDataset {
        manifest,
        graph,
        train,
        validation,
        test,
        truth,
    })
}
