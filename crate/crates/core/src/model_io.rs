//! On-disk model directory: `manifest.json` plus raw little-endian blobs.
//!
//! ```text
//! model/
//!   manifest.json
//!   layer_0.bin   # w_q | w_k | w_v, row-major
//!   layer_1.bin
//! ```
//!
//! Each tensor entry records its file, byte range and CRC-32 of those bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Element, ElementWidth, HeadGeometry, Matrix};
use crate::pipeline::{LayerWeights, ModelBundle};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub element_width: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

fn tensor_name(layer: usize, which: &str) -> String {
    format!("layer.{layer}.{which}")
}

pub fn save_model<T: Element>(model: &ModelBundle<T>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = model.geometry.model_dim();
    let mut tensors = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let file = format!("layer_{i}.bin");
        let mut blob = Vec::new();
        for (which, w) in [("w_q", &layer.w_q), ("w_k", &layer.w_k), ("w_v", &layer.w_v)] {
            let start = blob.len();
            for &x in w.data() {
                x.write_le(&mut blob);
            }
            tensors.push(TensorEntry {
                name: tensor_name(i, which),
                shape: vec![d, d],
                file: file.clone(),
                offset: start as u64,
                length: (blob.len() - start) as u64,
                crc32: crc32fast::hash(&blob[start..]),
            });
        }
        let path = dir.join(&file);
        fs::write(&path, &blob).map_err(|e| Error::io(path, e))?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        layers: model.n_layers(),
        n_heads: model.geometry.n_heads,
        head_dim: model.geometry.head_dim,
        element_width: T::WIDTH.as_str().to_string(),
        byte_order: "little".to_string(),
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn load_err(entry: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Load {
        entry: entry.into(),
        reason: reason.into(),
    }
}

fn decode<T: Element>(bytes: &[u8], width: ElementWidth) -> Vec<T> {
    match width {
        ElementWidth::F32 => bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
        ElementWidth::F64 if T::WIDTH == ElementWidth::F64 => bytes.chunks_exact(8).map(T::read_le).collect(),
        ElementWidth::F64 => bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    }
}

/// Loads and validates a model directory, converting elements to `T`.
pub fn load_model<T: Element>(dir: impl AsRef<Path>) -> Result<ModelBundle<T>> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| load_err(MANIFEST_FILE, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| load_err(MANIFEST_FILE, e.to_string()))?;

    if manifest.version != FORMAT_VERSION {
        return Err(load_err("version", format!("unsupported version {}", manifest.version)));
    }
    if manifest.byte_order != "little" {
        return Err(load_err("byte_order", format!("unsupported byte order `{}`", manifest.byte_order)));
    }
    let width = ElementWidth::parse(&manifest.element_width).ok_or_else(|| {
        load_err("element_width", format!("unknown element width `{}`", manifest.element_width))
    })?;
    let geometry = HeadGeometry::new(manifest.n_heads, manifest.head_dim)
        .map_err(|e| load_err("geometry", e.to_string()))?;
    let d = geometry.model_dim();

    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut blobs: HashMap<&str, Vec<u8>> = HashMap::new();

    let mut read_tensor = |layer: usize, which: &str| -> Result<Matrix<T>> {
        let name = tensor_name(layer, which);
        let entry = *entries
            .get(name.as_str())
            .ok_or_else(|| load_err(&name, "missing from manifest tensor table"))?;
        if entry.shape != [d, d] {
            return Err(load_err(&name, format!("shape {:?}, expected [{d}, {d}]", entry.shape)));
        }
        let expected = (d * d * width.bytes()) as u64;
        if entry.length != expected {
            return Err(load_err(&name, format!("byte length {} does not match shape ({expected})", entry.length)));
        }
        if !blobs.contains_key(entry.file.as_str()) {
            let bytes = fs::read(dir.join(&entry.file))
                .map_err(|e| load_err(&entry.file, format!("missing blob: {e}")))?;
            blobs.insert(entry.file.as_str(), bytes);
        }
        let blob = &blobs[entry.file.as_str()];
        let start = (entry.offset as usize).min(blob.len());
        let end = ((entry.offset + entry.length) as usize).min(blob.len());
        let bytes = &blob[start..end];
        let crc = crc32fast::hash(bytes);
        if crc != entry.crc32 || bytes.len() as u64 != entry.length {
            return Err(load_err(
                &name,
                format!(
                    "checksum failure: crc32 {crc:#010x} over {} bytes, manifest says {:#010x} over {}",
                    bytes.len(),
                    entry.crc32,
                    entry.length
                ),
            ));
        }
        Matrix::from_vec(d, d, decode(bytes, width)).map_err(|e| load_err(&name, e.to_string()))
    };

    let mut layers = Vec::with_capacity(manifest.layers);
    for i in 0..manifest.layers {
        layers.push(LayerWeights {
            w_q: read_tensor(i, "w_q")?,
            w_k: read_tensor(i, "w_k")?,
            w_v: read_tensor(i, "w_v")?,
        });
    }
    ModelBundle::new(geometry, layers)
}
