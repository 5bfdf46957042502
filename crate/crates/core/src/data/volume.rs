//! VVOL volumes: a JSON header `<name>.vvol.json` plus a little-endian raw
//! payload `<name>.vvol.bin`, row-major with the last axis contiguous.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, VolumeFault};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

pub const MAGIC: &str = "VVOL1";
pub const ORDER: &str = "row-major";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub magic: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
}

/// A decoded volume of either payload type.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    F32(Tensor<f32>),
    U8(LabelVolume),
}

impl Volume {
    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::F32(t) => t.shape(),
            Volume::U8(l) => l.shape(),
        }
    }
}

/// Strips any `.vvol.json`, `.vvol.bin` or `.vvol` suffix.
pub fn volume_stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".vvol.json", ".vvol.bin", ".vvol"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

/// `(header path, payload path)` for a volume named by any of its forms.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = volume_stem(path).into_os_string();
    let mut json = stem.clone();
    json.push(".vvol.json");
    let mut bin = stem;
    bin.push(".vvol.bin");
    (json.into(), bin.into())
}

fn fault(path: &Path, reason: VolumeFault) -> Error {
    Error::Volume {
        path: path.to_path_buf(),
        reason,
    }
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (json, _) = volume_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: json.clone(), source })?;
    if header.magic != MAGIC {
        return Err(fault(&json, VolumeFault::BadMagic(header.magic)));
    }
    if header.dtype != "f32" && header.dtype != "u8" {
        return Err(fault(&json, VolumeFault::BadDtype(header.dtype)));
    }
    if header.order != ORDER {
        return Err(fault(&json, VolumeFault::BadOrder(header.order)));
    }
    if header.shape.is_empty() || header.shape.len() > 5 || header.shape.contains(&0) {
        return Err(fault(&json, VolumeFault::ZeroExtent(header.shape)));
    }
    Ok(header)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let (_, bin) = volume_paths(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n: usize = header.shape.iter().product();
    let width = if header.dtype == "f32" { 4 } else { 1 };
    let expected = n * width;
    if bytes.len() < expected {
        return Err(fault(&bin, VolumeFault::Truncated { expected, found: bytes.len() }));
    }
    if bytes.len() > expected {
        return Err(fault(&bin, VolumeFault::Oversized { expected, found: bytes.len() }));
    }
    if header.dtype == "f32" {
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Volume::F32(Tensor::from_vec(&header.shape, data)?))
    } else {
        LabelVolume::new(&header.shape, bytes)
            .map(Volume::U8)
            .map_err(|e| Error::Data(format!("{}: {e}", bin.display())))
    }
}

fn write_pair(path: &Path, dtype: &str, shape: &[usize], payload: &[u8]) -> Result<()> {
    let (json, bin) = volume_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let header = VolumeHeader {
        magic: MAGIC.into(),
        dtype: dtype.into(),
        shape: shape.to_vec(),
        order: ORDER.into(),
    };
    let text = serde_json::to_string(&header).expect("header serialises");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

pub fn store_volume(path: &Path, volume: &Volume) -> Result<()> {
    match volume {
        Volume::F32(t) => {
            let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_pair(path, "f32", t.shape(), &payload)
        }
        Volume::U8(l) => write_pair(path, "u8", l.shape(), l.data()),
    }
}

pub fn store_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, "f32", t.shape(), &payload)
}

pub fn store_labels(path: &Path, l: &LabelVolume) -> Result<()> {
    write_pair(path, "u8", l.shape(), l.data())
}

/// Loads an intensity volume; `u8` payloads are widened.
pub fn load_f32(path: &Path) -> Result<Tensor<f32>> {
    match load_volume(path)? {
        Volume::F32(t) => Ok(t),
        Volume::U8(l) => Tensor::from_vec(l.shape(), l.data().iter().map(|&v| v as f32).collect()),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    match load_volume(path)? {
        Volume::U8(l) => Ok(l),
        Volume::F32(_) => Err(fault(path, VolumeFault::BadDtype("f32 (labels must be u8)".into()))),
    }
}
