//! Network checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"MFCKPT01"            8 bytes
//! header length          u32 little endian
//! header                 JSON: {"spec": ArchitectureSpec, "tensors": [TensorEntry, ...]}
//! payload                f32 little endian, tensors back to back
//! ```
//!
//! `TensorEntry` is `{name, shape, dtype: "f32", offset, len}` with `offset`
//! and `len` in bytes relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Network};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Serialises a network's spec and every registry tensor (as f32).
pub fn encode<T: Element>(net: &Network<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for p in net.params().iter() {
        let offset = payload.len();
        for v in p.value.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            len: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        spec: net.spec().clone(),
        tensors,
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Corrupt(format!(
            "header claims {hlen} bytes, only {} present",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    let payload = &body[hlen..];
    let mut expected_end = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Corrupt(format!("tensor {}: dtype {:?}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.len != 4 * n {
            return Err(Error::Corrupt(format!(
                "tensor {}: {} bytes recorded for shape {:?} ({} expected)",
                e.name,
                e.len,
                e.shape,
                4 * n
            )));
        }
        if e.offset != expected_end || e.offset + e.len > payload.len() {
            return Err(Error::Corrupt(format!(
                "tensor {}: bytes {}..{} outside payload of {}",
                e.name,
                e.offset,
                e.offset + e.len,
                payload.len()
            )));
        }
        expected_end = e.offset + e.len;
        let data = payload[e.offset..expected_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)
            .map_err(|err| Error::Corrupt(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
    }
    if expected_end != payload.len() {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes, tensors account for {expected_end}",
            payload.len()
        )));
    }
    Ok(Checkpoint {
        spec: header.spec,
        tensors,
    })
}

impl Checkpoint {
    /// Copies the stored tensors into `net`, which must have the same
    /// parameter names and shapes in the same order.
    pub fn restore_into<T: Element>(&self, net: &mut Network<T>) -> Result<()> {
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let Some((stored, t)) = self.tensors.get(i) else {
                return Err(Error::Corrupt(format!("layer {name}: missing from checkpoint")));
            };
            let want = net.params().iter().nth(i).unwrap().value.shape().to_vec();
            if stored != name {
                return Err(Error::Corrupt(format!(
                    "layer {name}: checkpoint holds {stored} at this position"
                )));
            }
            if t.shape() != want.as_slice() {
                return Err(Error::Corrupt(format!(
                    "layer {name}: checkpoint shape {:?}, network expects {want:?}",
                    t.shape()
                )));
            }
        }
        if let Some((extra, _)) = self.tensors.get(names.len()) {
            return Err(Error::Corrupt(format!("layer {extra}: not present in the network")));
        }
        for (p, (_, t)) in net.params_mut().iter_mut().zip(&self.tensors) {
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn into_network(self) -> Result<Network<f32>> {
        let mut net = Network::structure(&self.spec)?;
        self.restore_into(&mut net)?;
        Ok(net)
    }
}

pub fn save_checkpoint<T: Element>(net: &Network<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint; the stored spec decides the architecture.
pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    read_checkpoint(path)?.into_network()
}

/// Loads a checkpoint into a network built from `spec`, reporting the first
/// layer that disagrees.
pub fn load_checkpoint_as(path: &Path, spec: &ArchitectureSpec) -> Result<Network<f32>> {
    let ckpt = read_checkpoint(path)?;
    let mut net = Network::structure(spec)?;
    ckpt.restore_into(&mut net)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionFn, FusionPoint, FusionSpec};
    use crate::model::Variant;

    fn net() -> Network<f32> {
        let spec = ArchitectureSpec::tiny(Variant::Fused(FusionSpec::new(FusionPoint::Middle, FusionFn::Conv)));
        Network::build_seeded(&spec, 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let back = decode(&encode(&n)).unwrap().into_network().unwrap();
        for (a, b) in n.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.spec(), n.spec());
    }

    #[test]
    fn tampered_length_is_corruption() {
        let mut bytes = encode(&net());
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = encode(&net());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(decode(b"nonsense"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn mismatched_spec_names_first_layer() {
        let ckpt = decode(&encode(&net())).unwrap();
        let mut other = Network::<f32>::structure(&ckpt.spec.with_variant(Variant::Fused(FusionSpec::new(
            FusionPoint::Middle,
            FusionFn::Sum,
        ))))
        .unwrap();
        let err = ckpt.restore_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("layer conv3-1/w"), "{err}");
        let mut wider = ckpt.spec.clone();
        wider.block_channels[0] = 3;
        let mut other = Network::<f32>::structure(&wider).unwrap();
        let err = ckpt.restore_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("layer stream0/conv1-1/w"), "{err}");
    }
}
