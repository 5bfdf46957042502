//! Loaded patients, intensity normalisation, patch sampling and tiled
//! whole-volume prediction.

use std::collections::HashSet;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::labels::{ravel, unravel, LabelVolume};
use crate::model::Network;
use crate::nn::argmax_classes;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{INPUT_PATCH, OUTPUT_PATCH, PATCH_MARGIN};

use super::manifest::{Grade, PatientRecord};
use super::volume::{load_f32, load_labels};

const HALF_IN: usize = INPUT_PATCH / 2;
const HALF_OUT: usize = OUTPUT_PATCH / 2;

/// Maps a volume onto `[0, 1]` by its own min and max. A constant volume
/// maps to zeros.
pub fn normalize_intensity(volume: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(i) = volume.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite intensity at flat index {i}")));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in volume.data() {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(Tensor::zeros(volume.shape()));
    }
    Ok(volume.map(|v| (((v as f64 - lo) / range) as f32).clamp(0.0, 1.0)))
}

/// A patient held in memory: normalised modalities `(4, D, H, W)` and labels.
#[derive(Debug, Clone)]
pub struct Patient {
    pub id: String,
    pub grade: Grade,
    pub image: Tensor<f32>,
    pub label: LabelVolume,
}

impl Patient {
    pub fn new(id: String, grade: Grade, modalities: &[Tensor<f32>], label: LabelVolume) -> Result<Self> {
        let shape = label.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Data(format!("patient {id}: label must be 3-d, got {shape:?}")));
        }
        let mut parts = Vec::with_capacity(modalities.len());
        for (m, v) in modalities.iter().enumerate() {
            if v.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "patient {id}: modality {m} has shape {:?}, label has {shape:?}",
                    v.shape()
                )));
            }
            let mut s = vec![1];
            s.extend_from_slice(&shape);
            parts.push(normalize_intensity(v)?.reshape(&s)?);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let image = crate::tensor::concat_channels(&refs)?;
        Ok(Patient { id, grade, image, label })
    }

    pub fn load(record: &PatientRecord) -> Result<Self> {
        let modalities = record
            .modalities
            .iter()
            .map(|p| load_f32(p))
            .collect::<Result<Vec<_>>>()?;
        let label = load_labels(&record.label)?;
        Self::new(record.id.clone(), record.grade, &modalities, label)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.label.shape();
        [s[0], s[1], s[2]]
    }

    pub fn admits_patch(&self) -> bool {
        self.shape().iter().all(|&e| e >= INPUT_PATCH)
    }

    /// Whether `center` puts the whole input window inside the volume.
    pub fn valid_center(&self, center: [usize; 3]) -> bool {
        center
            .iter()
            .zip(self.shape())
            .all(|(&c, e)| c >= HALF_IN && c + HALF_IN < e)
    }

    /// Cuts the input window and the centred label window around `center`.
    pub fn extract(&self, center: [usize; 3]) -> Result<PatchSample> {
        if !self.valid_center(center) {
            return Err(Error::Data(format!(
                "patient {}: centre {center:?} leaves the 25-voxel window outside {:?}",
                self.id,
                self.shape()
            )));
        }
        let [d, h, w] = self.shape();
        let channels = self.image.shape()[0];
        let p = INPUT_PATCH;
        let mut input = Vec::with_capacity(channels * p * p * p);
        let src = self.image.data();
        for c in 0..channels {
            for z in 0..p {
                for y in 0..p {
                    let start = ((c * d + center[0] - HALF_IN + z) * h + center[1] - HALF_IN + y) * w
                        + center[2]
                        - HALF_IN;
                    input.extend_from_slice(&src[start..start + p]);
                }
            }
        }
        let q = OUTPUT_PATCH;
        let mut label = Vec::with_capacity(q * q * q);
        for z in 0..q {
            for y in 0..q {
                let start = ravel(
                    &[d, h, w],
                    &[center[0] - HALF_OUT + z, center[1] - HALF_OUT + y, center[2] - HALF_OUT],
                );
                label.extend_from_slice(&self.label.data()[start..start + q]);
            }
        }
        Ok(PatchSample {
            input: Tensor::from_vec(&[channels, p, p, p], input)?,
            label: LabelVolume::new(&[q, q, q], label)?,
            center,
            patient: self.id.clone(),
            tumor_centered: false,
        })
    }
}

/// A training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `(4, 25, 25, 25)` normalised intensities.
    pub input: Tensor<f32>,
    /// `(9, 9, 9)` class ids centred on `center`.
    pub label: LabelVolume,
    pub center: [usize; 3],
    pub patient: String,
    /// Drawn from the tumour-centred share rather than uniformly.
    pub tumor_centered: bool,
}

/// Stacks samples into a network batch and its label list.
pub fn batch_of(samples: &[PatchSample]) -> Result<(Tensor<f32>, Vec<LabelVolume>)> {
    let refs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    Ok((Tensor::stack(&refs)?, samples.iter().map(|s| s.label.clone()).collect()))
}

/// Per-patient lookup of valid tumour centres.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    patients: &'a [Patient],
    tumor_centers: Vec<Vec<usize>>,
    tumor_fraction: f64,
}

impl<'a> PatchSampler<'a> {
    pub fn new(patients: &'a [Patient], tumor_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tumor_fraction) {
            return Err(Error::Config(format!("tumor fraction {tumor_fraction} outside [0, 1]")));
        }
        if patients.is_empty() {
            return Err(Error::Data("no patients to sample from".into()));
        }
        let mut tumor_centers = Vec::with_capacity(patients.len());
        for p in patients {
            if !p.admits_patch() {
                return Err(Error::Data(format!(
                    "patient {} of shape {:?} is smaller than the 25-voxel window",
                    p.id,
                    p.shape()
                )));
            }
            let shape = p.shape();
            let centers: Vec<usize> = p
                .label
                .data()
                .iter()
                .enumerate()
                .filter(|&(i, &c)| {
                    c > 0 && {
                        let idx = unravel(&shape, i);
                        p.valid_center([idx[0], idx[1], idx[2]])
                    }
                })
                .map(|(i, _)| i)
                .collect();
            if centers.is_empty() && tumor_fraction > 0.0 {
                log::warn!("patient {} has no usable tumour centres; sampling background only", p.id);
            }
            tumor_centers.push(centers);
        }
        Ok(PatchSampler {
            patients,
            tumor_centers,
            tumor_fraction,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<PatchSample> {
        let which = rng.random_range(0..self.patients.len());
        let patient = &self.patients[which];
        let want_tumor = self.tumor_fraction > 0.0 && rng.random_bool(self.tumor_fraction);
        let centers = &self.tumor_centers[which];
        let tumor = want_tumor && !centers.is_empty();
        let center = if tumor {
            let idx = unravel(&patient.shape(), centers[rng.random_range(0..centers.len())]);
            [idx[0], idx[1], idx[2]]
        } else {
            patient.shape().map(|e| rng.random_range(HALF_IN..e - HALF_IN))
        };
        let mut sample = patient.extract(center)?;
        sample.tumor_centered = tumor;
        Ok(sample)
    }

    pub fn sample_many(&self, count: usize, rng: &mut Rng) -> Result<Vec<PatchSample>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// `count` patches: a `tumor_fraction` share centred on tumour voxels, the
/// rest uniform over valid centres.
pub fn sample_patches(
    patients: &[Patient],
    count: usize,
    tumor_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<PatchSample>> {
    PatchSampler::new(patients, tumor_fraction)?.sample_many(count, rng)
}

/// One output tile along an axis: the tile's first output voxel and the
/// first voxel of it that is written (earlier ones are already covered).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisTile {
    pub start: usize,
    pub skip: usize,
}

/// Tiles covering `[8, extent - 8)` with stride 9. When the interior is not a
/// multiple of 9 the last tile is pulled back to end at `extent - 8` and only
/// writes the voxels no earlier tile covered.
pub fn axis_tiles(extent: usize) -> Result<Vec<AxisTile>> {
    if extent < INPUT_PATCH {
        return Err(Error::Data(format!(
            "extent {extent} smaller than the {INPUT_PATCH}-voxel window"
        )));
    }
    let end = extent - PATCH_MARGIN;
    let mut tiles = Vec::new();
    let mut s = PATCH_MARGIN;
    while s + OUTPUT_PATCH <= end {
        tiles.push(AxisTile { start: s, skip: 0 });
        s += OUTPUT_PATCH;
    }
    if s < end {
        let start = end - OUTPUT_PATCH;
        tiles.push(AxisTile { start, skip: s - start });
    }
    Ok(tiles)
}

/// Full-volume segmentation by tiling 25³ windows. Voxels within 8 of any
/// face are labelled 0.
pub fn predict_volume(net: &Network<f32>, image: &Tensor<f32>, batch_size: usize) -> Result<LabelVolume> {
    let shape = image.shape();
    if shape.len() != 4 || shape[0] != net.spec().modalities {
        return Err(Error::Data(format!(
            "expected a ({}, D, H, W) image, got {shape:?}",
            net.spec().modalities
        )));
    }
    let [d, h, w] = [shape[1], shape[2], shape[3]];
    let tiles: Vec<[AxisTile; 3]> = {
        let (td, th, tw) = (axis_tiles(d)?, axis_tiles(h)?, axis_tiles(w)?);
        let mut all = Vec::new();
        for &a in &td {
            for &b in &th {
                for &c in &tw {
                    all.push([a, b, c]);
                }
            }
        }
        all
    };
    let patient = Patient {
        id: "predict".into(),
        grade: Grade::Hgg,
        image: image.clone(),
        label: LabelVolume::zeros(&[d, h, w]),
    };
    let mut out = LabelVolume::zeros(&[d, h, w]);
    let q = OUTPUT_PATCH;
    for chunk in tiles.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|t| patient.extract(t.map(|a| a.start + HALF_OUT)))
            .collect::<Result<Vec<_>>>()?;
        let (batch, _) = batch_of(&samples)?;
        let logits = net.predict(&batch)?;
        for (i, t) in chunk.iter().enumerate() {
            let labels = argmax_classes(&logits.index_leading(i))?;
            for z in t[0].skip..q {
                for y in t[1].skip..q {
                    for x in t[2].skip..q {
                        let c = labels.get(&[z, y, x]);
                        out.set(&[t[0].start + z, t[1].start + y, t[2].start + x], c);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Distinct patient ids present in a sample list.
pub fn patients_in(samples: &[PatchSample]) -> HashSet<&str> {
    samples.iter().map(|s| s.patient.as_str()).collect()
}
