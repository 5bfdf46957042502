//! Deterministic multi-modal phantoms.
//!
//! Each patient has an ellipsoidal lesion made of four concentric shells
//! (class 4 innermost, class 1 outermost) on healthy background. Every class
//! has a fixed mean intensity per modality, chosen so that no single modality
//! tells all five classes apart but the four together do. Each modality then
//! gets its own contrast, offset, smooth bias field and Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;
use crate::INPUT_PATCH;

use super::manifest::{DatasetManifest, Grade, PatientRecord, MODALITIES};
use super::volume::{store_f32, store_labels};

/// Mean tissue intensity, `[modality][class]`.
pub const CLASS_MEANS: [[f64; 5]; 4] = [
    [0.6, 0.3, 0.6, 0.3, 0.6],
    [0.4, 0.4, 0.4, 0.9, 0.9],
    [0.5, 0.9, 0.9, 0.5, 0.5],
    [0.3, 0.3, 0.8, 0.8, 0.8],
];

/// `(scale, offset)` applied to each modality's unit-range signal.
const CONTRAST: [(f64, f64); 4] = [(800.0, 100.0), (1200.0, 50.0), (600.0, 200.0), (1000.0, 0.0)];

/// Outer normalised radius of each class shell, innermost class first.
const SHELLS: [(f64, u8); 4] = [(0.35, 4), (0.55, 3), (0.75, 2), (1.0, 1)];

const NOISE_SIGMA: f64 = 0.05;
const BIAS_AMPLITUDE: f64 = 0.05;
/// Lesions with semi-axis product below this are low grade.
pub const LGG_VOLUME_THRESHOLD: f64 = 850.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patients: usize,
    pub shape: [usize; 3],
    pub seed: u64,
}

/// Geometry drawn for one phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

impl Lesion {
    pub fn semi_axis_product(&self) -> f64 {
        self.radii.iter().product()
    }

    pub fn grade(&self) -> Grade {
        if self.semi_axis_product() < LGG_VOLUME_THRESHOLD {
            Grade::Lgg
        } else {
            Grade::Hgg
        }
    }

    pub fn class_at(&self, z: usize, y: usize, x: usize) -> u8 {
        let r2: f64 = [z, y, x]
            .iter()
            .zip(self.center)
            .zip(self.radii)
            .map(|((&p, c), a)| {
                let d = (p as f64 - c as f64) / a;
                d * d
            })
            .sum();
        let r = r2.sqrt();
        SHELLS.iter().find(|(outer, _)| r <= *outer).map_or(0, |&(_, c)| c)
    }
}

fn draw_lesion(rng: &mut Rng, patient: usize, shape: [usize; 3]) -> Lesion {
    let low_grade = match patient {
        0 => true,
        1 => false,
        _ => rng.random_bool(0.25),
    };
    let (lo, hi): (f64, f64) = if low_grade { (6.0, 9.0) } else { (10.0, 14.0) };
    let min_extent = *shape.iter().min().unwrap() as f64;
    let cap = (min_extent / 2.0 - 2.0).max(2.0);
    let radii = [0; 3].map(|_| rng.random_range(lo..hi).min(cap));
    let center = [0, 1, 2].map(|a| {
        let reach = radii[a].ceil() as usize + 1;
        let e = shape[a];
        if 2 * reach < e {
            rng.random_range(reach..e - reach)
        } else {
            e / 2
        }
    });
    Lesion { center, radii }
}

/// Low-frequency multiplicative-style field in `[-A, A]`.
fn bias_field(rng: &mut Rng, shape: [usize; 3]) -> impl Fn(usize, usize, usize) -> f64 {
    let phase = [0; 3].map(|_| rng.random_range(0.0..2.0 * PI));
    let freq = [0; 3].map(|_| rng.random_range(0.5..1.5));
    move |z, y, x| {
        let t = [z, y, x];
        let s: f64 = (0..3)
            .map(|a| (2.0 * PI * freq[a] * t[a] as f64 / shape[a] as f64 + phase[a]).sin())
            .sum();
        BIAS_AMPLITUDE * s / 3.0
    }
}

/// One phantom: four raw modality volumes, the label map and the lesion.
pub fn phantom(seed: u64, patient: usize, shape: [usize; 3]) -> (Vec<Tensor<f32>>, LabelVolume, Lesion) {
    let mut rng = rng::stream(seed, Stream::Synth, &[patient as u64]);
    let lesion = draw_lesion(&mut rng, patient, shape);
    let [d, h, w] = shape;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.push(lesion.class_at(z, y, x));
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut volumes = Vec::with_capacity(4);
    for (m, means) in CLASS_MEANS.iter().enumerate() {
        let field = bias_field(&mut rng, shape);
        let (scale, offset) = CONTRAST[m];
        let mut i = 0;
        let vol = Tensor::from_fn(&shape, |_| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            let signal = means[labels[i] as usize] + field(z, y, x) + noise.sample(&mut rng);
            i += 1;
            (scale * signal + offset) as f32
        });
        volumes.push(vol);
    }
    let label = LabelVolume::new(&shape, labels).expect("shell classes are in range");
    (volumes, label, lesion)
}

/// Writes `patients` phantoms under `dir` plus `dir/manifest.jsonl`.
pub fn generate_synthetic(dir: &Path, config: &SynthConfig) -> Result<DatasetManifest> {
    if config.shape.iter().any(|&e| e < INPUT_PATCH) {
        return Err(Error::Config(format!(
            "synthetic shape {:?} must be at least {INPUT_PATCH} on every axis",
            config.shape
        )));
    }
    if config.patients == 0 {
        return Err(Error::Config("need at least one patient".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(config.patients);
    for p in 0..config.patients {
        let (volumes, label, lesion) = phantom(config.seed, p, config.shape);
        let id = format!("synth{p:03}");
        let pdir = dir.join(&id);
        for (m, v) in MODALITIES.iter().zip(&volumes) {
            store_f32(&pdir.join(m), v)?;
        }
        store_labels(&pdir.join("label"), &label)?;
        records.push(PatientRecord::in_dir(&id, lesion.grade(), &pdir));
    }
    let manifest = DatasetManifest::new(records)?;
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
