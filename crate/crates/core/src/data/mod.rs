//! Volumes, manifests, splits, patches, tiled prediction, synthetic
//! phantoms and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod patches;
pub mod synth;
pub mod volume;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint, Checkpoint};
pub use manifest::{split_patients, DatasetManifest, Grade, PatientRecord, Split, MODALITIES};
pub use patches::{
    axis_tiles, batch_of, normalize_intensity, predict_volume, sample_patches, Patient, PatchSample,
    PatchSampler,
};
pub use synth::{generate_synthetic, SynthConfig};
pub use volume::{load_f32, load_labels, load_volume, store_f32, store_labels, store_volume, Volume};
