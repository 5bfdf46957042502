//! Volumetric CNN engine for multi-modal segmentation.
//!
//! Each imaging modality can be routed through its own stack of 3D
//! convolutions and merged with the others by elementwise max, elementwise
//! sum, or a learned unit-kernel convolution, at an early, middle or late
//! depth. The single-stream network that sees all modalities concatenated is
//! the baseline.
//!
//! Networks take `(N, 25, 25, 25)` patches and predict `(5, 9, 9, 9)` class
//! logits for the centre of the patch.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and valid 3D convolution.
//! - [`nn`]: layers, losses and regularisation.
//! - [`fusion`]: the three stream-merging functions.
//! - [`model`]: baseline and fused network construction, forward/backward.
//! - [`optim`]: Adam and the epoch loop.
//! - [`data`]: volumes, manifests, splits, patches, tiled prediction,
//!   synthetic phantoms, checkpoints.
//! - [`metrics`]: dice, accuracy and the accuracy-per-parameter ratio.
//! - [`gradcheck`]: finite-difference verification suites.

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use fusion::{FusionFn, FusionPoint, FusionSpec};
pub use labels::LabelVolume;
pub use metrics::EvalReport;
pub use model::{ArchitectureSpec, Mode, Network, Variant};
pub use optim::{AdamState, TrainConfig, TrainingLog};
pub use tensor::{ConvKernel, Element, Tensor};

/// Number of segmentation classes (healthy + four tumour classes).
pub const NUM_CLASSES: usize = 5;
/// Side of the cubic input patch.
pub const INPUT_PATCH: usize = 25;
/// Side of the cubic predicted label patch.
pub const OUTPUT_PATCH: usize = 9;
/// Offset of the label window inside the input window.
pub const PATCH_MARGIN: usize = (INPUT_PATCH - OUTPUT_PATCH) / 2;
