//! Label propagation for video segmentation corpora.
//!
//! A single ground-truth labeling per sequence is propagated forward through
//! the next frames by minimizing a CRF energy (flow-carried motion votes,
//! per-class color mixtures and a contrast-sensitive Potts term) with
//! sequential mean-field updates. The propagated "pseudo ground truth"
//! labelings are then grouped into training sets and fed to a small
//! convolutional segmentation model whose SGD update scales the gradient of
//! propagated samples by a trust factor.
//!
//! Modules:
//! - [`imagery`]: raster types and file formats
//! - [`cues`]: patch histograms, histogram similarity, color mixtures
//! - [`crf`]: energy terms, mean-field inference, sequence propagation
//! - [`datasets`]: set construction, label jitter, synthetic corpora, block-matching flow
//! - [`trainer`]: tiny conv model, exact backprop, trust-weighted SGD
//! - [`metrics`]: confusion matrices and IoU
//! - [`cli`]: the `labelprop` command-line workflows

pub mod cli;
pub mod crf;
pub mod cues;
pub mod datasets;
pub mod imagery;
pub mod metrics;
pub mod par;
pub mod trainer;

pub use crf::{CrfConfig, CrfError, MarginalField, UnaryField};
pub use cues::{ClassAppearanceModel, CueConfig, CueError, PatchHistogram};
pub use datasets::{DatasetError, SynthConfig, TrainSet};
pub use imagery::{DatasetManifest, FlowField, Frame, ImageryError, LabelMap, Palette, Tier, VOID};
pub use metrics::{ConfusionMatrix, MetricsError};
pub use par::Exec;
pub use trainer::{TinySegModel, TrainConfig, TrainError, TrainSample};
