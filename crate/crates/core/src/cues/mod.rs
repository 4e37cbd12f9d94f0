//! Low-level evidence for the propagation energy: patch color histograms
//! compared by symmetric KL divergence, and per-class Gaussian mixtures over
//! normalized RGB.

mod gmm;
mod histogram;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gmm::{
    fit_appearance, fit_mixture, neg_log_likelihood, ClassAppearanceModel, GaussianComponent,
    MixtureFit,
};
pub use histogram::{motion_weight, patch_histogram, sym_kl, PatchHistogram};

/// Cap on any single unary cost.
pub const U_MAX: f64 = 50.0;

#[derive(Debug, Error)]
pub enum CueError {
    #[error("histogram bin counts differ: {0} vs {1}")]
    BinMismatch(usize, usize),
    #[error("need at least 2 bins per channel, got {0}")]
    TooFewBins(usize),
    #[error("patch center ({x}, {y}) outside {width}x{height} image")]
    CenterOutside {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("frame is {0}x{1} but labels are {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("components per class must be >= 1")]
    NoComponents,
    #[error("EM log-likelihood decreased from {before} to {after} at iteration {iteration}")]
    LikelihoodDecreased {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("appearance sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tunables for the histogram and mixture cues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueConfig {
    pub patch_radius: usize,
    pub bins: usize,
    pub smoothing: f64,
    pub components_per_class: usize,
    pub gmm_seed: u64,
    pub variance_floor: f64,
    pub min_class_pixels: usize,
    pub max_em_iterations: usize,
    pub em_tolerance: f64,
}

impl Default for CueConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            bins: 8,
            smoothing: 1e-3,
            components_per_class: 5,
            gmm_seed: 0,
            variance_floor: 1e-4,
            min_class_pixels: 10,
            max_em_iterations: 100,
            em_tolerance: 1e-6,
        }
    }
}
