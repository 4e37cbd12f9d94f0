//! The propagation energy and its minimization.
//!
//! For a target frame `t+1` the energy of a labeling `S` is
//! `motion(S) + λ1·appearance(S) + λ2·potts(S)`, where the motion term
//! counts flow-carried votes from frame `t` that disagree with `S`
//! (weighted by patch-histogram similarity), the appearance term is the
//! color-mixture negative log-likelihood, and the Potts term penalizes
//! differing neighbor labels attenuated by color contrast and distance.

mod meanfield;
mod pairwise;
mod propagate;
mod unary;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::CueError;
use crate::imagery::ImageryError;

pub use meanfield::{mean_field_infer, MeanFieldResult};
pub use pairwise::{auto_beta, pairwise_cost, total_energy, Neighborhood, PairwiseGraph};
pub use propagate::{propagate_sequence, PropagatedFrame, PropagationResult};
pub use unary::{appearance_unary, motion_unary, motion_unary_with};

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassMismatch { expected: usize, found: usize },
    #[error("pairwise cost needs two distinct pixels")]
    SamePixel,
    #[error("non-finite unary cost at pixel {pixel}, class {class}")]
    NonFiniteUnary { pixel: usize, class: usize },
    #[error("labeling contains void or out-of-range value at pixel {0}")]
    InvalidLabel(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("need {needed} frames and flows, got {frames} frames and {flows} flows")]
    InsufficientFrames {
        needed: usize,
        frames: usize,
        flows: usize,
    },
    #[error("frame offset {offset}: {source}")]
    AtFrame {
        offset: usize,
        #[source]
        source: Box<CrfError>,
    },
    #[error(transparent)]
    Cue(#[from] CueError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Contrast sensitivity of the Potts term: fixed, or `"auto"` for
/// `1 / (2 · mean squared neighbor color difference)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Beta {
    Fixed(f64),
    Auto(AutoBeta),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoBeta {
    Auto,
}

impl Beta {
    pub const AUTO: Beta = Beta::Auto(AutoBeta::Auto);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfConfig {
    /// weight of the appearance unary
    pub lambda1: f64,
    /// weight of the Potts term
    pub lambda2: f64,
    pub beta: Beta,
    /// sharpness of the histogram-divergence weight
    pub alpha: f64,
    /// square neighborhood radius; 1 gives 8-connectivity
    pub neighborhood_radius: usize,
    pub mf_iterations: usize,
    pub mf_tolerance: f64,
    pub damping: f64,
    /// greedy single-pixel descent sweeps applied to the decoded labeling; 0 disables
    pub polish_sweeps: usize,
    pub depth: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.0,
            beta: Beta::AUTO,
            alpha: 1.0,
            neighborhood_radius: 1,
            mf_iterations: 10,
            mf_tolerance: 1e-3,
            damping: 0.5,
            polish_sweeps: 20,
            depth: 5,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<(), CrfError> {
        let bad = |m: &str| Err(CrfError::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if self.mf_iterations == 0 {
            return bad("mf_iterations must be >= 1");
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping must be in [0, 1)");
        }
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.neighborhood_radius == 0 {
            return bad("neighborhood_radius must be >= 1");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if let Beta::Fixed(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return bad("beta must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Per-pixel, per-class energies, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    width: usize,
    height: usize,
    num_classes: usize,
    costs: Vec<f64>,
}

impl UnaryField {
    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        Self {
            width,
            height,
            num_classes,
            costs: vec![0.0; width * height * num_classes],
        }
    }

    pub fn from_costs(
        width: usize,
        height: usize,
        num_classes: usize,
        costs: Vec<f64>,
    ) -> Result<Self, CrfError> {
        if costs.len() != width * height * num_classes {
            return Err(CrfError::DimensionMismatch(format!(
                "{} costs for {width}x{height}x{num_classes}",
                costs.len()
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            costs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.costs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn get(&self, index: usize, class: usize) -> f64 {
        self.costs[index * self.num_classes + class]
    }

    /// Adds `k` to every cost.
    pub fn shifted(&self, k: f64) -> Self {
        Self {
            costs: self.costs.iter().map(|c| c + k).collect(),
            ..self.clone()
        }
    }

    fn check_like(&self, other: &UnaryField) -> Result<(), CrfError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(CrfError::DimensionMismatch(format!(
                "unary fields {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        if self.num_classes != other.num_classes {
            return Err(CrfError::ClassMismatch {
                expected: self.num_classes,
                found: other.num_classes,
            });
        }
        Ok(())
    }
}

/// Per-pixel label distributions `Q`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    width: usize,
    height: usize,
    num_classes: usize,
    q: Vec<f64>,
}

const MARGINAL_MAGIC: &[u8; 8] = b"PGTQ0001";

impl MarginalField {
    pub fn from_probs(
        width: usize,
        height: usize,
        num_classes: usize,
        q: Vec<f64>,
    ) -> Result<Self, CrfError> {
        if q.len() != width * height * num_classes {
            return Err(CrfError::DimensionMismatch(format!(
                "{} marginals for {width}x{height}x{num_classes}",
                q.len()
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            q,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.q
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.q[index * self.num_classes..(index + 1) * self.num_classes]
    }

    /// Largest deviation of any pixel's total mass from 1.
    pub fn max_mass_error(&self) -> f64 {
        self.q
            .chunks_exact(self.num_classes)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Binary dump: magic `PGTQ0001`, `u32` width, height and class count,
    /// then `width*height*C` little-endian `f32` probabilities, pixel-major
    /// in raster order.
    pub fn write(&self, path: &Path) -> Result<(), CrfError> {
        let mut out = Vec::with_capacity(20 + self.q.len() * 4);
        out.extend_from_slice(MARGINAL_MAGIC);
        for v in [self.width, self.height, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &p in &self.q {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CrfError> {
        let b = std::fs::read(path)?;
        let bad = || CrfError::DimensionMismatch("malformed marginal dump".into());
        if b.len() < 20 || &b[..8] != MARGINAL_MAGIC {
            return Err(bad());
        }
        let word = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]) as usize;
        let (w, h, c) = (word(8), word(12), word(16));
        if b.len() != 20 + w * h * c * 4 {
            return Err(bad());
        }
        let q = b[20..]
            .chunks_exact(4)
            .map(|x| f64::from(f32::from_le_bytes([x[0], x[1], x[2], x[3]])))
            .collect();
        Self::from_probs(w, h, c, q)
    }
}
