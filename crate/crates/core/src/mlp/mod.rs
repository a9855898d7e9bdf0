//! Multilayer-perceptron regression of NSD parameters from coherence features.

mod adam;
mod model;
mod network;
mod search;
mod train;

use thiserror::Error;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use model::{MlpModel, MODEL_FORMAT_VERSION};
pub use network::{
    gradients, mse_loss, relu, sample_dropout_mask, DropoutMask, ForwardPass, MlpParams,
};
pub use search::{random_search, SearchOutcome, SearchSpace, TrialRecord};
pub use train::{fit, fit_arrays, predict_params, TrainingHistory};

use crate::dataset::{Bounds, DatasetError, ParamRanges};
use crate::physics::NsdParams;

/// Number of regression targets: s0, A, σ.
pub const OUTPUT_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty or unpaired batch")]
    EmptyBatch,
    #[error("non-finite gradient entry")]
    NonFiniteGradient,
    #[error("training diverged at epoch {epoch}: validation risk is not finite")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("unsupported model format version {0}")]
    UnknownVersion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

pub const DEFAULT_MAX_EPOCHS: usize = 300;
pub const DEFAULT_PATIENCE: usize = 10;

impl MlpConfig {
    /// Tuned hyperparameters reported for each pulse-count cap.
    pub fn preset(n_bar: u32) -> Option<Self> {
        let (hidden_layers, hidden_dim, learning_rate, batch_size, dropout, weight_decay) =
            match n_bar {
                1 => (1, 2, 1e-2, 16, 0.0, 1e-3),
                8 => (5, 328, 1e-4, 4, 0.0, 1e-4),
                16 => (2, 133, 1e-3, 8, 0.0, 1e-6),
                24 => (3, 224, 1e-4, 2, 0.0, 1e-4),
                32 => (3, 145, 1e-4, 4, 0.0, 1e-5),
                40 => (3, 286, 1e-4, 4, 0.0, 1e-4),
                48 => (3, 38, 1e-3, 8, 0.0, 1e-4),
                _ => return None,
            };
        Some(Self {
            hidden_layers,
            hidden_dim,
            learning_rate,
            batch_size,
            dropout,
            weight_decay,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
        })
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let fail = |m: &str| Err(MlpError::InvalidConfig(m.to_string()));
        if !(1..32).contains(&self.hidden_layers) {
            return fail("hidden layer count must lie in [1, 32)");
        }
        if !(1..1024).contains(&self.hidden_dim) {
            return fail("hidden dimension must lie in [1, 1024)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout probability must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight decay must be nonnegative");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return fail("max_epochs and patience must be positive");
        }
        Ok(())
    }

    /// Layer chain for a given input width.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        dims.push(OUTPUT_DIM);
        dims
    }

    pub fn param_count(&self, input_dim: usize) -> usize {
        self.layer_dims(input_dim)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Min-max scaling of (s0, A, σ) onto `[0, 1]` using the sampling ranges.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamScaler {
    pub s0: Bounds,
    pub amplitude: Bounds,
    pub sigma: Bounds,
}

impl ParamScaler {
    pub fn from_ranges(ranges: &ParamRanges) -> Self {
        Self {
            s0: ranges.s0,
            amplitude: ranges.amplitude,
            sigma: ranges.sigma,
        }
    }

    fn bounds(&self) -> [Bounds; OUTPUT_DIM] {
        [self.s0, self.amplitude, self.sigma]
    }

    pub fn scale(&self, p: &NsdParams) -> [f64; OUTPUT_DIM] {
        let raw = [p.s0, p.amplitude, p.sigma];
        let mut out = [0.0; OUTPUT_DIM];
        for ((o, v), b) in out.iter_mut().zip(raw).zip(self.bounds()) {
            *o = if b.width() > 0.0 {
                (v - b.lo) / b.width()
            } else {
                0.0
            };
        }
        out
    }

    /// Raw `(s0, A, σ)` in MHz, not clamped.
    pub fn unscale(&self, y: &[f64]) -> [f64; OUTPUT_DIM] {
        let mut out = [0.0; OUTPUT_DIM];
        for ((o, v), b) in out.iter_mut().zip(y).zip(self.bounds()) {
            *o = b.lo + v * b.width();
        }
        out
    }
}
