//! Random hyperparameter search with validation-risk selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{fit, MlpConfig, MlpError, DEFAULT_PATIENCE};
use crate::dataset::Dataset;

/// Candidate values for each hyperparameter. Integer spaces are half-open
/// `[lo, hi)` and sampled log-uniformly.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SearchSpace {
    pub hidden_layers: (usize, usize),
    pub hidden_dim: (usize, usize),
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// Reduced epoch budget per trial.
    pub trial_epochs: usize,
    pub patience: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            hidden_layers: (1, 32),
            hidden_dim: (1, 1024),
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            batch_sizes: vec![2, 4, 8, 16, 32],
            dropouts: vec![0.0, 0.2, 0.5],
            weight_decays: vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3],
            trial_epochs: 30,
            patience: DEFAULT_PATIENCE,
        }
    }
}

/// Integer drawn log-uniformly from `[lo, hi)`.
fn log_uniform_int<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> usize {
    if hi <= lo + 1 {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let v = (a + (b - a) * rng.random::<f64>()).exp().floor() as usize;
    v.clamp(lo, hi - 1)
}

fn choose<T: Copy, R: Rng + ?Sized>(values: &[T], rng: &mut R) -> T {
    values[rng.random_range(0..values.len())]
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), MlpError> {
        let (l0, l1) = self.hidden_layers;
        let (d0, d1) = self.hidden_dim;
        if l0 == 0 || l1 <= l0 || d0 == 0 || d1 <= d0 {
            return Err(MlpError::InvalidConfig(
                "integer search spaces must be nonempty [lo, hi) with lo >= 1".into(),
            ));
        }
        if self.learning_rates.is_empty()
            || self.batch_sizes.is_empty()
            || self.dropouts.is_empty()
            || self.weight_decays.is_empty()
        {
            return Err(MlpError::InvalidConfig(
                "empty categorical search space".into(),
            ));
        }
        if self.trial_epochs == 0 || self.patience == 0 {
            return Err(MlpError::InvalidConfig(
                "trial_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MlpConfig {
        MlpConfig {
            hidden_layers: log_uniform_int(self.hidden_layers.0, self.hidden_layers.1, rng),
            hidden_dim: log_uniform_int(self.hidden_dim.0, self.hidden_dim.1, rng),
            learning_rate: choose(&self.learning_rates, rng),
            batch_size: choose(&self.batch_sizes, rng),
            dropout: choose(&self.dropouts, rng),
            weight_decay: choose(&self.weight_decays, rng),
            max_epochs: self.trial_epochs,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: MlpConfig,
    pub param_count: usize,
    /// `None` when the trial failed.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SearchOutcome {
    pub best: MlpConfig,
    pub best_val_mse: f64,
    pub trials: Vec<TrialRecord>,
}

/// Trains `trials` sampled configurations and keeps the lowest validation
/// risk; ties go to the smaller network, then the earlier trial.
pub fn random_search(
    dataset: &Dataset,
    n_bar: u32,
    space: &SearchSpace,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome, MlpError> {
    space.validate()?;
    if trials == 0 {
        return Err(MlpError::InvalidConfig("need at least one trial".into()));
    }
    let input_dim = dataset.grid.feature_len(n_bar)?;
    let records: Vec<TrialRecord> = (0..trials)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let config = space.sample(&mut rng);
            let train_seed: u64 = rng.random();
            let val_mse = match fit(dataset, n_bar, &config, train_seed) {
                Ok((_, history)) => Some(history.best_val_mse()),
                Err(e) => {
                    log::warn!("trial {index} failed: {e}");
                    None
                }
            };
            TrialRecord {
                index,
                config,
                param_count: config.param_count(input_dim),
                val_mse,
            }
        })
        .collect();

    let best = records
        .iter()
        .filter_map(|r| r.val_mse.map(|v| (v, r)))
        .min_by(|(va, a), (vb, b)| {
            va.total_cmp(vb)
                .then(a.param_count.cmp(&b.param_count))
                .then(a.index.cmp(&b.index))
        })
        .map(|(v, r)| (v, r.config))
        .ok_or_else(|| MlpError::InvalidConfig("every search trial failed".into()))?;
    Ok(SearchOutcome {
        best: best.1,
        best_val_mse: best.0,
        trials: records,
    })
}
