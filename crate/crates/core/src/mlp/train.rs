use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    gradients, mse_loss, sample_dropout_mask, AdamState, MlpConfig, MlpError, MlpModel, MlpParams,
    ParamScaler, OUTPUT_DIM,
};
use crate::dataset::Dataset;
use crate::physics::NsdParams;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct TrainingHistory {
    /// Mean mini-batch objective (data term plus weight decay) during the epoch.
    pub batch_loss: Vec<f64>,
    /// Inference-mode training MSE after the epoch.
    pub train_mse: Vec<f64>,
    /// Inference-mode validation MSE after the epoch.
    pub val_mse: Vec<f64>,
    /// Index of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.val_mse[self.best_epoch]
    }

    pub fn epochs(&self) -> usize {
        self.val_mse.len()
    }
}

fn mean_mse(
    params: &MlpParams,
    xs: &[Vec<f64>],
    ys: &[[f64; OUTPUT_DIM]],
) -> Result<f64, MlpError> {
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        total += mse_loss(&params.predict(x)?, y);
    }
    Ok(total / xs.len() as f64)
}

/// Mini-batch Adam training with early stopping on validation MSE.
///
/// Targets are already scaled. Returns the parameters of the best validation
/// epoch.
pub fn fit_arrays(
    train_x: &[Vec<f64>],
    train_y: &[[f64; OUTPUT_DIM]],
    val_x: &[Vec<f64>],
    val_y: &[[f64; OUTPUT_DIM]],
    config: &MlpConfig,
    seed: u64,
) -> Result<(MlpParams, TrainingHistory), MlpError> {
    config.validate()?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(MlpError::InvalidConfig(
            "inputs and targets differ in length".into(),
        ));
    }
    let input_dim = train_x[0].len();
    if let Some(bad) = train_x.iter().chain(val_x).find(|x| x.len() != input_dim) {
        return Err(MlpError::DimensionMismatch {
            expected: input_dim,
            found: bad.len(),
        });
    }

    let dims = config.layer_dims(input_dim);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(INIT_STREAM);
    let mut params = MlpParams::glorot(&dims, &mut init_rng)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);

    let mut history = TrainingHistory::default();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_x.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train_x[i].as_slice()).collect();
            let ys: Vec<&[f64]> = chunk.iter().map(|&i| train_y[i].as_slice()).collect();
            let masks: Option<Vec<_>> = (config.dropout > 0.0).then(|| {
                chunk
                    .iter()
                    .map(|_| sample_dropout_mask(&dims, config.dropout, &mut rng))
                    .collect()
            });
            let (grad, loss) = gradients(&params, &xs, &ys, config.weight_decay, masks.as_deref())?;
            adam.step(&mut params, &grad, config.learning_rate)?;
            epoch_loss += loss;
            batches += 1;
        }
        let val = mean_mse(&params, val_x, val_y)?;
        if !val.is_finite() {
            return Err(MlpError::Diverged { epoch });
        }
        history.batch_loss.push(epoch_loss / batches as f64);
        history.train_mse.push(mean_mse(&params, train_x, train_y)?);
        history.val_mse.push(val);
        log::debug!("epoch {epoch}: val_mse {val:.6e}");

        if val < best_val {
            best_val = val;
            best.clone_from(&params);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Trains on the dataset's train split with curves up to `n_bar`, selecting
/// the epoch by validation risk.
pub fn fit(
    dataset: &Dataset,
    n_bar: u32,
    config: &MlpConfig,
    seed: u64,
) -> Result<(MlpModel, TrainingHistory), MlpError> {
    let scaler = ParamScaler::from_ranges(&dataset.ranges);
    let prepare = |indices: &[usize]| -> Result<_, MlpError> {
        let (xs, labels) = dataset.features(indices, n_bar)?;
        let ys: Vec<[f64; OUTPUT_DIM]> = labels.iter().map(|p| scaler.scale(p)).collect();
        Ok((xs, ys))
    };
    let (train_x, train_y) = prepare(&dataset.split.train)?;
    let (val_x, val_y) = prepare(&dataset.split.validation)?;
    let (params, history) = fit_arrays(&train_x, &train_y, &val_x, &val_y, config, seed)?;
    Ok((
        MlpModel {
            params,
            config: *config,
            scaler,
            omega_c: dataset.ranges.omega_c,
            n_bar,
            dataset_seed: dataset.seed,
        },
        history,
    ))
}

/// Inference-mode estimate. Outputs are clamped to the physical domain
/// (`s0, A ≥ 0`, `σ > 0`) so the estimate can drive a simulation.
pub fn predict_params(model: &MlpModel, features: &[f64]) -> Result<NsdParams, MlpError> {
    let y = model.params.predict(features)?;
    let [s0, amplitude, sigma] = model.scaler.unscale(&y);
    Ok(NsdParams {
        s0: s0.max(0.0),
        amplitude: amplitude.max(0.0),
        sigma: sigma.max(MIN_SIGMA_MHZ),
        omega_c: model.omega_c,
    })
}

const MIN_SIGMA_MHZ: f64 = 1e-9;

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; 3]>) {
        let mut rng = crate::dataset::sample_rng(seed, 0);
        use rand::Rng;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let ys = xs
            .iter()
            .map(|x| [0.5 * x[0] + 0.2, 0.3 * x[1] - 0.1 * x[2], 0.4 * x[3]])
            .collect();
        (xs, ys)
    }

    fn small_config() -> MlpConfig {
        MlpConfig {
            hidden_layers: 1,
            hidden_dim: 16,
            learning_rate: 1e-3,
            batch_size: 8,
            dropout: 0.0,
            weight_decay: 0.0,
            max_epochs: 60,
            patience: 10,
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let (xs, _) = toy(320, 1);
        let ys = vec![[0.3, 0.6, 0.9]; xs.len()];
        let mut cfg = small_config();
        cfg.max_epochs = 50;
        let (_, h) = fit_arrays(&xs[..256], &ys[..256], &xs[256..], &ys[256..], &cfg, 3).unwrap();
        assert!(h.best_val_mse() < 1e-3, "val mse {:?}", h.val_mse);
    }

    #[test]
    fn same_seed_same_trace() {
        let (xs, ys) = toy(40, 2);
        let cfg = MlpConfig {
            max_epochs: 8,
            dropout: 0.2,
            ..small_config()
        };
        let a = fit_arrays(&xs[..30], &ys[..30], &xs[30..], &ys[30..], &cfg, 5).unwrap();
        let b = fit_arrays(&xs[..30], &ys[..30], &xs[30..], &ys[30..], &cfg, 5).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn best_epoch_is_minimal() {
        let (xs, ys) = toy(80, 4);
        let (_, h) = fit_arrays(
            &xs[..60],
            &ys[..60],
            &xs[60..],
            &ys[60..],
            &small_config(),
            1,
        )
        .unwrap();
        assert!(h.val_mse.iter().all(|&v| h.best_val_mse() <= v));
    }

    #[test]
    fn noiseless_training_loss_descends() {
        let (xs, ys) = toy(64, 6);
        let cfg = MlpConfig {
            max_epochs: 40,
            patience: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            ..small_config()
        };
        let (_, h) = fit_arrays(&xs[..48], &ys[..48], &xs[48..], &ys[48..], &cfg, 8).unwrap();
        for w in h.train_mse[5..].windows(2) {
            assert!(w[1] <= w[0], "training mse rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rejects_ragged_inputs() {
        let (mut xs, ys) = toy(20, 7);
        xs[3].push(1.0);
        assert!(matches!(
            fit_arrays(
                &xs[..10],
                &ys[..10],
                &xs[10..],
                &ys[10..],
                &small_config(),
                0
            ),
            Err(MlpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergence_reported() {
        let (xs, _) = toy(20, 9);
        let ys = vec![[1e300, -1e300, 1e300]; 20];
        let cfg = MlpConfig {
            learning_rate: 1e-2,
            ..small_config()
        };
        let err = fit_arrays(&xs[..10], &ys[..10], &xs[10..], &ys[10..], &cfg, 0).unwrap_err();
        assert!(matches!(
            err,
            MlpError::Diverged { .. } | MlpError::NonFiniteGradient
        ));
    }
}
