//! Dense ReLU network with an affine output layer.
//!
//! All parameters live in one flat buffer. Layer `ℓ` stores its weight matrix
//! `W[ℓ]` (`inputs × outputs`, row-major, so `W[i][j]` connects input `i` to
//! output `j`) followed by the bias vector `b[ℓ]`.

use rand::Rng;

use super::MlpError;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

impl LayerSpan {
    fn end(&self) -> usize {
        self.bias + self.outputs
    }
}

/// Activations cached by a forward pass: `h[0] = x`, …, `h[L] = ŷ`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least input and output")
    }
}

/// Inverted-dropout multipliers for each hidden layer: `0` or `1/(1 − p)`.
pub type DropoutMask = Vec<Vec<f64>>;

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

impl MlpParams {
    /// All-zero parameters for the layer chain `dims[0] → … → dims[L]`.
    pub fn zeros(dims: &[usize]) -> Result<Self, MlpError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(MlpError::InvalidConfig(format!(
                "layer dimensions must have at least two positive entries (got {dims:?})"
            )));
        }
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        })
    }

    /// Uniform `±√(6/(fan_in + fan_out))` weights and zero biases.
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, MlpError> {
        let mut p = Self::zeros(dims)?;
        for l in 0..p.layer_count() {
            let span = p.span(l);
            let limit = (6.0 / (span.inputs + span.outputs) as f64).sqrt();
            for w in &mut p.data[span.weights..span.bias] {
                *w = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(p)
    }

    /// Builds parameters from explicit per-layer `(weights, bias)` pairs.
    pub fn from_layers(dims: &[usize], layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self, MlpError> {
        let mut p = Self::zeros(dims)?;
        if layers.len() != p.layer_count() {
            return Err(MlpError::InvalidConfig(format!(
                "expected {} layers, got {}",
                p.layer_count(),
                layers.len()
            )));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            let span = p.span(l);
            if w.len() != span.inputs * span.outputs || b.len() != span.outputs {
                return Err(MlpError::InvalidConfig(format!(
                    "layer {} expects {}x{} weights and {} biases",
                    l + 1,
                    span.inputs,
                    span.outputs,
                    span.outputs
                )));
            }
            p.data[span.weights..span.bias].copy_from_slice(w);
            p.data[span.bias..span.end()].copy_from_slice(b);
        }
        Ok(p)
    }

    /// A zero buffer of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated dims")
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn span(&self, layer: usize) -> LayerSpan {
        let offset: usize = self.dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (inputs, outputs) = (self.dims[layer], self.dims[layer + 1]);
        LayerSpan {
            inputs,
            outputs,
            weights: offset,
            bias: offset + inputs * outputs,
        }
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = self.span(layer);
        &self.data[s.weights..s.bias]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.span(layer);
        &self.data[s.bias..s.end()]
    }

    /// Flat-buffer ranges holding weights (not biases).
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.layer_count())
            .map(|l| {
                let s = self.span(l);
                s.weights..s.bias
            })
            .collect()
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        self.weight_ranges()
            .into_iter()
            .flat_map(|r| self.data[r].iter())
            .map(|w| w * w)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), MlpError> {
        if x.len() != self.input_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass; `mask` enables training-mode dropout on hidden layers.
    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<ForwardPass, MlpError> {
        self.check_input(x)?;
        let last = self.layer_count() - 1;
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x.to_vec());
        for l in 0..self.layer_count() {
            let s = self.span(l);
            let w = &self.data[s.weights..s.bias];
            let mut out = self.data[s.bias..s.end()].to_vec();
            let h = &activations[l];
            for (i, &hi) in h.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                let row = &w[i * s.outputs..(i + 1) * s.outputs];
                for (o, &wij) in out.iter_mut().zip(row) {
                    *o += hi * wij;
                }
            }
            if l < last {
                for o in &mut out {
                    *o = relu(*o);
                }
                if let Some(m) = mask {
                    for (o, &k) in out.iter_mut().zip(&m[l]) {
                        *o *= k;
                    }
                }
            }
            activations.push(out);
        }
        Ok(ForwardPass { activations })
    }

    /// Inference-mode output.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        Ok(self
            .forward(x, None)?
            .activations
            .pop()
            .expect("output layer"))
    }

    /// Accumulates `scale · ∂L/∂θ` for `L = mse_loss(ŷ, y)` into `grad`.
    pub(crate) fn backward_into(
        &self,
        pass: &ForwardPass,
        y: &[f64],
        mask: Option<&DropoutMask>,
        scale: f64,
        grad: &mut MlpParams,
    ) {
        let out = pass.output();
        let q = out.len() as f64;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(y)
            .map(|(o, t)| scale * 2.0 * (o - t) / q)
            .collect();
        for l in (0..self.layer_count()).rev() {
            let s = self.span(l);
            let h = &pass.activations[l];
            let w = &self.data[s.weights..s.bias];
            let g = &mut grad.data;
            for (gb, d) in g[s.bias..s.end()].iter_mut().zip(&delta) {
                *gb += d;
            }
            for (i, &hi) in h.iter().enumerate() {
                if hi == 0.0 {
                    continue;
                }
                let row = &mut g[s.weights + i * s.outputs..s.weights + (i + 1) * s.outputs];
                for (gw, d) in row.iter_mut().zip(&delta) {
                    *gw += hi * d;
                }
            }
            if l == 0 {
                break;
            }
            // Propagate through W[ℓ], then through the dropout mask and ReLU of layer ℓ − 1.
            let mut prev = vec![0.0; s.inputs];
            for (i, p) in prev.iter_mut().enumerate() {
                if h[i] <= 0.0 {
                    continue;
                }
                let row = &w[i * s.outputs..(i + 1) * s.outputs];
                let mut acc: f64 = row.iter().zip(&delta).map(|(a, b)| a * b).sum();
                if let Some(m) = mask {
                    acc *= m[l - 1][i];
                }
                *p = acc;
            }
            delta = prev;
        }
    }
}

/// `(1/q) Σ (ŷᵢ − yᵢ)²`.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(prediction.len(), target.len());
    let q = prediction.len() as f64;
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / q
}

/// Random inverted-dropout masks for every hidden layer.
pub fn sample_dropout_mask<R: Rng + ?Sized>(dims: &[usize], p: f64, rng: &mut R) -> DropoutMask {
    let keep = 1.0 / (1.0 - p);
    dims[1..dims.len() - 1]
        .iter()
        .map(|&d| {
            (0..d)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        })
        .collect()
}

/// Gradient of the mean batch loss plus `weight_decay·‖W‖²`, and that loss.
pub fn gradients(
    params: &MlpParams,
    inputs: &[&[f64]],
    targets: &[&[f64]],
    weight_decay: f64,
    masks: Option<&[DropoutMask]>,
) -> Result<(MlpParams, f64), MlpError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(MlpError::EmptyBatch);
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (b, (x, y)) in inputs.iter().zip(targets).enumerate() {
        if y.len() != params.output_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: params.output_dim(),
                found: y.len(),
            });
        }
        let mask = masks.map(|m| &m[b]);
        let pass = params.forward(x, mask)?;
        loss += scale * mse_loss(pass.output(), y);
        params.backward_into(&pass, y, mask, scale, &mut grad);
    }
    if weight_decay != 0.0 {
        for r in params.weight_ranges() {
            for (g, w) in grad.data[r.clone()].iter_mut().zip(&params.data[r]) {
                *g += 2.0 * weight_decay * w;
            }
        }
        loss += weight_decay * params.weight_norm_sq();
    }
    if !grad.is_finite() {
        return Err(MlpError::NonFiniteGradient);
    }
    Ok((grad, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[4, 5, 3]).unwrap();
        assert_eq!(p.predict(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_hidden_layer() {
        let p = MlpParams::from_layers(
            &[2, 2, 1],
            &[
                (vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -10.0]),
                (vec![1.0, 1.0], vec![0.0]),
            ],
        )
        .unwrap();
        let pass = p.forward(&[1.0, 1.0], None).unwrap();
        assert_eq!(pass.activations[1], vec![4.5, 0.0]);
        assert_eq!(pass.output(), &[4.5]);
    }

    #[test]
    fn output_layer_is_affine() {
        let p = MlpParams::from_layers(
            &[1, 1, 1],
            &[(vec![1.0], vec![0.0]), (vec![-1.0], vec![-2.0])],
        )
        .unwrap();
        assert_eq!(p.predict(&[3.0]).unwrap(), vec![-5.0]);
    }

    #[test]
    fn relu_elementwise() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_relative_eq!(mse_loss(&[1.0, 0.0, 0.0], &[0.0; 3]), 1.0 / 3.0);
        assert_relative_eq!(mse_loss(&[1.0, 2.0, 3.0], &[0.0; 3]), 14.0 / 3.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = MlpParams::zeros(&[4, 5, 3]).unwrap();
        assert!(matches!(
            p.predict(&[1.0, 2.0]),
            Err(MlpError::DimensionMismatch {
                expected: 4,
                found: 2
            })
        ));
    }

    #[test]
    fn zero_network_zero_target_has_zero_output_bias_gradient() {
        let p = MlpParams::zeros(&[3, 4, 3]).unwrap();
        let x = [0.3, -1.0, 2.0];
        let y = [0.0; 3];
        let (g, loss) = gradients(&p, &[&x], &[&y], 0.0, None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.bias(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_decay_alone() {
        let mut rng = crate::dataset::sample_rng(9, 0);
        let p = MlpParams::glorot(&[3, 4, 3], &mut rng).unwrap();
        let x = [0.1, 0.2, 0.3];
        // Zero data gradient: target equals the current prediction.
        let y = p.predict(&x).unwrap();
        let (g, _) = gradients(&p, &[&x], &[&y], 1e-3, None).unwrap();
        for l in 0..p.layer_count() {
            for (gw, w) in g.weights(l).iter().zip(p.weights(l)) {
                assert_relative_eq!(*gw, 2e-3 * w, max_relative = 1e-12);
            }
            assert!(g.bias(l).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let p = MlpParams::zeros(&[3, 4, 3]).unwrap();
        assert!(matches!(
            gradients(&p, &[], &[], 0.0, None),
            Err(MlpError::EmptyBatch)
        ));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = crate::dataset::sample_rng(1, 7);
        let dims = [1, 4, 1];
        let trials = 100_000;
        let mut acc = [0.0; 4];
        for _ in 0..trials {
            let m = sample_dropout_mask(&dims, 0.5, &mut rng);
            for (a, k) in acc.iter_mut().zip(&m[0]) {
                *a += k;
            }
        }
        for a in acc {
            assert!((a / trials as f64 - 1.0).abs() < 0.01);
        }
    }
}
