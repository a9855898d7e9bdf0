use super::{MlpError, MlpParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: vec![0.0; params.param_count()],
            v: vec![0.0; params.param_count()],
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One update `θ ← θ − η·m̂/(√v̂ + ε)`.
    pub fn step(
        &mut self,
        params: &mut MlpParams,
        grad: &MlpParams,
        learning_rate: f64,
    ) -> Result<(), MlpError> {
        if grad.dims() != params.dims() || self.m.len() != params.param_count() {
            return Err(MlpError::InvalidConfig(
                "gradient and optimizer state do not match the parameter shape".into(),
            ));
        }
        self.t += 1;
        let exp = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(exp);
        let c2 = 1.0 - self.beta2.powi(exp);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((theta, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
