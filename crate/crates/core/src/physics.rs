//! Coherence decay of a qubit under Carr-Purcell dynamical decoupling.
//!
//! Frequencies are angular (rad/µs) and times are in µs. NSD parameters are
//! quoted as ordinary frequencies in MHz and converted with a factor 2π when
//! the spectrum is evaluated.
//!
//! The decoherence exponent is split into two parts:
//!
//! - the flat offset contributes exactly `2π·s0·T/2`, because the filter
//!   weight `F(ω)/ω²` integrates to `πT/2` over the positive axis;
//! - the Gaussian peak is integrated numerically over `ω_c ± 10·(2πσ)` with a
//!   composite trapezoid rule and a step-halving convergence check.

use std::f64::consts::{FRAC_PI_2, PI, TAU as TWO_PI};

use thiserror::Error;

/// Gyromagnetic ratio of ¹³C nuclear spins, MHz/G.
pub const GAMMA_C13_MHZ_PER_G: f64 = 1.0705e-3;

/// Bias field of the reference NV setup, G.
pub const BIAS_FIELD_G: f64 = 403.2;

/// Half-width of the Gaussian integration window, in units of the angular width.
const GAUSSIAN_SPAN: f64 = 10.0;

/// Grid points per resolved feature (NSD width or filter lobe).
const POINTS_PER_FEATURE: f64 = 20.0;

/// Relative tolerance for the step-halving check on χ.
pub const QUADRATURE_RTOL: f64 = 1e-6;

/// Below this distance `|ωτ − kπ|` (k odd) the filter uses its series expansion.
const RESONANCE_SERIES_BAND: f64 = 1e-6;

/// Below this distance the filter switches to the reduced `sin²(Nδ)/sin²(δ)` form.
const RESONANCE_REDUCED_BAND: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid NSD parameters: {0}")]
    InvalidParams(String),
    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),
    #[error("quadrature did not converge (relative step-halving change {rel_change:e})")]
    QuadratureNotConverged { rel_change: f64 },
}

/// Angular Larmor frequency `2π·γ·B` in rad/µs, for γ in MHz/G and B in G.
pub fn larmor_omega(gamma_mhz_per_gauss: f64, field_gauss: f64) -> f64 {
    TWO_PI * gamma_mhz_per_gauss * field_gauss
}

/// Gaussian noise spectral density on a flat offset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NsdParams {
    /// Offset, MHz.
    pub s0: f64,
    /// Peak amplitude above the offset, MHz.
    pub amplitude: f64,
    /// Width, MHz.
    pub sigma: f64,
    /// Center, rad/µs.
    pub omega_c: f64,
}

impl NsdParams {
    pub fn new(s0: f64, amplitude: f64, sigma: f64, omega_c: f64) -> Result<Self, PhysicsError> {
        let p = Self {
            s0,
            amplitude,
            sigma,
            omega_c,
        };
        p.validate()?;
        Ok(p)
    }

    /// Center placed at the ¹³C Larmor frequency for the given γ (MHz/G) and B (G).
    pub fn at_larmor(
        s0: f64,
        amplitude: f64,
        sigma: f64,
        gamma_mhz_per_gauss: f64,
        field_gauss: f64,
    ) -> Result<Self, PhysicsError> {
        Self::new(
            s0,
            amplitude,
            sigma,
            larmor_omega(gamma_mhz_per_gauss, field_gauss),
        )
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let ok = self.s0.is_finite()
            && self.amplitude.is_finite()
            && self.sigma.is_finite()
            && self.omega_c.is_finite()
            && self.s0 >= 0.0
            && self.amplitude >= 0.0
            && self.sigma > 0.0
            && self.omega_c > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PhysicsError::InvalidParams(format!(
                "need s0 >= 0, A >= 0, sigma > 0, omega_c > 0 (got {self:?})"
            )))
        }
    }

    /// Offset in angular units, rad/µs.
    pub fn offset_angular(&self) -> f64 {
        TWO_PI * self.s0
    }

    /// Width in angular units, rad/µs.
    pub fn sigma_angular(&self) -> f64 {
        TWO_PI * self.sigma
    }

    /// Gaussian peak alone (no offset), rad/µs.
    pub fn gaussian_part(&self, omega: f64) -> f64 {
        let w = self.sigma_angular();
        let d = omega - self.omega_c;
        TWO_PI * self.amplitude * (-(d * d) / (2.0 * w * w)).exp()
    }

    /// Spectral density at `omega`, rad/µs.
    pub fn value(&self, omega: f64) -> f64 {
        self.offset_angular() + self.gaussian_part(omega)
    }
}

pub fn nsd_value(params: &NsdParams, omega: f64) -> f64 {
    params.value(omega)
}

/// Carr-Purcell train of `n_pulses` instantaneous π pulses spaced by `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSequence {
    n_pulses: u32,
    tau: f64,
}

impl PulseSequence {
    pub fn new(n_pulses: u32, tau: f64) -> Result<Self, PhysicsError> {
        if n_pulses == 0 {
            return Err(PhysicsError::InvalidSequence(
                "n_pulses must be >= 1".into(),
            ));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(PhysicsError::InvalidSequence(format!(
                "tau must be positive and finite (got {tau})"
            )));
        }
        Ok(Self { n_pulses, tau })
    }

    pub fn n_pulses(&self) -> u32 {
        self.n_pulses
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Total evolution time `N·τ`.
    pub fn total_time(&self) -> f64 {
        f64::from(self.n_pulses) * self.tau
    }

    /// Pulse times `τ/2, 3τ/2, …, (N − 1/2)τ`.
    pub fn switch_times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_pulses).map(move |j| (f64::from(j) + 0.5) * self.tau)
    }

    /// Sign of the toggling frame at time `t`.
    ///
    /// # Panics
    /// If `t` lies outside `[0, N·τ]`.
    pub fn modulation(&self, t: f64) -> i8 {
        assert!(
            (0.0..=self.total_time()).contains(&t),
            "modulation time {t} outside [0, {}]",
            self.total_time()
        );
        // Number of switch times strictly before t; the sign flips on [t_j, ...).
        let flips = ((t / self.tau + 0.5).floor() as i64).clamp(0, i64::from(self.n_pulses));
        if flips % 2 == 0 {
            1
        } else {
            -1
        }
    }

    /// Filter function `F(ω, τ, N)`, finite at every `ω > 0`.
    pub fn filter(&self, omega: f64) -> f64 {
        let n = f64::from(self.n_pulses);
        let phase = omega * self.tau;
        let x = 0.5 * phase;
        let envelope = 8.0 * (0.25 * phase).sin().powi(4);

        // Distance to the nearest odd multiple of π/2 in x.
        let k = (x / FRAC_PI_2).round();
        let k_odd = if k as i64 % 2 == 0 {
            if x / FRAC_PI_2 > k {
                k + 1.0
            } else {
                k - 1.0
            }
        } else {
            k
        };
        let delta = x - k_odd * FRAC_PI_2;

        if (2.0 * delta).abs() < RESONANCE_SERIES_BAND {
            // sin²(Nδ)/sin²(δ) = N²(1 − (N² − 1)δ²/3 + O(δ⁴))
            let ratio = n * n * (1.0 - (n * n - 1.0) * delta * delta / 3.0);
            envelope * ratio
        } else if (2.0 * delta).abs() < RESONANCE_REDUCED_BAND {
            // Around x = kπ/2 (k odd), both parities reduce to sin²(Nδ)/sin²(δ).
            let ratio = ((n * delta).sin() / delta.sin()).powi(2);
            envelope * ratio
        } else {
            let nx = n * x;
            let numerator = if self.n_pulses.is_multiple_of(2) {
                nx.sin().powi(2)
            } else {
                nx.cos().powi(2)
            };
            envelope * numerator / x.cos().powi(2)
        }
    }
}

pub fn modulation_function(seq: &PulseSequence, t: f64) -> i8 {
    seq.modulation(t)
}

pub fn filter_function(seq: &PulseSequence, omega: f64) -> f64 {
    seq.filter(omega)
}

struct Quadrature {
    white: f64,
    coarse: f64,
    fine: f64,
}

impl Quadrature {
    fn chi(&self) -> f64 {
        self.white + self.fine / PI
    }

    fn rel_change(&self) -> f64 {
        ((self.fine - self.coarse) / PI).abs() / self.chi().abs().max(f64::MIN_POSITIVE)
    }
}

fn integrate(params: &NsdParams, seq: &PulseSequence) -> Result<Quadrature, PhysicsError> {
    params.validate()?;
    let white = 0.5 * params.offset_angular() * seq.total_time();
    if params.amplitude == 0.0 {
        return Ok(Quadrature {
            white,
            coarse: 0.0,
            fine: 0.0,
        });
    }

    let width = params.sigma_angular();
    let lo = (params.omega_c - GAUSSIAN_SPAN * width).max(0.0);
    let hi = params.omega_c + GAUSSIAN_SPAN * width;
    let lobe = TWO_PI / seq.total_time();
    let step = width.min(lobe) / POINTS_PER_FEATURE;
    let coarse_intervals = ((hi - lo) / step).ceil().max(1.0) as usize;

    let integrand = |omega: f64| {
        if omega <= 0.0 {
            0.0
        } else {
            seq.filter(omega) * params.gaussian_part(omega) / (omega * omega)
        }
    };

    // One pass over the fine grid yields both the fine and the coarse trapezoid sums.
    let fine_intervals = 2 * coarse_intervals;
    let h_fine = (hi - lo) / fine_intervals as f64;
    let mut even_sum = 0.0;
    let mut odd_sum = 0.0;
    for i in 1..fine_intervals {
        let v = integrand(lo + i as f64 * h_fine);
        if i % 2 == 0 {
            even_sum += v;
        } else {
            odd_sum += v;
        }
    }
    let ends = 0.5 * (integrand(lo) + integrand(hi));
    Ok(Quadrature {
        white,
        coarse: 2.0 * h_fine * (ends + even_sum),
        fine: h_fine * (ends + even_sum + odd_sum),
    })
}

/// Decoherence exponent `χ = (1/π) ∫₀^∞ F(ω) S(ω) / ω² dω`.
pub fn decoherence_exponent(params: &NsdParams, seq: &PulseSequence) -> Result<f64, PhysicsError> {
    let q = integrate(params, seq)?;
    let chi = q.chi();
    let rel_change = q.rel_change();
    if !(rel_change.is_finite() && chi.is_finite()) || rel_change > QUADRATURE_RTOL {
        return Err(PhysicsError::QuadratureNotConverged { rel_change });
    }
    Ok(chi)
}

/// Relative change of χ when the integration step is halved.
pub fn quadrature_step_change(
    params: &NsdParams,
    seq: &PulseSequence,
) -> Result<f64, PhysicsError> {
    integrate(params, seq).map(|q| q.rel_change())
}

/// Coherence `C = exp(−χ)`.
pub fn coherence(params: &NsdParams, seq: &PulseSequence) -> Result<f64, PhysicsError> {
    decoherence_exponent(params, seq).map(|chi| (-chi).exp())
}

/// Population left in the initial state, `P = (1 + C)/2`.
pub fn survival_probability(c: f64) -> f64 {
    debug_assert!((-1.0..=1.0).contains(&c), "coherence {c} outside [-1, 1]");
    0.5 * (1.0 + c)
}

/// A sampled coherence curve `C(τ, N)` at fixed pulse count.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceCurve {
    pub n_pulses: u32,
    pub tau_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl CoherenceCurve {
    /// Noiseless curve over `tau_grid`, which must be strictly increasing.
    pub fn simulate(
        params: &NsdParams,
        n_pulses: u32,
        tau_grid: &[f64],
    ) -> Result<Self, PhysicsError> {
        if tau_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PhysicsError::InvalidSequence(
                "tau grid must be strictly increasing".into(),
            ));
        }
        let values = tau_grid
            .iter()
            .map(|&tau| coherence(params, &PulseSequence::new(n_pulses, tau)?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            n_pulses,
            tau_grid: tau_grid.to_vec(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn omega_c() -> f64 {
        larmor_omega(GAMMA_C13_MHZ_PER_G, BIAS_FIELD_G)
    }

    #[test]
    fn nsd_peak_and_tail() {
        let p = NsdParams::new(0.0, 1.0, 5e-3, omega_c()).unwrap();
        assert_relative_eq!(p.value(omega_c()), TWO_PI, max_relative = 1e-15);

        let p = NsdParams::new(2e-3, 0.5, 5e-3, omega_c()).unwrap();
        assert_relative_eq!(p.value(1e3), TWO_PI * 2e-3, max_relative = 1e-15);
    }

    #[test]
    fn nsd_one_sigma_point() {
        let p = NsdParams::new(0.0, 1.0, 5e-3, omega_c()).unwrap();
        let v = p.value(omega_c() + TWO_PI * 5e-3);
        assert_relative_eq!(v, TWO_PI * (-0.5f64).exp(), max_relative = 1e-12);
        assert!((v - 3.811).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(NsdParams::new(-1e-3, 0.5, 5e-3, 2.7).is_err());
        assert!(NsdParams::new(1e-3, -0.5, 5e-3, 2.7).is_err());
        assert!(NsdParams::new(1e-3, 0.5, 0.0, 2.7).is_err());
        assert!(NsdParams::new(1e-3, 0.5, 5e-3, 0.0).is_err());
        assert!(PulseSequence::new(0, 1.0).is_err());
        assert!(PulseSequence::new(1, 0.0).is_err());
    }

    #[test]
    fn larmor_center() {
        assert_relative_eq!(omega_c(), 2.712, epsilon = 1e-3);
    }

    #[test]
    fn modulation_single_pulse() {
        let seq = PulseSequence::new(1, 2.0).unwrap();
        assert_eq!(seq.modulation(0.5), 1);
        assert_eq!(seq.modulation(1.5), -1);
        assert_eq!(seq.modulation(0.0), 1);
        assert_eq!(seq.modulation(2.0), -1);
    }

    #[test]
    fn modulation_matches_switch_count() {
        let seq = PulseSequence::new(8, 3.4).unwrap();
        let t = 3.4 * 7.6;
        let before = seq.switch_times().filter(|&s| s < t).count();
        let expected = if before % 2 == 0 { 1 } else { -1 };
        assert_eq!(seq.modulation(t), expected);
    }

    #[test]
    fn switch_times_ordered_and_inside() {
        let seq = PulseSequence::new(16, 3.475).unwrap();
        let times: Vec<f64> = seq.switch_times().collect();
        assert_eq!(times.len(), 16);
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!(times.iter().all(|&t| t < seq.total_time()));
    }

    #[test]
    #[should_panic]
    fn modulation_out_of_range_panics() {
        PulseSequence::new(2, 1.0).unwrap().modulation(2.5);
    }

    #[test]
    fn filter_small_omega_vanishes() {
        let seq = PulseSequence::new(8, 3.4).unwrap();
        let f = seq.filter(1e-4);
        assert!(f < 1e-12);
        assert!(f / 1e-8 < 1e-4);
    }

    #[test]
    fn filter_odd_single_pulse() {
        let tau = 3.0;
        let seq = PulseSequence::new(1, tau).unwrap();
        assert_relative_eq!(seq.filter(TWO_PI / tau), 8.0, max_relative = 1e-12);
    }

    #[test]
    fn filter_resonance_limits() {
        for n in [1u32, 2, 7, 8, 16, 48] {
            let tau = 3.4;
            let seq = PulseSequence::new(n, tau).unwrap();
            let limit = 2.0 * f64::from(n).powi(2);
            for k in [1.0, 3.0] {
                let exact = seq.filter(k * PI / tau);
                assert!(exact.is_finite());
                assert_relative_eq!(exact, limit, max_relative = 1e-9);
                for eps in [1e-9, -1e-9, 1e-7, 5e-6, -3e-4] {
                    let v = seq.filter(k * PI * (1.0 + eps) / tau);
                    assert!(v.is_finite());
                    if eps.abs() <= 1e-9 {
                        assert_relative_eq!(v, limit, max_relative = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn filter_reduced_form_matches_raw_formula_off_resonance() {
        // Just outside the reduced band both branches must agree.
        let seq = PulseSequence::new(16, 3.4).unwrap();
        for d in [0.011, 0.02, -0.015] {
            let omega = (PI + d) / 3.4;
            let x = 0.5 * omega * 3.4;
            let raw = 8.0 * (16.0 * x).sin().powi(2) / x.cos().powi(2) * (0.5 * x).sin().powi(4);
            assert_relative_eq!(seq.filter(omega), raw, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_noise_has_no_decoherence() {
        let p = NsdParams::new(0.0, 0.0, 5e-3, omega_c()).unwrap();
        let seq = PulseSequence::new(16, 3.475).unwrap();
        assert_eq!(decoherence_exponent(&p, &seq).unwrap(), 0.0);
        assert_eq!(coherence(&p, &seq).unwrap(), 1.0);
    }

    #[test]
    fn white_noise_single_pulse() {
        for tau in [3.4, 5.8] {
            let p = NsdParams::new(2e-3, 0.0, 5e-3, omega_c()).unwrap();
            let seq = PulseSequence::new(1, tau).unwrap();
            let chi = decoherence_exponent(&p, &seq).unwrap();
            assert_relative_eq!(chi, TWO_PI * 2e-3 * tau / 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn doubling_amplitude_squares_coherence() {
        let seq = PulseSequence::new(8, 3.45).unwrap();
        let p1 = NsdParams::new(0.0, 0.3, 5e-3, omega_c()).unwrap();
        let p2 = NsdParams::new(0.0, 0.6, 5e-3, omega_c()).unwrap();
        let c1 = coherence(&p1, &seq).unwrap();
        let c2 = coherence(&p2, &seq).unwrap();
        assert_relative_eq!(c2, c1 * c1, max_relative = 1e-9);
    }

    #[test]
    fn coherence_ln2() {
        assert_relative_eq!((-(2f64.ln())).exp(), 0.5);
    }

    #[test]
    fn survival() {
        assert_eq!(survival_probability(1.0), 1.0);
        assert_eq!(survival_probability(0.0), 0.5);
        assert_eq!(survival_probability(-1.0), 0.0);
    }

    #[test]
    fn curve_rejects_unsorted_grid() {
        let p = NsdParams::new(2e-3, 0.5, 5e-3, omega_c()).unwrap();
        assert!(CoherenceCurve::simulate(&p, 1, &[3.4, 3.3]).is_err());
    }
}
