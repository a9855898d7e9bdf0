//! Harmonics-spectroscopy baseline.
//!
//! At each τ the coherence is fitted as `C = exp(−Γ·N·τ)` across pulse counts.
//! In the Dirac-comb limit of the CP filter, the rate is a weighted sum of the
//! spectrum at the odd harmonics `kπ/τ`:
//!
//! ```text
//! Γ(τ) = Σ_{k odd} 4/(π²k²) · S(kπ/τ)
//! ```
//!
//! The flat offset sums to exactly `S₀/2`; the Gaussian peak is summed up to
//! `k = 11`. A bounded Levenberg-Marquardt fit of `(s0, A, σ)` against all
//! rates of both windows gives the estimate.

use std::f64::consts::{PI, TAU as TWO_PI};
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dataset::{Bounds, ParamRanges, Sample};
use crate::physics::NsdParams;

/// Coherence values at or below this are excluded from the log fit.
pub const LOG_FLOOR: f64 = 0.05;
pub const MIN_DECAY_POINTS: usize = 3;
pub const MIN_DECAY_FITS: usize = 6;
pub const MAX_HARMONIC: u32 = 11;
pub const MAX_ITERATIONS: usize = 200;
/// Relative cost and step tolerances of the spectrum fit.
const FTOL: f64 = 1e-10;
const XTOL: f64 = 1e-10;
/// Lower limit on the rate standard error used as a weight, 1/µs.
pub const GAMMA_ERR_FLOOR: f64 = 1e-6;
/// Reduced chi-square above which a fit is flagged as a poor description.
pub const RESIDUAL_FLAG_THRESHOLD: f64 = 10.0;
/// Bounds are the sampling ranges widened by this fraction on each side.
pub const BOUND_EXPANSION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HsError {
    #[error("tau {tau}: only {usable} usable points, need {MIN_DECAY_POINTS}")]
    InsufficientData { tau: f64, usable: usize },
    #[error("need at least {MIN_DECAY_FITS} decay fits spanning every window, got {found}")]
    NotEnoughFits { found: usize },
    #[error("spectrum fit did not converge after {iterations} iterations")]
    FitFailed {
        best: NsdParams,
        iterations: usize,
        reduced_chi_sq: f64,
    },
}

/// Exponential decay rate at one τ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DecayFit {
    pub tau: f64,
    pub gamma: f64,
    pub gamma_err: f64,
    pub points_used: usize,
}

/// Reconstructed spectrum value at a filter harmonic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SpectrumPoint {
    pub omega: f64,
    pub s_value: f64,
    pub harmonic_index: u32,
    pub tau: f64,
}

/// Which odd harmonic resonates inside each τ window.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicAssignment(pub Vec<((f64, f64), u32)>);

impl Default for HarmonicAssignment {
    fn default() -> Self {
        Self(vec![((3.3, 3.66), 3), ((5.5, 6.1), 5)])
    }
}

impl HarmonicAssignment {
    /// Harmonic index and window number for `tau`.
    pub fn harmonic_for(&self, tau: f64) -> Option<(usize, u32)> {
        const EPS: f64 = 1e-9;
        self.0
            .iter()
            .enumerate()
            .find(|(_, ((a, b), _))| tau >= a - EPS && tau <= b + EPS)
            .map(|(i, (_, k))| (i, *k))
    }
}

/// Least-squares slope of `ln C` against `T = N·τ`, with intercept.
pub fn fit_decay_rate(tau: f64, points: &[(u32, f64)]) -> Result<DecayFit, HsError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, c)| c.is_finite() && *c > LOG_FLOOR)
        .map(|&(n, c)| (f64::from(n) * tau, c.ln()))
        .collect();
    if usable.len() < MIN_DECAY_POINTS {
        return Err(HsError::InsufficientData {
            tau,
            usable: usable.len(),
        });
    }
    let n = usable.len() as f64;
    let t_mean = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - t_mean) * (p.1 - y_mean)).sum();
    if sxx <= 0.0 {
        return Err(HsError::InsufficientData {
            tau,
            usable: usable.len(),
        });
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * t_mean;
    let rss: f64 = usable
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let gamma_err = (rss / (n - 2.0) / sxx).sqrt();
    Ok(DecayFit {
        tau,
        gamma: -slope,
        gamma_err,
        points_used: usable.len(),
    })
}

fn harmonic_weight(k: u32) -> f64 {
    4.0 / (PI * PI * f64::from(k * k))
}

/// Rate predicted by the harmonic model, Gaussian harmonics up to `k_max`.
pub fn gamma_model_truncated(params: &NsdParams, tau: f64, k_max: u32) -> f64 {
    let flat = 0.5 * params.offset_angular();
    let peak: f64 = (1..=k_max)
        .step_by(2)
        .map(|k| harmonic_weight(k) * params.gaussian_part(f64::from(k) * PI / tau))
        .sum();
    flat + peak
}

pub fn gamma_model(params: &NsdParams, tau: f64) -> f64 {
    gamma_model_truncated(params, tau, MAX_HARMONIC)
}

/// Per-harmonic inversion `S(k*π/τ) = (π²k*²/4)·(Γ − Γ_bg)`, where `Γ_bg`
/// is the contribution of every other harmonic under `background` (zero when
/// `None`).
pub fn reconstruct_spectrum_points(
    fits: &[DecayFit],
    assignment: &HarmonicAssignment,
    background: Option<&NsdParams>,
) -> Vec<SpectrumPoint> {
    fits.iter()
        .filter_map(|f| {
            let (_, k) = assignment.harmonic_for(f.tau)?;
            let omega = f64::from(k) * PI / f.tau;
            let bg = background.map_or(0.0, |p| {
                gamma_model(p, f.tau) - harmonic_weight(k) * p.value(omega)
            });
            Some(SpectrumPoint {
                omega,
                s_value: (f.gamma - bg) / harmonic_weight(k),
                harmonic_index: k,
                tau: f.tau,
            })
        })
        .collect()
}

/// Outcome of the weighted spectrum fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HsFit {
    pub params: NsdParams,
    pub reduced_chi_sq: f64,
    pub dof: usize,
    pub iterations: usize,
    pub residual_flag: bool,
}

struct Problem<'a> {
    fits: &'a [DecayFit],
    bounds: [Bounds; 3],
    omega_c: f64,
}

impl Problem<'_> {
    fn params(&self, u: &Vector3<f64>) -> NsdParams {
        NsdParams {
            s0: u[0] * self.bounds[0].hi,
            amplitude: u[1] * self.bounds[1].hi,
            sigma: u[2] * self.bounds[2].hi,
            omega_c: self.omega_c,
        }
    }

    fn clamp(&self, u: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            let b = self.bounds[i];
            u[i].clamp(b.lo / b.hi, 1.0)
        })
    }

    fn weight(f: &DecayFit) -> f64 {
        1.0 / f.gamma_err.max(GAMMA_ERR_FLOOR)
    }

    fn cost(&self, u: &Vector3<f64>) -> f64 {
        let p = self.params(u);
        self.fits
            .iter()
            .map(|f| ((gamma_model(&p, f.tau) - f.gamma) * Self::weight(f)).powi(2))
            .sum()
    }

    /// Returns `(JᵀJ, Jᵀr, cost)` in normalized coordinates.
    fn normal_equations(&self, u: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>, f64) {
        let p = self.params(u);
        let width = p.sigma_angular();
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        let mut cost = 0.0;
        for f in self.fits {
            let w = Self::weight(f);
            let mut d_amp = 0.0;
            let mut d_sigma = 0.0;
            for k in (1..=MAX_HARMONIC).step_by(2) {
                let omega = f64::from(k) * PI / f.tau;
                let d = omega - p.omega_c;
                let e = (-(d * d) / (2.0 * width * width)).exp();
                let hw = harmonic_weight(k);
                d_amp += hw * TWO_PI * e;
                d_sigma +=
                    hw * TWO_PI * p.amplitude * e * d * d / (TWO_PI * TWO_PI * p.sigma.powi(3));
            }
            let row = Vector3::new(
                w * 0.5 * TWO_PI * self.bounds[0].hi,
                w * d_amp * self.bounds[1].hi,
                w * d_sigma * self.bounds[2].hi,
            );
            let r = w * (gamma_model(&p, f.tau) - f.gamma);
            jtj += row * row.transpose();
            jtr += row * r;
            cost += r * r;
        }
        (jtj, jtr, cost)
    }

    /// Variables pinned at a bound with the descent direction pointing out
    /// of the box.
    fn active(&self, u: &Vector3<f64>, grad: &Vector3<f64>) -> [bool; 3] {
        std::array::from_fn(|i| {
            let b = self.bounds[i];
            let (lo, hi) = (b.lo / b.hi, 1.0);
            (u[i] <= lo && grad[i] > 0.0) || (u[i] >= hi && grad[i] < 0.0)
        })
    }

    /// Active-set Levenberg-Marquardt from `start`. Returns the final point,
    /// its cost, the iteration count and whether it converged.
    fn solve(&self, start: Vector3<f64>) -> (Vector3<f64>, f64, usize, bool) {
        let mut u = self.clamp(&start);
        let mut lambda = 1e-3;
        let (mut jtj, mut jtr, mut cost) = self.normal_equations(&u);
        for iter in 1..=MAX_ITERATIONS {
            let active = self.active(&u, &jtr);
            if active.iter().all(|&a| a) {
                return (u, cost, iter, true);
            }
            let mut damped = jtj;
            let mut rhs = -jtr;
            for i in 0..3 {
                if active[i] {
                    for j in 0..3 {
                        damped[(i, j)] = 0.0;
                        damped[(j, i)] = 0.0;
                    }
                    damped[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                } else {
                    damped[(i, i)] += lambda * jtj[(i, i)].max(1e-30);
                }
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&rhs)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = self.clamp(&(u + step));
            let moved = (trial - u).norm();
            let trial_cost = self.cost(&trial);
            if trial_cost <= cost {
                let improvement = cost - trial_cost;
                u = trial;
                (jtj, jtr, cost) = self.normal_equations(&u);
                lambda = (lambda / 10.0).max(1e-12);
                if moved <= XTOL * (XTOL + u.norm()) || improvement <= FTOL * cost {
                    return (u, cost, iter, true);
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e16 || moved <= XTOL * (XTOL + u.norm()) {
                    // No descent left inside the box.
                    return (u, cost, iter, true);
                }
            }
        }
        (u, cost, MAX_ITERATIONS, false)
    }
}

/// Data-driven starting point: flat-background inversion for s0, the
/// background-corrected spectrum peak for A and its second moment about the
/// center for σ.
fn initial_guess(fits: &[DecayFit], assignment: &HarmonicAssignment, omega_c: f64) -> NsdParams {
    let min_gamma = fits.iter().map(|f| f.gamma).fold(f64::INFINITY, f64::min);
    let s0 = (2.0 * min_gamma / TWO_PI).max(0.0);
    let offset = TWO_PI * s0;
    let flat = NsdParams {
        s0,
        amplitude: 0.0,
        sigma: 1.0,
        omega_c,
    };
    let points = reconstruct_spectrum_points(fits, assignment, Some(&flat));
    let peak = points
        .iter()
        .map(|p| p.s_value)
        .fold(f64::NEG_INFINITY, f64::max);
    let amplitude = ((peak - offset) / TWO_PI).max(0.0);
    let (mut wsum, mut msum) = (0.0, 0.0);
    for p in &points {
        let w = (p.s_value - offset).max(0.0);
        wsum += w;
        msum += w * (p.omega - omega_c).powi(2);
    }
    let sigma = if wsum > 0.0 {
        (msum / wsum).sqrt() / TWO_PI
    } else {
        0.0
    };
    NsdParams {
        s0,
        amplitude,
        sigma,
        omega_c,
    }
}

fn expanded(b: Bounds) -> Bounds {
    Bounds::new(
        b.lo * (1.0 - BOUND_EXPANSION),
        b.hi * (1.0 + BOUND_EXPANSION),
    )
}

/// Weighted bounded fit of `(s0, A, σ)` to the decay rates.
pub fn fit_nsd_model(
    fits: &[DecayFit],
    ranges: &ParamRanges,
    assignment: &HarmonicAssignment,
) -> Result<HsFit, HsError> {
    let mut sorted = fits.to_vec();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let covered = (0..assignment.0.len()).all(|w| {
        sorted
            .iter()
            .any(|f| assignment.harmonic_for(f.tau).map(|h| h.0) == Some(w))
    });
    if sorted.len() < MIN_DECAY_FITS || !covered {
        return Err(HsError::NotEnoughFits {
            found: sorted.len(),
        });
    }

    let problem = Problem {
        fits: &sorted,
        bounds: [
            expanded(ranges.s0),
            expanded(ranges.amplitude),
            expanded(ranges.sigma),
        ],
        omega_c: ranges.omega_c,
    };
    let normalize = |p: &NsdParams| {
        Vector3::new(
            p.s0 / problem.bounds[0].hi,
            p.amplitude / problem.bounds[1].hi,
            p.sigma / problem.bounds[2].hi,
        )
    };
    let data_start = normalize(&initial_guess(&sorted, assignment, ranges.omega_c));
    let mid_start = normalize(&NsdParams {
        s0: ranges.s0.midpoint(),
        amplitude: ranges.amplitude.midpoint(),
        sigma: ranges.sigma.midpoint(),
        omega_c: ranges.omega_c,
    });

    let mut best: Option<(Vector3<f64>, f64, usize, bool)> = None;
    let mut total_iterations = 0;
    for start in [data_start, mid_start] {
        let run = problem.solve(start);
        total_iterations += run.2;
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (u, cost, _, converged) = best.expect("at least one start");
    let params = problem.params(&u);
    let dof = sorted.len().saturating_sub(3).max(1);
    let reduced_chi_sq = cost / dof as f64;
    if !converged {
        return Err(HsError::FitFailed {
            best: params,
            iterations: total_iterations,
            reduced_chi_sq,
        });
    }
    Ok(HsFit {
        params,
        reduced_chi_sq,
        dof,
        iterations: total_iterations,
        residual_flag: reduced_chi_sq > RESIDUAL_FLAG_THRESHOLD,
    })
}

/// Everything the baseline derives from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HsReconstruction {
    pub fits: Vec<DecayFit>,
    pub skipped_taus: Vec<f64>,
    pub fit: HsFit,
    /// Spectrum diagnostics with the fitted background removed.
    pub points: Vec<SpectrumPoint>,
}

/// Decay fits for every τ of the sample, using curves with `N ≤ n_bar`.
/// τ values with too few usable points are returned separately.
pub fn decay_fits_for_sample(sample: &Sample, n_bar: u32) -> (Vec<DecayFit>, Vec<f64>) {
    let curves: Vec<_> = sample
        .curves
        .iter()
        .filter(|c| c.n_pulses <= n_bar)
        .collect();
    let Some(first) = curves.first() else {
        return (Vec::new(), Vec::new());
    };
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for (j, &tau) in first.tau_grid.iter().enumerate() {
        let points: Vec<(u32, f64)> = curves.iter().map(|c| (c.n_pulses, c.values[j])).collect();
        match fit_decay_rate(tau, &points) {
            Ok(f) => fits.push(f),
            Err(_) => skipped.push(tau),
        }
    }
    (fits, skipped)
}

/// Full baseline on one sample.
pub fn reconstruct(
    sample: &Sample,
    n_bar: u32,
    ranges: &ParamRanges,
    assignment: &HarmonicAssignment,
) -> Result<HsReconstruction, HsError> {
    let (fits, skipped_taus) = decay_fits_for_sample(sample, n_bar);
    let fit = fit_nsd_model(&fits, ranges, assignment)?;
    let points = reconstruct_spectrum_points(&fits, assignment, Some(&fit.params));
    Ok(HsReconstruction {
        fits,
        skipped_taus,
        fit,
        points,
    })
}

pub fn write_spectrum_csv(points: &[SpectrumPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "omega_rad_per_us,s_value,harmonic_index,tau_us")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{}",
            p.omega, p.s_value, p.harmonic_index, p.tau
        )?;
    }
    Ok(())
}
