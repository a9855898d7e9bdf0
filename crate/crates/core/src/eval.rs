//! Reconstruction quality: parameter MSE, curve chi-square and MAE, and
//! sweeps over the pulse-count cap comparing the network with the baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{assemble_feature_vector, synthesize_sample, Dataset, DatasetError};
use crate::hs::{self, HarmonicAssignment, HsError, MIN_DECAY_POINTS};
use crate::mlp::{MlpError, MlpModel};
use crate::physics::NsdParams;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("error bar at index {index} is {value}, must be positive")]
    DegenerateWeight { index: usize, value: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum Method {
    #[serde(rename = "NN")]
    Nn,
    #[serde(rename = "HS")]
    Hs,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Nn => "NN",
            Method::Hs => "HS",
        })
    }
}

/// Per-parameter mean and population standard deviation of squared error,
/// ordered `(s0, A, σ)`, in MHz².
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParamMse {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn components(p: &NsdParams) -> [f64; 3] {
    [p.s0, p.amplitude, p.sigma]
}

pub fn param_mse(estimates: &[NsdParams], truths: &[NsdParams]) -> Result<ParamMse, EvalError> {
    if estimates.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            left: estimates.len(),
            right: truths.len(),
        });
    }
    if estimates.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = estimates.len() as f64;
    let sq: Vec<[f64; 3]> = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| {
            let (e, t) = (components(e), components(t));
            [
                (e[0] - t[0]).powi(2),
                (e[1] - t[1]).powi(2),
                (e[2] - t[2]).powi(2),
            ]
        })
        .collect();
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for i in 0..3 {
        mean[i] = sq.iter().map(|s| s[i]).sum::<f64>() / n;
        std[i] = (sq.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(ParamMse { mean, std })
}

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Sum of squared normalized residuals and its term count.
fn chi_terms(
    reference: &[f64],
    errors: &[f64],
    simulated: &[f64],
) -> Result<(f64, usize), EvalError> {
    check_lengths(reference.len(), simulated.len())?;
    check_lengths(reference.len(), errors.len())?;
    let mut sum = 0.0;
    for (index, ((e, s), &err)) in reference.iter().zip(simulated).zip(errors).enumerate() {
        if err.is_nan() || err <= 0.0 {
            return Err(EvalError::DegenerateWeight { index, value: err });
        }
        sum += ((e - s) / err).powi(2);
    }
    Ok((sum, reference.len()))
}

/// `(1/ν)·Σ (C_e − C_s)²/δC_e²` with ν the number of terms.
pub fn reduced_chi_squared(
    reference: &[f64],
    errors: &[f64],
    simulated: &[f64],
) -> Result<(f64, usize), EvalError> {
    let (sum, nu) = chi_terms(reference, errors, simulated)?;
    Ok((sum / nu as f64, nu))
}

pub fn mae_curve(reference: &[f64], simulated: &[f64]) -> Result<f64, EvalError> {
    check_lengths(reference.len(), simulated.len())?;
    let sum: f64 = reference
        .iter()
        .zip(simulated)
        .map(|(e, s)| (e - s).abs())
        .sum();
    Ok(sum / reference.len() as f64)
}

/// Outcome for one test sample.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub truth: NsdParams,
    pub estimate: NsdParams,
    pub chi_nu_sq: Option<f64>,
    pub mae: f64,
    /// The estimator could not produce its own estimate; a fallback was used.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReconstructionReport {
    pub method: Method,
    pub n_bar: u32,
    pub mse: ParamMse,
    /// Pooled over every sample; `None` when the dataset has no noise model.
    pub chi_nu_sq: Option<f64>,
    pub mae: f64,
    pub nu: usize,
    pub failures: usize,
    pub samples: Vec<SampleRecord>,
}

/// One estimate per sample, plus whether it is a fallback.
pub type Estimate = (NsdParams, bool);

/// Simulates every estimate over the full pulse-count set and scores it
/// against the sample's reference curves, with the dataset noise level as
/// error bar.
pub fn evaluate_estimates(
    dataset: &Dataset,
    indices: &[usize],
    estimates: &[Estimate],
    method: Method,
    n_bar: u32,
) -> Result<ReconstructionReport, EvalError> {
    check_lengths(indices.len(), estimates.len())?;
    let max_n = dataset.grid.max_n();
    let sigma = dataset.noise_std;
    let per_sample: Vec<(SampleRecord, Option<f64>, usize)> = indices
        .par_iter()
        .zip(estimates)
        .map(|(&index, &(estimate, failed))| -> Result<_, EvalError> {
            let sample = &dataset.samples[index];
            let reference = assemble_feature_vector(sample, max_n)?;
            let simulated =
                assemble_feature_vector(&synthesize_sample(&estimate, &dataset.grid)?, max_n)?;
            let mae = mae_curve(&reference, &simulated)?;
            let chi = if sigma > 0.0 {
                let errors = vec![sigma; reference.len()];
                Some(chi_terms(&reference, &errors, &simulated)?.0)
            } else {
                None
            };
            let nu = reference.len();
            let record = SampleRecord {
                index,
                truth: sample.label,
                estimate,
                chi_nu_sq: chi.map(|c| c / nu as f64),
                mae,
                failed,
            };
            Ok((record, chi, nu))
        })
        .collect::<Result<_, _>>()?;

    let nu: usize = per_sample.iter().map(|s| s.2).sum();
    let chi_nu_sq =
        (sigma > 0.0).then(|| per_sample.iter().filter_map(|s| s.1).sum::<f64>() / nu as f64);
    let mae = per_sample.iter().map(|s| s.0.mae * s.2 as f64).sum::<f64>() / nu as f64;
    let samples: Vec<SampleRecord> = per_sample.into_iter().map(|s| s.0).collect();
    let est: Vec<NsdParams> = samples.iter().map(|s| s.estimate).collect();
    let truths: Vec<NsdParams> = samples.iter().map(|s| s.truth).collect();
    Ok(ReconstructionReport {
        method,
        n_bar,
        mse: param_mse(&est, &truths)?,
        chi_nu_sq,
        mae,
        nu,
        failures: samples.iter().filter(|s| s.failed).count(),
        samples,
    })
}

pub fn nn_estimates(
    dataset: &Dataset,
    indices: &[usize],
    model: &MlpModel,
) -> Result<Vec<Estimate>, EvalError> {
    let n_bar = model.n_bar;
    indices
        .par_iter()
        .map(|&i| {
            let x = assemble_feature_vector(&dataset.samples[i], n_bar)?;
            Ok((model.predict(&x)?, false))
        })
        .collect()
}

/// Baseline estimates. A fit that stops early keeps its best point; a sample
/// with too few usable rates falls back to the center of the ranges. Both are
/// counted as failures.
pub fn hs_estimates(
    dataset: &Dataset,
    indices: &[usize],
    n_bar: u32,
    assignment: &HarmonicAssignment,
) -> Vec<Estimate> {
    let r = &dataset.ranges;
    let fallback = NsdParams {
        s0: r.s0.midpoint(),
        amplitude: r.amplitude.midpoint(),
        sigma: r.sigma.midpoint(),
        omega_c: r.omega_c,
    };
    indices
        .par_iter()
        .map(
            |&i| match hs::reconstruct(&dataset.samples[i], n_bar, r, assignment) {
                Ok(rec) => (rec.fit.params, false),
                Err(HsError::FitFailed { best, .. }) => (best, true),
                Err(e) => {
                    log::debug!("sample {i}: {e}");
                    (fallback, true)
                }
            },
        )
        .collect()
}

/// The baseline needs enough pulse counts for a decay fit at each τ.
pub fn hs_applicable(dataset: &Dataset, n_bar: u32) -> bool {
    dataset
        .grid
        .n_values_up_to(n_bar)
        .is_ok_and(|ns| ns.len() >= MIN_DECAY_POINTS)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum RowStatus {
    Present(Box<ReconstructionReport>),
    /// No trained model for this cap.
    Absent,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub n_bar: u32,
    pub status: RowStatus,
}

impl SweepRow {
    pub fn report(&self) -> Option<&ReconstructionReport> {
        match &self.status {
            RowStatus::Present(r) => Some(r),
            _ => None,
        }
    }
}

/// Scores both methods on the test split for every requested cap.
pub fn compare_methods_sweep(
    dataset: &Dataset,
    models: &BTreeMap<u32, MlpModel>,
    n_bars: &[u32],
    assignment: &HarmonicAssignment,
) -> Result<Vec<SweepRow>, EvalError> {
    let test = &dataset.split.test;
    let mut rows = Vec::new();
    for &n_bar in n_bars {
        dataset.grid.n_values_up_to(n_bar)?;
        let nn = match models.get(&n_bar) {
            Some(model) => {
                let est = nn_estimates(dataset, test, model)?;
                RowStatus::Present(Box::new(evaluate_estimates(
                    dataset,
                    test,
                    &est,
                    Method::Nn,
                    n_bar,
                )?))
            }
            None => RowStatus::Absent,
        };
        rows.push(SweepRow {
            method: Method::Nn,
            n_bar,
            status: nn,
        });
        let hs = if hs_applicable(dataset, n_bar) {
            let est = hs_estimates(dataset, test, n_bar, assignment);
            RowStatus::Present(Box::new(evaluate_estimates(
                dataset,
                test,
                &est,
                Method::Hs,
                n_bar,
            )?))
        } else {
            RowStatus::NotApplicable
        };
        rows.push(SweepRow {
            method: Method::Hs,
            n_bar,
            status: hs,
        });
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str =
    "method,n_bar,mse_s0,mse_s0_std,mse_A,mse_A_std,mse_sigma,mse_sigma_std,chi_nu_sq,mae,nu";

/// Writes one CSV line per present report. Absent and not-applicable rows
/// are left to the sidecar.
pub fn write_report_csv<'a>(
    reports: impl IntoIterator<Item = &'a ReconstructionReport>,
    mut out: impl Write,
) -> std::io::Result<()> {
    writeln!(out, "{REPORT_HEADER}")?;
    for r in reports {
        let m = &r.mse;
        let chi = r.chi_nu_sq.map_or(String::new(), |c| c.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.n_bar,
            m.mean[0],
            m.std[0],
            m.mean[1],
            m.std[1],
            m.mean[2],
            m.std[2],
            chi,
            r.mae,
            r.nu
        )?;
    }
    Ok(())
}

/// Provenance record accompanying a report.
pub fn report_sidecar(
    dataset: &Dataset,
    rows: &[SweepRow],
    model_hashes: &BTreeMap<u32, String>,
    seed: Option<u64>,
) -> serde_json::Value {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            let (status, failures) = match &r.status {
                RowStatus::Present(rep) => ("present", Some(rep.failures)),
                RowStatus::Absent => ("absent", None),
                RowStatus::NotApplicable => ("not_applicable", None),
            };
            serde_json::json!({
                "method": r.method,
                "n_bar": r.n_bar,
                "status": status,
                "failures": failures,
            })
        })
        .collect();
    serde_json::json!({
        "dataset_seed": dataset.seed,
        "run_seed": seed,
        "noise_std": dataset.noise_std,
        "test_samples": dataset.split.test.len(),
        "model_hashes": model_hashes,
        "rows": rows,
        "created_unix_seconds": timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(s0: f64, a: f64, s: f64) -> NsdParams {
        NsdParams {
            s0,
            amplitude: a,
            sigma: s,
            omega_c: 2.7,
        }
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let v = vec![p(1e-3, 0.4, 3e-3), p(2e-3, 0.6, 5e-3)];
        let m = param_mse(&v, &v).unwrap();
        assert_eq!(m.mean, [0.0; 3]);
        assert_eq!(m.std, [0.0; 3]);
    }

    #[test]
    fn single_pair_mse() {
        let m = param_mse(&[p(1e-3, 0.6, 3e-3)], &[p(1e-3, 0.5, 3e-3)]).unwrap();
        assert_relative_eq!(m.mean[1], 0.01, max_relative = 1e-12);
        assert_eq!(m.std[1], 0.0);
    }

    #[test]
    fn mse_population_std() {
        let truth = vec![p(0.0, 0.0, 0.0); 2];
        let est = vec![p(0.0, 1.0, 0.0), p(0.0, 3.0, 0.0)];
        let m = param_mse(&est, &truth).unwrap();
        assert_eq!(m.mean[1], 5.0);
        assert_eq!(m.std[1], 4.0);
    }

    #[test]
    fn mse_rejects_empty_and_unpaired() {
        assert!(matches!(param_mse(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            param_mse(&[p(0.0, 0.0, 0.0)], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn chi_square_trivial_cases() {
        let c = [0.9, 0.5, 0.2];
        assert_eq!(reduced_chi_squared(&c, &[0.05; 3], &c).unwrap(), (0.0, 3));
        let shifted = [0.95, 0.45, 0.25];
        assert_relative_eq!(
            reduced_chi_squared(&c, &[0.05; 3], &shifted).unwrap().0,
            1.0,
            max_relative = 1e-12
        );
        assert!(matches!(
            reduced_chi_squared(&c, &[0.05, 0.0, 0.05], &c),
            Err(EvalError::DegenerateWeight { index: 1, .. })
        ));
    }

    #[test]
    fn mae_trivial_cases() {
        let c = [0.9, 0.5, 0.2, 0.1];
        assert_eq!(mae_curve(&c, &c).unwrap(), 0.0);
        let off: Vec<f64> = c.iter().map(|v| v + 0.02).collect();
        assert_relative_eq!(mae_curve(&c, &off).unwrap(), 0.02, max_relative = 1e-12);
    }

    #[test]
    fn report_csv_format() {
        let rep = ReconstructionReport {
            method: Method::Hs,
            n_bar: 16,
            mse: ParamMse {
                mean: [1.0, 2.0, 3.0],
                std: [0.1, 0.2, 0.3],
            },
            chi_nu_sq: Some(1.5),
            mae: 0.04,
            nu: 350,
            failures: 0,
            samples: vec![],
        };
        let mut buf = Vec::new();
        write_report_csv([&rep], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(REPORT_HEADER));
        assert_eq!(lines.next(), Some("HS,16,1,0.1,2,0.2,3,0.3,1.5,0.04,350"));
    }
}
