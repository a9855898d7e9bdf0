#![allow(dead_code)]

use std::f64::consts::{PI, TAU as TWO_PI};

use dd_spectro::{NsdParams, PulseSequence};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Filter function from the discrete Fourier transform of the sampled
/// modulation. The sampling step divides τ/2, so every switch falls on a cell
/// boundary and the piecewise-constant transform is exact after the sinc
/// correction of each cell.
pub fn fft_filter(
    seq: &PulseSequence,
    cells_per_half_tau: usize,
    pad: usize,
    omega_max: f64,
) -> Vec<(f64, f64)> {
    let dt = seq.tau() / (2 * cells_per_half_tau) as f64;
    let m = 2 * cells_per_half_tau * seq.n_pulses() as usize;
    let len = m * pad;
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|i| {
            let v = if i < m {
                f64::from(seq.modulation((i as f64 + 0.5) * dt))
            } else {
                0.0
            };
            Complex::new(v, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let d_omega = TWO_PI / (len as f64 * dt);
    (1..len / 2)
        .map(|k| (k as f64 * d_omega, buf[k]))
        .take_while(|(w, _)| *w <= omega_max)
        .map(|(w, y)| {
            let half = 0.5 * w * dt;
            let sinc = half.sin() / half;
            let ft = y.norm() * dt * sinc;
            (w, 0.5 * (w * ft).powi(2))
        })
        .collect()
}

/// Modulation autocorrelation `∫ y(t) y(t+u) dt`, exact for the
/// piecewise-constant modulation.
pub fn autocorrelation(seq: &PulseSequence, u: f64) -> f64 {
    let total = seq.total_time();
    if u >= total {
        return 0.0;
    }
    let mut cuts: Vec<f64> = vec![0.0, total - u];
    for s in seq.switch_times() {
        for c in [s, s - u] {
            if c > 0.0 && c < total - u {
                cuts.push(c);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            f64::from(seq.modulation(mid)) * f64::from(seq.modulation(mid + u)) * (w[1] - w[0])
        })
        .sum()
}

/// Gaussian-part exponent from the time domain:
/// `χ_g = ∫₀^T A_y(u) R(u) du` with `R(u) = 2√(2π)·A·σ'·cos(ω_c u)·exp(−σ'²u²/2)`.
/// The segments between multiples of τ/2 carry a linear `A_y` and are
/// integrated with composite Simpson.
pub fn chi_gaussian_time_domain(params: &NsdParams, seq: &PulseSequence, sub: usize) -> f64 {
    let w = params.sigma_angular();
    let r = |u: f64| {
        2.0 * (TWO_PI).sqrt()
            * params.amplitude
            * w
            * (params.omega_c * u).cos()
            * (-0.5 * w * w * u * u).exp()
    };
    let f = |u: f64| autocorrelation(seq, u) * r(u);
    let half = 0.5 * seq.tau();
    let segments = 2 * seq.n_pulses() as usize;
    let mut total = 0.0;
    for s in 0..segments {
        let a = s as f64 * half;
        let h = half / sub as f64;
        let mut acc = f(a) + f(a + half);
        for i in 1..sub {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += acc * h / 3.0;
    }
    total
}

/// `(1/π) ∫₀^∞ F(ω)/ω² dω` for a single pulse, by brute-force trapezoid
/// up to `omega_max` plus the mean-value tail `⟨F⟩/Ω = 3/Ω`.
pub fn white_weight_integral_single_pulse(tau: f64, omega_max: f64, step: f64) -> f64 {
    let seq = PulseSequence::new(1, tau).unwrap();
    let n = (omega_max / step).ceil() as usize;
    let h = omega_max / n as f64;
    let g = |w: f64| seq.filter(w) / (w * w);
    let mut acc = 0.5 * g(omega_max);
    for i in 1..n {
        acc += g(i as f64 * h);
    }
    (acc * h + 3.0 / omega_max) / PI
}

/// Largest relative gap between backprop and central differences over every
/// parameter of a fixed random network on `batch` random inputs.
pub fn gradient_check_max_rel_error(dims: &[usize], batch: usize, h: f64, seed: u64) -> f64 {
    use dd_spectro::mlp::{gradients, MlpParams};
    use rand::Rng;

    let mut rng = dd_spectro::dataset::sample_rng(seed, 0);
    let mut params = MlpParams::glorot(dims, &mut rng).unwrap();
    for b in params.as_mut_slice() {
        // Offsets every entry, biases included, so hidden units sit away from the ReLU kink.
        *b += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let inputs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..dims[0]).map(|_| rng.random::<f64>()).collect())
        .collect();
    let targets: Vec<Vec<f64>> = (0..batch)
        .map(|_| {
            (0..*dims.last().unwrap())
                .map(|_| rng.random::<f64>())
                .collect()
        })
        .collect();
    let xs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let ys: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let weight_decay = 1e-3;
    let (grad, _) = gradients(&params, &xs, &ys, weight_decay, None).unwrap();

    let mut worst: f64 = 0.0;
    for i in 0..params.param_count() {
        let orig = params.as_slice()[i];
        params.as_mut_slice()[i] = orig + h;
        let up = gradients(&params, &xs, &ys, weight_decay, None).unwrap().1;
        params.as_mut_slice()[i] = orig - h;
        let down = gradients(&params, &xs, &ys, weight_decay, None).unwrap().1;
        params.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grad.as_slice()[i];
        let denom = g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max((g - fd).abs() / denom);
    }
    worst
}
