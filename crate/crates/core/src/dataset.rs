//! Synthetic training corpora: parameter sampling, curve synthesis, noise
//! injection, feature assembly and a self-describing text container.
//!
//! Every sample owns a ChaCha8 stream selected by its index, so parallel and
//! serial generation give the same bytes.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::physics::{self, CoherenceCurve, NsdParams, PhysicsError};

pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_ID: &str = "chacha8-stream-per-sample";
pub const DEFAULT_NOISE_STD: f64 = 0.05;
pub const PAPER_N_VALUES: [u32; 7] = [1, 8, 16, 24, 32, 40, 48];
pub const PAPER_TAU_WINDOWS: [(f64, f64); 2] = [(3.3, 3.66), (5.5, 6.1)];
const SPLIT_STREAM: u64 = u64::MAX;
const SAMPLES_MARKER: &str = "[samples]";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pulse-count cap {0} is not one of the grid's pulse counts")]
    UnknownNBar(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dataset format version {0}")]
    UnknownVersion(String),
    #[error("grid mismatch at record {record}: expected {expected} columns, found {found}")]
    GridMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("truncated data: {0}")]
    TruncatedRow(String),
    #[error("malformed record {record}: {reason}")]
    MalformedRecord { record: usize, reason: String },
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Sampling ranges for the NSD parameters; the center stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamRanges {
    pub s0: Bounds,
    pub amplitude: Bounds,
    pub sigma: Bounds,
    pub omega_c: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            s0: Bounds::new(4e-4, 4e-3),
            amplitude: Bounds::new(0.3, 0.7),
            sigma: Bounds::new(2e-3, 9e-3),
            omega_c: physics::larmor_omega(physics::GAMMA_C13_MHZ_PER_G, physics::BIAS_FIELD_G),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, b) in [
            ("s0", self.s0),
            ("amplitude", self.amplitude),
            ("sigma", self.sigma),
        ] {
            if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi && b.lo >= 0.0) {
                return Err(DatasetError::InvalidConfig(format!(
                    "{name} range [{}, {}] is not a valid nonnegative interval",
                    b.lo, b.hi
                )));
            }
        }
        if self.sigma.lo <= 0.0 || !(self.omega_c.is_finite() && self.omega_c > 0.0) {
            return Err(DatasetError::InvalidConfig(
                "sigma and omega_c must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, p: &NsdParams) -> bool {
        self.s0.contains(p.s0)
            && self.amplitude.contains(p.amplitude)
            && self.sigma.contains(p.sigma)
            && p.omega_c == self.omega_c
    }
}

/// τ windows, sampling step and pulse counts of a coherence measurement.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    /// Inclusive `[start, end]` windows in µs.
    pub tau_windows: Vec<(f64, f64)>,
    pub delta_tau_ns: u32,
    pub n_values: Vec<u32>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::paper(20)
    }
}

impl GridSpec {
    /// The two collapse windows and the seven pulse counts, at the given step.
    pub fn paper(delta_tau_ns: u32) -> Self {
        Self {
            tau_windows: PAPER_TAU_WINDOWS.to_vec(),
            delta_tau_ns,
            n_values: PAPER_N_VALUES.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.delta_tau_ns == 0 {
            return Err(DatasetError::InvalidConfig("delta_tau must be > 0".into()));
        }
        if self.tau_windows.is_empty() {
            return Err(DatasetError::InvalidConfig("no tau windows".into()));
        }
        let mut prev_end = 0.0;
        for &(a, b) in &self.tau_windows {
            if !(a > prev_end && b >= a) {
                return Err(DatasetError::InvalidConfig(format!(
                    "tau windows must be positive, disjoint and increasing (window [{a}, {b}])"
                )));
            }
            prev_end = b;
        }
        if self.n_values.first() != Some(&1) || self.n_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DatasetError::InvalidConfig(
                "pulse counts must start at 1 and be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn window_ns(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.tau_windows
            .iter()
            .map(|&(a, b)| ((a * 1000.0).round() as u64, (b * 1000.0).round() as u64))
    }

    /// Points per window, endpoints inclusive.
    pub fn window_point_counts(&self) -> Vec<usize> {
        let step = u64::from(self.delta_tau_ns);
        self.window_ns()
            .map(|(a, b)| ((b - a) / step + 1) as usize)
            .collect()
    }

    /// All τ values, window by window, in µs.
    pub fn tau_values(&self) -> Vec<f64> {
        let step = u64::from(self.delta_tau_ns);
        self.window_ns()
            .flat_map(|(a, b)| (0..=((b - a) / step)).map(move |i| (a + i * step) as f64 / 1000.0))
            .collect()
    }

    /// τ values of one window.
    pub fn window_tau_values(&self, window: usize) -> Vec<f64> {
        let counts = self.window_point_counts();
        let start: usize = counts[..window].iter().sum();
        self.tau_values()[start..start + counts[window]].to_vec()
    }

    pub fn points_per_curve(&self) -> usize {
        self.window_point_counts().iter().sum()
    }

    /// Pulse counts `N ≤ n_bar`, or an error when `n_bar` is not a grid value.
    pub fn n_values_up_to(&self, n_bar: u32) -> Result<&[u32], DatasetError> {
        let pos = self
            .n_values
            .iter()
            .position(|&n| n == n_bar)
            .ok_or(DatasetError::UnknownNBar(n_bar))?;
        Ok(&self.n_values[..=pos])
    }

    pub fn feature_len(&self, n_bar: u32) -> Result<usize, DatasetError> {
        Ok(self.points_per_curve() * self.n_values_up_to(n_bar)?.len())
    }

    pub fn max_n(&self) -> u32 {
        *self
            .n_values
            .last()
            .expect("validated grid has pulse counts")
    }
}

/// One labeled instance: NSD parameters and one curve per pulse count.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: NsdParams,
    pub curves: Vec<CoherenceCurve>,
    pub noisy: bool,
}

impl Sample {
    pub fn curve(&self, n_pulses: u32) -> Option<&CoherenceCurve> {
        self.curves.iter().find(|c| c.n_pulses == n_pulses)
    }
}

/// Draws each parameter independently and uniformly from its range.
pub fn sample_params<R: Rng + ?Sized>(ranges: &ParamRanges, rng: &mut R) -> NsdParams {
    let mut draw = |b: Bounds| b.lo + b.width() * rng.random::<f64>();
    let s0 = draw(ranges.s0);
    let amplitude = draw(ranges.amplitude);
    let sigma = draw(ranges.sigma);
    NsdParams {
        s0,
        amplitude,
        sigma,
        omega_c: ranges.omega_c,
    }
}

/// Noiseless curves for every `(τ, N)` of the grid.
pub fn synthesize_sample(params: &NsdParams, grid: &GridSpec) -> Result<Sample, DatasetError> {
    let taus = grid.tau_values();
    let curves = grid
        .n_values
        .iter()
        .map(|&n| CoherenceCurve::simulate(params, n, &taus))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sample {
        label: *params,
        curves,
        noisy: false,
    })
}

/// Adds independent `Normal(0, noise_std)` errors to every curve point. Values
/// are not clamped.
pub fn add_noise<R: Rng + ?Sized>(
    mut sample: Sample,
    noise_std: f64,
    rng: &mut R,
) -> Result<Sample, DatasetError> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(DatasetError::InvalidConfig(format!(
            "noise std must be nonnegative (got {noise_std})"
        )));
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        for curve in &mut sample.curves {
            for v in &mut curve.values {
                *v += normal.sample(rng);
            }
        }
    }
    sample.noisy = true;
    Ok(sample)
}

/// Concatenation of all τ values per pulse count, `N` ascending up to `n_bar`.
pub fn assemble_feature_vector(sample: &Sample, n_bar: u32) -> Result<Vec<f64>, DatasetError> {
    let pos = sample
        .curves
        .iter()
        .position(|c| c.n_pulses == n_bar)
        .ok_or(DatasetError::UnknownNBar(n_bar))?;
    Ok(sample.curves[..=pos]
        .iter()
        .flat_map(|c| c.values.iter().copied())
        .collect())
}

/// Generator for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 6:2:2 partition of `count`.
    pub fn proportional(count: usize) -> Self {
        let validation = count / 5;
        let test = count / 5;
        Self {
            train: count - validation - test,
            validation,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn shuffled(seed: u64, sizes: SplitSizes) -> Self {
        let mut order: Vec<usize> = (0..sizes.total()).collect();
        order.shuffle(&mut sample_rng(seed, SPLIT_STREAM));
        let test = order.split_off(sizes.train + sizes.validation);
        let validation = order.split_off(sizes.train);
        Self {
            train: order,
            validation,
            test,
        }
    }

    fn validate(&self, count: usize) -> bool {
        let mut seen = vec![false; count];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= count || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub ranges: ParamRanges,
    pub seed: u64,
    pub noise_std: f64,
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// 6:2:2 dataset of `count` noisy samples.
pub fn build_dataset(
    ranges: &ParamRanges,
    grid: &GridSpec,
    count: usize,
    seed: u64,
    noise_std: f64,
) -> Result<Dataset, DatasetError> {
    if count < 10 {
        return Err(DatasetError::InvalidConfig(format!(
            "dataset needs at least 10 samples (got {count})"
        )));
    }
    build_dataset_with_split(
        ranges,
        grid,
        SplitSizes::proportional(count),
        seed,
        noise_std,
    )
}

/// Dataset with explicit train/validation/test sizes.
pub fn build_dataset_with_split(
    ranges: &ParamRanges,
    grid: &GridSpec,
    sizes: SplitSizes,
    seed: u64,
    noise_std: f64,
) -> Result<Dataset, DatasetError> {
    ranges.validate()?;
    grid.validate()?;
    if sizes.train == 0 || sizes.validation == 0 {
        return Err(DatasetError::InvalidConfig(
            "train and validation splits must be nonempty".into(),
        ));
    }
    let samples = (0..sizes.total())
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let params = sample_params(ranges, &mut rng);
            add_noise(synthesize_sample(&params, grid)?, noise_std, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        grid: grid.clone(),
        ranges: *ranges,
        seed,
        noise_std,
        samples,
        split: Split::shuffled(seed, sizes),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature vectors and labels for the given sample indices.
    pub fn features(
        &self,
        indices: &[usize],
        n_bar: u32,
    ) -> Result<(Vec<Vec<f64>>, Vec<NsdParams>), DatasetError> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.push(assemble_feature_vector(&self.samples[i], n_bar)?);
            ys.push(self.samples[i].label);
        }
        Ok((xs, ys))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let noisy = self.samples.iter().any(|s| s.noisy);
        let _ = writeln!(out, "# dd-spectro dataset");
        let _ = writeln!(out, "format_version = {FORMAT_VERSION}");
        let _ = writeln!(out, "generator = {GENERATOR_ID}");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "noise_std = {}", self.noise_std);
        let _ = writeln!(out, "noisy = {noisy}");
        let _ = writeln!(out, "count = {}", self.samples.len());
        let r = &self.ranges;
        let _ = writeln!(out, "s0_range = {},{}", r.s0.lo, r.s0.hi);
        let _ = writeln!(
            out,
            "amplitude_range = {},{}",
            r.amplitude.lo, r.amplitude.hi
        );
        let _ = writeln!(out, "sigma_range = {},{}", r.sigma.lo, r.sigma.hi);
        let _ = writeln!(out, "omega_c = {}", r.omega_c);
        let windows = self
            .grid
            .tau_windows
            .iter()
            .map(|(a, b)| format!("{a}:{b}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "tau_windows = {windows}");
        let _ = writeln!(out, "delta_tau_ns = {}", self.grid.delta_tau_ns);
        let n_values = self
            .grid
            .n_values
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "n_values = {n_values}");
        let _ = writeln!(out, "split_train = {}", join(&self.split.train));
        let _ = writeln!(out, "split_validation = {}", join(&self.split.validation));
        let _ = writeln!(out, "split_test = {}", join(&self.split.test));
        let _ = writeln!(out, "{SAMPLES_MARKER}");
        for s in &self.samples {
            let _ = write!(
                out,
                "{},{},{}",
                s.label.s0, s.label.amplitude, s.label.sigma
            );
            for c in &s.curves {
                for v in &c.values {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_text().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn read_from(reader: impl Read) -> Result<Self, DatasetError> {
        let mut lines = BufReader::new(reader).lines();
        let mut header = Header::default();
        loop {
            let line = lines.next().ok_or_else(|| {
                DatasetError::MalformedHeader(format!("missing '{SAMPLES_MARKER}' marker"))
            })??;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == SAMPLES_MARKER {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DatasetError::MalformedHeader(format!("expected 'key = value', got '{line}'"))
            })?;
            header.insert(k.trim(), v.trim())?;
        }

        let version = header.take("format_version")?;
        if version != FORMAT_VERSION.to_string() {
            return Err(DatasetError::UnknownVersion(version));
        }
        let generator = header.take("generator")?;
        if generator != GENERATOR_ID {
            return Err(DatasetError::MalformedHeader(format!(
                "unknown generator '{generator}'"
            )));
        }
        let seed: u64 = header.parse("seed")?;
        let noise_std: f64 = header.parse("noise_std")?;
        let noisy: bool = header.parse("noisy")?;
        let count: usize = header.parse("count")?;
        let ranges = ParamRanges {
            s0: header.bounds("s0_range")?,
            amplitude: header.bounds("amplitude_range")?,
            sigma: header.bounds("sigma_range")?,
            omega_c: header.parse("omega_c")?,
        };
        let tau_windows = header
            .take("tau_windows")?
            .split(',')
            .map(|w| {
                let (a, b) = w.split_once(':').ok_or_else(|| {
                    DatasetError::MalformedHeader(format!("bad tau window '{w}'"))
                })?;
                Ok((
                    parse_field(a, "tau_windows")?,
                    parse_field(b, "tau_windows")?,
                ))
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let grid = GridSpec {
            tau_windows,
            delta_tau_ns: header.parse("delta_tau_ns")?,
            n_values: header.list("n_values")?,
        };
        let split = Split {
            train: header.list("split_train")?,
            validation: header.list("split_validation")?,
            test: header.list("split_test")?,
        };
        if let Some(extra) = header.leftover() {
            return Err(DatasetError::MalformedHeader(format!(
                "unknown key '{extra}'"
            )));
        }
        ranges
            .validate()
            .and_then(|_| grid.validate())
            .map_err(|e| DatasetError::MalformedHeader(e.to_string()))?;
        if !split.validate(count) {
            return Err(DatasetError::MalformedHeader(
                "split indices are not a partition of the samples".into(),
            ));
        }

        let taus = grid.tau_values();
        let per_curve = taus.len();
        let expected = 3 + per_curve * grid.n_values.len();
        let mut samples = Vec::with_capacity(count);
        let mut records = lines.enumerate().peekable();
        while let Some((record, line)) = records.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if samples.len() == count {
                return Err(DatasetError::MalformedRecord {
                    record,
                    reason: format!("more records than the declared count {count}"),
                });
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                let is_last = records.peek().is_none();
                if is_last && !samples.is_empty() && fields.len() < expected {
                    return Err(DatasetError::TruncatedRow(format!(
                        "record {record} has {} of {expected} columns",
                        fields.len()
                    )));
                }
                return Err(DatasetError::GridMismatch {
                    record,
                    expected,
                    found: fields.len(),
                });
            }
            let values = fields
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| DatasetError::MalformedRecord {
                            record,
                            reason: format!("'{f}': {e}"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let label =
                NsdParams::new(values[0], values[1], values[2], ranges.omega_c).map_err(|e| {
                    DatasetError::MalformedRecord {
                        record,
                        reason: e.to_string(),
                    }
                })?;
            let curves = grid
                .n_values
                .iter()
                .enumerate()
                .map(|(j, &n)| CoherenceCurve {
                    n_pulses: n,
                    tau_grid: taus.clone(),
                    values: values[3 + j * per_curve..3 + (j + 1) * per_curve].to_vec(),
                })
                .collect();
            samples.push(Sample {
                label,
                curves,
                noisy,
            });
        }
        if samples.len() != count {
            return Err(DatasetError::TruncatedRow(format!(
                "found {} of {count} declared records",
                samples.len()
            )));
        }
        Ok(Self {
            grid,
            ranges,
            seed,
            noise_std,
            samples,
            split,
        })
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, key: &str) -> Result<T, DatasetError>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse()
        .map_err(|e| DatasetError::MalformedHeader(format!("{key}: '{s}': {e}")))
}

#[derive(Default)]
struct Header(Vec<(String, String)>);

impl Header {
    fn insert(&mut self, k: &str, v: &str) -> Result<(), DatasetError> {
        if self.0.iter().any(|(key, _)| key == k) {
            return Err(DatasetError::MalformedHeader(format!(
                "duplicate key '{k}'"
            )));
        }
        self.0.push((k.to_string(), v.to_string()));
        Ok(())
    }

    fn take(&mut self, k: &str) -> Result<String, DatasetError> {
        let pos = self
            .0
            .iter()
            .position(|(key, _)| key == k)
            .ok_or_else(|| DatasetError::MalformedHeader(format!("missing key '{k}'")))?;
        Ok(self.0.remove(pos).1)
    }

    fn parse<T: std::str::FromStr>(&mut self, k: &str) -> Result<T, DatasetError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.take(k)?;
        parse_field(&v, k)
    }

    fn list<T: std::str::FromStr>(&mut self, k: &str) -> Result<Vec<T>, DatasetError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.take(k)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| parse_field(s, k)).collect()
    }

    fn bounds(&mut self, k: &str) -> Result<Bounds, DatasetError> {
        let v: Vec<f64> = self.list(k)?;
        match v.as_slice() {
            [lo, hi] => Ok(Bounds::new(*lo, *hi)),
            _ => Err(DatasetError::MalformedHeader(format!(
                "{k} needs exactly two values"
            ))),
        }
    }

    fn leftover(&self) -> Option<&str> {
        self.0.first().map(|(k, _)| k.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            tau_windows: vec![(3.4, 3.5), (5.7, 5.8)],
            delta_tau_ns: 50,
            n_values: vec![1, 8, 16],
        }
    }

    #[test]
    fn degenerate_ranges_return_constant() {
        let ranges = ParamRanges {
            s0: Bounds::new(1e-3, 1e-3),
            amplitude: Bounds::new(0.4, 0.4),
            sigma: Bounds::new(5e-3, 5e-3),
            ..ParamRanges::default()
        };
        let mut rng = sample_rng(3, 0);
        for _ in 0..10 {
            let p = sample_params(&ranges, &mut rng);
            assert_eq!((p.s0, p.amplitude, p.sigma), (1e-3, 0.4, 5e-3));
        }
    }

    #[test]
    fn fixed_seed_reproduces_draws() {
        let ranges = ParamRanges::default();
        let a: Vec<_> = {
            let mut rng = sample_rng(11, 4);
            (0..5).map(|_| sample_params(&ranges, &mut rng)).collect()
        };
        let b: Vec<_> = {
            let mut rng = sample_rng(11, 4);
            (0..5).map(|_| sample_params(&ranges, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn paper_grid_point_counts() {
        assert_eq!(GridSpec::paper(20).window_point_counts(), vec![19, 31]);
        assert_eq!(GridSpec::paper(1).window_point_counts(), vec![361, 601]);
        assert_eq!(GridSpec::paper(20).feature_len(16).unwrap(), 150);
        assert_eq!(GridSpec::paper(1).feature_len(48).unwrap(), 6734);
        let taus = GridSpec::paper(20).tau_values();
        assert_eq!(taus[0], 3.3);
        assert_eq!(taus[18], 3.66);
        assert_eq!(taus[19], 5.5);
        assert_eq!(*taus.last().unwrap(), 6.1);
        assert!(taus.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_validation() {
        let mut g = GridSpec::paper(20);
        g.n_values = vec![8, 16];
        assert!(g.validate().is_err());
        let mut g = GridSpec::paper(20);
        g.tau_windows = vec![(5.5, 6.1), (3.3, 3.66)];
        assert!(g.validate().is_err());
        assert!(GridSpec::paper(0).validate().is_err());
    }

    #[test]
    fn zero_noise_sample_is_flat() {
        let p = NsdParams::new(0.0, 0.0, 5e-3, ParamRanges::default().omega_c).unwrap();
        let s = synthesize_sample(&p, &small_grid()).unwrap();
        assert!(!s.noisy);
        assert!(s.curves.iter().all(|c| c.values.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn zero_std_noise_is_identity() {
        let p = NsdParams::new(2e-3, 0.5, 5e-3, ParamRanges::default().omega_c).unwrap();
        let clean = synthesize_sample(&p, &small_grid()).unwrap();
        let noisy = add_noise(clean.clone(), 0.0, &mut sample_rng(1, 0)).unwrap();
        assert!(noisy.noisy);
        assert_eq!(noisy.curves, clean.curves);
    }

    #[test]
    fn feature_vector_layout() {
        let p = NsdParams::new(2e-3, 0.5, 5e-3, ParamRanges::default().omega_c).unwrap();
        let s = synthesize_sample(&p, &small_grid()).unwrap();
        let x1 = assemble_feature_vector(&s, 1).unwrap();
        assert_eq!(x1, s.curves[0].values);
        let x16 = assemble_feature_vector(&s, 16).unwrap();
        assert_eq!(x16.len(), 3 * small_grid().points_per_curve());
        assert_eq!(&x16[x1.len()..2 * x1.len()], s.curves[1].values.as_slice());
        assert!(matches!(
            assemble_feature_vector(&s, 12),
            Err(DatasetError::UnknownNBar(12))
        ));
    }

    #[test]
    fn split_ratio() {
        let d = build_dataset(&ParamRanges::default(), &small_grid(), 10, 5, 0.05).unwrap();
        assert_eq!(
            (
                d.split.train.len(),
                d.split.validation.len(),
                d.split.test.len()
            ),
            (6, 2, 2)
        );
        assert!(d.split.validate(10));
        assert_eq!(
            SplitSizes::proportional(10_000),
            SplitSizes {
                train: 6000,
                validation: 2000,
                test: 2000
            }
        );
        assert!(build_dataset(&ParamRanges::default(), &small_grid(), 9, 5, 0.05).is_err());
    }

    #[test]
    fn round_trip_and_rejections() {
        let d = build_dataset(&ParamRanges::default(), &small_grid(), 10, 5, 0.05).unwrap();
        let text = d.to_text();
        let back = Dataset::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), text);

        let bad_version = text.replace("format_version = 1", "format_version = 2");
        assert!(matches!(
            Dataset::read_from(bad_version.as_bytes()),
            Err(DatasetError::UnknownVersion(_))
        ));

        let other_grid = text.replace("delta_tau_ns = 50", "delta_tau_ns = 25");
        assert!(matches!(
            Dataset::read_from(other_grid.as_bytes()),
            Err(DatasetError::GridMismatch { .. })
        ));

        let cut = &text[..text.len() - 40];
        assert!(matches!(
            Dataset::read_from(cut.as_bytes()),
            Err(DatasetError::TruncatedRow(_))
        ));

        let dropped: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(matches!(
            Dataset::read_from(dropped.as_bytes()),
            Err(DatasetError::TruncatedRow(_))
        ));

        let no_seed = text.replace("seed = 5\n", "");
        assert!(matches!(
            Dataset::read_from(no_seed.as_bytes()),
            Err(DatasetError::MalformedHeader(_))
        ));

        let extra_col = text.replacen("\n0.", "\n0.001,0.", 1);
        assert!(Dataset::read_from(extra_col.as_bytes()).is_err());
    }
}
