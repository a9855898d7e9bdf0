use dd_spectro::dataset::{build_dataset, synthesize_sample, DEFAULT_NOISE_STD};
use dd_spectro::{Dataset, GridSpec, ParamRanges};
use statrs::distribution::{ContinuousCDF, Normal};

fn dataset(count: usize, seed: u64) -> Dataset {
    build_dataset(
        &ParamRanges::default(),
        &GridSpec::paper(20),
        count,
        seed,
        DEFAULT_NOISE_STD,
    )
    .unwrap()
}

fn residuals(ds: &Dataset) -> Vec<f64> {
    ds.samples
        .iter()
        .flat_map(|s| {
            let clean = synthesize_sample(&s.label, &ds.grid).unwrap();
            s.curves
                .iter()
                .zip(clean.curves)
                .flat_map(|(n, c)| {
                    n.values
                        .iter()
                        .zip(c.values)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn noise_has_requested_spread_and_shape() {
    let ds = dataset(40, 17);
    let mut r = residuals(&ds);
    assert!(r.len() >= 10_000);
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.049..=0.051).contains(&std), "std {std}");

    r.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, DEFAULT_NOISE_STD).unwrap();
    let d = r
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / n.sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn clean_curves_are_valid_coherences() {
    let ranges = ParamRanges::default();
    let ds = dataset(10, 3);
    for s in &ds.samples {
        assert!(ranges.contains(&s.label));
        let clean = synthesize_sample(&s.label, &ds.grid).unwrap();
        for c in &clean.curves {
            assert!(c.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}

#[test]
fn labels_follow_uniform_ranges() {
    let ranges = ParamRanges::default();
    let ds = build_dataset(&ranges, &GridSpec::paper(60), 600, 21, DEFAULT_NOISE_STD).unwrap();
    let n = ds.len() as f64;
    for (b, get) in [
        (
            ranges.s0,
            (|p: &dd_spectro::NsdParams| p.s0) as fn(&_) -> f64,
        ),
        (ranges.amplitude, |p| p.amplitude),
        (ranges.sigma, |p| p.sigma),
    ] {
        let mean = ds.samples.iter().map(|s| get(&s.label)).sum::<f64>() / n;
        let se = b.width() / 12f64.sqrt() / n.sqrt();
        assert!(
            (mean - b.midpoint()).abs() < 4.0 * se,
            "mean {mean} vs {}",
            b.midpoint()
        );
    }
}

#[test]
fn split_is_disjoint_and_complete() {
    let ds = dataset(50, 8);
    let mut all: Vec<usize> = ds
        .split
        .train
        .iter()
        .chain(&ds.split.validation)
        .chain(&ds.split.test)
        .copied()
        .collect();
    assert_eq!(
        (
            ds.split.train.len(),
            ds.split.validation.len(),
            ds.split.test.len()
        ),
        (30, 10, 10)
    );
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
}

#[test]
fn save_load_round_trip_is_byte_identical() {
    let ds = dataset(12, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.to_text(), ds.to_text());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), ds.to_text());
    assert_eq!(dataset(12, 4).to_text(), ds.to_text());
}
