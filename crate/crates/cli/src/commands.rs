use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dd_spectro::dataset::{
    build_dataset, build_dataset_with_split, Bounds, SplitSizes, DEFAULT_NOISE_STD, PAPER_N_VALUES,
};
use dd_spectro::eval::{
    self, compare_methods_sweep, report_sidecar, write_report_csv, RowStatus, SweepRow,
};
use dd_spectro::hs::{self, HarmonicAssignment, HsError};
use dd_spectro::mlp::{
    fit, random_search, MlpConfig, MlpModel, SearchSpace, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE,
};
use dd_spectro::{Dataset, GridSpec, ParamRanges};

use crate::settings::Settings;
use crate::{runtime, usage, CliError, Common};

const LOCK_NAME: &str = ".dd-spectro.lock";
const RUN_CONFIG: &str = "run_config.txt";

pub fn model_file_name(n_bar: u32) -> String {
    format!("model_nbar{n_bar}.txt")
}

/// Output directory held by a single writer for the lifetime of the value.
struct OutputDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    fn acquire(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path)
            .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))?;
        let lock = path.join(LOCK_NAME);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .and_then(|mut f| writeln!(f, "{}", std::process::id()))
            .map_err(|e| {
                runtime(format!(
                    "output directory {} is in use ({}): {e}",
                    path.display(),
                    lock.display()
                ))
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
    }

    fn create(&self, name: &str) -> Result<File, CliError> {
        let p = self.file(name);
        File::create(&p).map_err(|e| runtime(format!("cannot write {}: {e}", p.display())))
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// `lo,hi` pair for a parameter range.
#[derive(Debug, Clone, Copy)]
struct RangeArg(Bounds);

impl FromStr for RangeArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s.split_once(',').ok_or("expected 'lo,hi'")?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
        Ok(Self(Bounds::new(parse(lo)?, parse(hi)?)))
    }
}

impl fmt::Display for RangeArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.0.lo, self.0.hi)
    }
}

fn path_setting(s: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let flag = flag.map(|p| p.to_string_lossy().into_owned());
    s.require::<String>(key, flag).map(PathBuf::from)
}

fn start(common: &Common, command: &str, allowed: &[&str]) -> Result<Settings, CliError> {
    let mut keys = vec!["seed", "out"];
    keys.extend_from_slice(allowed);
    let mut s = Settings::load(common.config.as_deref(), &keys)?;
    s.record("command", command);
    Ok(s)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| usage(format!("cannot load dataset {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<MlpModel, CliError> {
    MlpModel::load(path).map_err(|e| usage(format!("cannot load model {}: {e}", path.display())))
}

fn check_nbar(dataset: &Dataset, n_bar: u32) -> Result<(), CliError> {
    dataset
        .grid
        .n_values_up_to(n_bar)
        .map(|_| ())
        .map_err(usage)
}

pub fn gen(common: &Common, count: Option<usize>) -> Result<(), CliError> {
    let mut s = start(
        common,
        "gen",
        &[
            "count",
            "noise_std",
            "delta_tau_ns",
            "s0_range",
            "amplitude_range",
            "sigma_range",
            "split_train",
            "split_validation",
            "split_test",
        ],
    )?;
    let seed = s.resolve("seed", common.seed, Some(0))?.unwrap_or_default();
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let noise_std: f64 = s
        .resolve("noise_std", None, Some(DEFAULT_NOISE_STD))?
        .unwrap_or_default();
    let delta: u32 = s
        .resolve("delta_tau_ns", None, Some(20))?
        .unwrap_or_default();
    let defaults = ParamRanges::default();
    let ranges = ParamRanges {
        s0: s
            .resolve("s0_range", None, Some(RangeArg(defaults.s0)))?
            .unwrap()
            .0,
        amplitude: s
            .resolve("amplitude_range", None, Some(RangeArg(defaults.amplitude)))?
            .unwrap()
            .0,
        sigma: s
            .resolve("sigma_range", None, Some(RangeArg(defaults.sigma)))?
            .unwrap()
            .0,
        omega_c: defaults.omega_c,
    };
    let grid = GridSpec::paper(delta);
    let explicit = [
        s.resolve::<usize>("split_train", None, None)?,
        s.resolve::<usize>("split_validation", None, None)?,
        s.resolve::<usize>("split_test", None, None)?,
    ];
    let dataset = match explicit {
        [Some(train), Some(validation), Some(test)] => {
            if count.is_some() {
                return Err(usage(
                    "give either count or all three split sizes, not both",
                ));
            }
            build_dataset_with_split(
                &ranges,
                &grid,
                SplitSizes {
                    train,
                    validation,
                    test,
                },
                seed,
                noise_std,
            )
        }
        [None, None, None] => {
            let count = s.resolve("count", count, Some(10_000))?.unwrap_or_default();
            build_dataset(&ranges, &grid, count, seed, noise_std)
        }
        _ => return Err(usage("split sizes must be given together")),
    }
    .map_err(usage)?;
    let dir = OutputDir::acquire(&out)?;
    dataset.save(dir.file("dataset.txt")).map_err(runtime)?;
    dir.write(RUN_CONFIG, s.to_text())
}

fn resolve_mlp_config(s: &mut Settings, n_bar: u32) -> Result<MlpConfig, CliError> {
    let base = MlpConfig::preset(n_bar).unwrap_or(MlpConfig {
        hidden_layers: 2,
        hidden_dim: 64,
        learning_rate: 1e-3,
        batch_size: 8,
        dropout: 0.0,
        weight_decay: 0.0,
        max_epochs: DEFAULT_MAX_EPOCHS,
        patience: DEFAULT_PATIENCE,
    });
    let config = MlpConfig {
        hidden_layers: s
            .resolve("hidden_layers", None, Some(base.hidden_layers))?
            .unwrap(),
        hidden_dim: s
            .resolve("hidden_dim", None, Some(base.hidden_dim))?
            .unwrap(),
        learning_rate: s
            .resolve("learning_rate", None, Some(base.learning_rate))?
            .unwrap(),
        batch_size: s
            .resolve("batch_size", None, Some(base.batch_size))?
            .unwrap(),
        dropout: s.resolve("dropout", None, Some(base.dropout))?.unwrap(),
        weight_decay: s
            .resolve("weight_decay", None, Some(base.weight_decay))?
            .unwrap(),
        max_epochs: s
            .resolve("max_epochs", None, Some(base.max_epochs))?
            .unwrap(),
        patience: s.resolve("patience", None, Some(base.patience))?.unwrap(),
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

const MLP_KEYS: [&str; 8] = [
    "hidden_layers",
    "hidden_dim",
    "learning_rate",
    "batch_size",
    "dropout",
    "weight_decay",
    "max_epochs",
    "patience",
];

fn config_text(c: &MlpConfig) -> String {
    format!(
        "hidden_layers = {}\nhidden_dim = {}\nlearning_rate = {}\nbatch_size = {}\ndropout = {}\n\
         weight_decay = {}\nmax_epochs = {}\npatience = {}\n",
        c.hidden_layers,
        c.hidden_dim,
        c.learning_rate,
        c.batch_size,
        c.dropout,
        c.weight_decay,
        c.max_epochs,
        c.patience
    )
}

pub fn train(common: &Common, dataset: Option<PathBuf>, nbar: Option<u32>) -> Result<(), CliError> {
    let mut allowed = vec!["dataset", "nbar"];
    allowed.extend(MLP_KEYS);
    let mut s = start(common, "train", &allowed)?;
    let seed = s.resolve("seed", common.seed, Some(0))?.unwrap_or_default();
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let data_path = path_setting(&mut s, "dataset", dataset)?;
    let n_bar: u32 = s.require("nbar", nbar)?;
    let config = resolve_mlp_config(&mut s, n_bar)?;
    let data = load_dataset(&data_path)?;
    check_nbar(&data, n_bar)?;

    let dir = OutputDir::acquire(&out)?;
    let (model, history) = fit(&data, n_bar, &config, seed).map_err(runtime)?;
    model
        .save(dir.file(&model_file_name(n_bar)))
        .map_err(runtime)?;
    let mut csv = String::from("epoch,batch_loss,train_mse,val_mse\n");
    for e in 0..history.epochs() {
        csv += &format!(
            "{e},{},{},{}\n",
            history.batch_loss[e], history.train_mse[e], history.val_mse[e]
        );
    }
    dir.write(&format!("history_nbar{n_bar}.csv"), csv)?;
    let summary = serde_json::json!({
        "n_bar": n_bar,
        "seed": seed,
        "dataset_seed": data.seed,
        "epochs": history.epochs(),
        "best_epoch": history.best_epoch,
        "best_val_mse": history.best_val_mse(),
        "final_val_mse": history.val_mse.last(),
        "stopped_early": history.stopped_early,
        "model_sha256": model.content_hash(),
    });
    dir.write(
        &format!("train_summary_nbar{n_bar}.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).map_err(runtime)?
        ),
    )?;
    dir.write(RUN_CONFIG, s.to_text())
}

pub fn search(
    common: &Common,
    dataset: Option<PathBuf>,
    nbar: Option<u32>,
    trials: Option<usize>,
) -> Result<(), CliError> {
    let mut s = start(
        common,
        "search",
        &["dataset", "nbar", "trials", "trial_epochs"],
    )?;
    let seed = s.resolve("seed", common.seed, Some(0))?.unwrap_or_default();
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let data_path = path_setting(&mut s, "dataset", dataset)?;
    let n_bar: u32 = s.require("nbar", nbar)?;
    let trials: usize = s.resolve("trials", trials, Some(20))?.unwrap_or_default();
    let defaults = SearchSpace::default();
    let space = SearchSpace {
        trial_epochs: s
            .resolve("trial_epochs", None, Some(defaults.trial_epochs))?
            .unwrap(),
        ..defaults
    };
    space.validate().map_err(usage)?;
    let data = load_dataset(&data_path)?;
    check_nbar(&data, n_bar)?;

    let dir = OutputDir::acquire(&out)?;
    let outcome = random_search(&data, n_bar, &space, trials, seed).map_err(runtime)?;
    let mut csv = String::from(
        "trial,hidden_layers,hidden_dim,learning_rate,batch_size,dropout,weight_decay,param_count,val_mse\n",
    );
    for t in &outcome.trials {
        let c = &t.config;
        csv += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.index,
            c.hidden_layers,
            c.hidden_dim,
            c.learning_rate,
            c.batch_size,
            c.dropout,
            c.weight_decay,
            t.param_count,
            t.val_mse.map_or(String::new(), |v| v.to_string())
        );
    }
    dir.write(&format!("search_nbar{n_bar}.csv"), csv)?;
    let best = MlpConfig {
        max_epochs: DEFAULT_MAX_EPOCHS,
        patience: DEFAULT_PATIENCE,
        ..outcome.best
    };
    dir.write(&format!("best_config_nbar{n_bar}.txt"), config_text(&best))?;
    dir.write(RUN_CONFIG, s.to_text())
}

fn read_feature_rows(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read input {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(format!("input line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn predict(
    common: &Common,
    model: Option<PathBuf>,
    input: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut s = start(common, "predict", &["model", "input"])?;
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let model_path = path_setting(&mut s, "model", model)?;
    let input_path = path_setting(&mut s, "input", input)?;
    let model = load_model(&model_path)?;
    let rows = read_feature_rows(&input_path)?;
    if rows.is_empty() {
        return Err(usage("input holds no feature vectors"));
    }
    let expected = model.input_dim();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != expected) {
        return Err(usage(format!(
            "feature vector {} has length {}, model expects {expected}",
            i + 1,
            r.len()
        )));
    }
    let predictions = rows
        .iter()
        .map(|r| model.predict(r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;

    let dir = OutputDir::acquire(&out)?;
    let mut csv = String::from("s0_mhz,amplitude_mhz,sigma_mhz\n");
    for p in predictions {
        csv += &format!("{},{},{}\n", p.s0, p.amplitude, p.sigma);
    }
    dir.write("predictions.csv", csv)?;
    s.record("model_sha256", model.content_hash());
    dir.write(RUN_CONFIG, s.to_text())
}

pub fn hs(common: &Common, dataset: Option<PathBuf>, nbar: Option<u32>) -> Result<(), CliError> {
    let mut s = start(common, "hs", &["dataset", "nbar", "sample"])?;
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let data_path = path_setting(&mut s, "dataset", dataset)?;
    let n_bar: u32 = s.require("nbar", nbar)?;
    let data = load_dataset(&data_path)?;
    check_nbar(&data, n_bar)?;
    if !eval::hs_applicable(&data, n_bar) {
        return Err(usage(format!(
            "the baseline needs at least {} pulse counts up to the cap (nbar {n_bar})",
            hs::MIN_DECAY_POINTS
        )));
    }
    let first = data.split.test.first().copied();
    let sample: usize = s
        .resolve("sample", None, first)?
        .ok_or_else(|| usage("dataset has an empty test split; set 'sample'"))?;
    if sample >= data.len() {
        return Err(usage(format!(
            "sample {sample} out of range ({} samples)",
            data.len()
        )));
    }

    let assignment = HarmonicAssignment::default();
    let dir = OutputDir::acquire(&out)?;
    let mut csv = String::from("index,s0_mhz,amplitude_mhz,sigma_mhz,reduced_chi_sq,status\n");
    for &i in &data.split.test {
        let line = match hs::reconstruct(&data.samples[i], n_bar, &data.ranges, &assignment) {
            Ok(r) => {
                let p = r.fit.params;
                let status = if r.fit.residual_flag {
                    "poor_fit"
                } else {
                    "ok"
                };
                format!(
                    "{i},{},{},{},{},{status}",
                    p.s0, p.amplitude, p.sigma, r.fit.reduced_chi_sq
                )
            }
            Err(HsError::FitFailed {
                best,
                reduced_chi_sq,
                ..
            }) => format!(
                "{i},{},{},{},{reduced_chi_sq},not_converged",
                best.s0, best.amplitude, best.sigma
            ),
            Err(_) => format!("{i},,,,,insufficient_data"),
        };
        csv += &line;
        csv.push('\n');
    }
    dir.write(&format!("hs_nbar{n_bar}.csv"), csv)?;

    match hs::reconstruct(&data.samples[sample], n_bar, &data.ranges, &assignment) {
        Ok(r) => {
            let f = dir.create(&format!("spectrum_nbar{n_bar}_sample{sample}.csv"))?;
            hs::write_spectrum_csv(&r.points, f).map_err(runtime)?;
        }
        Err(e) => log::warn!("no spectrum export for sample {sample}: {e}"),
    }
    dir.write(RUN_CONFIG, s.to_text())
}

fn write_reports(
    dir: &OutputDir,
    data: &Dataset,
    rows: &[SweepRow],
    hashes: &BTreeMap<u32, String>,
) -> Result<(), CliError> {
    let f = dir.create("report.csv")?;
    write_report_csv(rows.iter().filter_map(SweepRow::report), f).map_err(runtime)?;
    let sidecar = report_sidecar(data, rows, hashes, None);
    dir.write(
        "report.json",
        format!(
            "{}\n",
            serde_json::to_string_pretty(&sidecar).map_err(runtime)?
        ),
    )?;
    for row in rows {
        if let RowStatus::Present(r) = &row.status {
            let mut csv = String::from(
                "index,true_s0,true_amplitude,true_sigma,est_s0,est_amplitude,est_sigma,chi_nu_sq,mae,failed\n",
            );
            for rec in &r.samples {
                csv += &format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    rec.index,
                    rec.truth.s0,
                    rec.truth.amplitude,
                    rec.truth.sigma,
                    rec.estimate.s0,
                    rec.estimate.amplitude,
                    rec.estimate.sigma,
                    rec.chi_nu_sq.map_or(String::new(), |c| c.to_string()),
                    rec.mae,
                    rec.failed
                );
            }
            dir.write(
                &format!(
                    "samples_{}_nbar{}.csv",
                    row.method.to_string().to_lowercase(),
                    row.n_bar
                ),
                csv,
            )?;
        }
    }
    Ok(())
}

pub fn eval(
    common: &Common,
    dataset: Option<PathBuf>,
    model: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut s = start(common, "eval", &["dataset", "model"])?;
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let data_path = path_setting(&mut s, "dataset", dataset)?;
    let model_path = path_setting(&mut s, "model", model)?;
    let data = load_dataset(&data_path)?;
    let model = load_model(&model_path)?;
    let n_bar = model.n_bar;
    check_nbar(&data, n_bar)?;
    if data.grid.feature_len(n_bar).map_err(usage)? != model.input_dim() {
        return Err(usage("model input width does not match the dataset grid"));
    }
    s.record("model_sha256", model.content_hash());

    let dir = OutputDir::acquire(&out)?;
    let hashes = BTreeMap::from([(n_bar, model.content_hash())]);
    let models = BTreeMap::from([(n_bar, model)]);
    let rows = compare_methods_sweep(&data, &models, &[n_bar], &HarmonicAssignment::default())
        .map_err(runtime)?;
    write_reports(&dir, &data, &rows, &hashes)?;
    dir.write(RUN_CONFIG, s.to_text())
}

fn parse_nbars(text: &str) -> Result<Vec<u32>, CliError> {
    let list = text
        .split(',')
        .map(|v| v.trim().parse::<u32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("nbars '{text}': {e}")))?;
    if list.is_empty() {
        return Err(usage("nbars list is empty"));
    }
    Ok(list)
}

pub fn sweep(
    common: &Common,
    dataset: Option<PathBuf>,
    model: Option<PathBuf>,
    nbars: Option<String>,
) -> Result<(), CliError> {
    let mut s = start(common, "sweep", &["dataset", "model", "nbars"])?;
    let out = path_setting(&mut s, "out", common.out.clone())?;
    let data_path = path_setting(&mut s, "dataset", dataset)?;
    let model_dir = path_setting(&mut s, "model", model)?;
    let default_list = PAPER_N_VALUES.map(|n| n.to_string()).join(",");
    let n_bars = parse_nbars(
        &s.resolve("nbars", nbars, Some(default_list))?
            .unwrap_or_default(),
    )?;
    let data = load_dataset(&data_path)?;
    for &n in &n_bars {
        check_nbar(&data, n)?;
    }
    if !model_dir.is_dir() {
        return Err(usage(format!(
            "model directory {} not found",
            model_dir.display()
        )));
    }
    let mut models = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    for &n in &n_bars {
        let path = model_dir.join(model_file_name(n));
        if !path.exists() {
            continue;
        }
        let m = load_model(&path)?;
        if m.n_bar != n || m.input_dim() != data.grid.feature_len(n).map_err(usage)? {
            return Err(usage(format!(
                "{} does not fit cap {n} on this grid",
                path.display()
            )));
        }
        hashes.insert(n, m.content_hash());
        models.insert(n, m);
    }

    let dir = OutputDir::acquire(&out)?;
    let rows = compare_methods_sweep(&data, &models, &n_bars, &HarmonicAssignment::default())
        .map_err(runtime)?;
    write_reports(&dir, &data, &rows, &hashes)?;
    dir.write(RUN_CONFIG, s.to_text())
}
