use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{MlpConfig, MlpError, MlpParams, ParamScaler, OUTPUT_DIM};
use crate::dataset::Bounds;
use crate::physics::NsdParams;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const WEIGHTS_MARKER: &str = "[weights]";

/// A trained regressor with everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub params: MlpParams,
    pub config: MlpConfig,
    pub scaler: ParamScaler,
    pub omega_c: f64,
    pub n_bar: u32,
    pub dataset_seed: u64,
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn predict(&self, features: &[f64]) -> Result<NsdParams, MlpError> {
        super::predict_params(self, features)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let dims = self
            .params
            .dims()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "# dd-spectro mlp model");
        let _ = writeln!(out, "format_version = {MODEL_FORMAT_VERSION}");
        let _ = writeln!(out, "input_dim = {}", self.input_dim());
        let _ = writeln!(out, "layer_dims = {dims}");
        let _ = writeln!(out, "n_bar = {}", self.n_bar);
        let _ = writeln!(out, "hidden_layers = {}", c.hidden_layers);
        let _ = writeln!(out, "hidden_dim = {}", c.hidden_dim);
        let _ = writeln!(out, "learning_rate = {}", c.learning_rate);
        let _ = writeln!(out, "batch_size = {}", c.batch_size);
        let _ = writeln!(out, "dropout = {}", c.dropout);
        let _ = writeln!(out, "weight_decay = {}", c.weight_decay);
        let _ = writeln!(out, "max_epochs = {}", c.max_epochs);
        let _ = writeln!(out, "patience = {}", c.patience);
        let s = &self.scaler;
        let _ = writeln!(out, "s0_range = {},{}", s.s0.lo, s.s0.hi);
        let _ = writeln!(
            out,
            "amplitude_range = {},{}",
            s.amplitude.lo, s.amplitude.hi
        );
        let _ = writeln!(out, "sigma_range = {},{}", s.sigma.lo, s.sigma.hi);
        let _ = writeln!(out, "omega_c = {}", self.omega_c);
        let _ = writeln!(out, "dataset_seed = {}", self.dataset_seed);
        let _ = writeln!(out, "{WEIGHTS_MARKER}");
        for l in 0..self.params.layer_count() {
            let (rows, cols) = (self.params.dims()[l], self.params.dims()[l + 1]);
            let _ = writeln!(out, "layer {} {rows} {cols}", l + 1);
            for row in self.params.weights(l).chunks(cols) {
                let _ = writeln!(out, "{}", join_f64(row));
            }
            let _ = writeln!(out, "{}", join_f64(self.params.bias(l)));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MlpError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MlpError> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn read_from(reader: impl Read) -> Result<Self, MlpError> {
        let bad = |m: String| MlpError::MalformedModel(m);
        let mut lines = BufReader::new(reader).lines();
        let mut header: Vec<(String, String)> = Vec::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing '{WEIGHTS_MARKER}' marker")))??;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == WEIGHTS_MARKER {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected 'key = value', got '{line}'")))?;
            header.push((k.trim().to_string(), v.trim().to_string()));
        }
        let get = |k: &str| -> Result<&str, MlpError> {
            header
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| MlpError::MalformedModel(format!("missing key '{k}'")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, MlpError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim()
                .parse()
                .map_err(|e| MlpError::MalformedModel(format!("{k}: '{v}': {e}")))
        }
        let bounds = |k: &str| -> Result<Bounds, MlpError> {
            let v = get(k)?;
            let (lo, hi) = v
                .split_once(',')
                .ok_or_else(|| MlpError::MalformedModel(format!("{k} needs two values")))?;
            Ok(Bounds::new(num(k, lo)?, num(k, hi)?))
        };

        let version = get("format_version")?;
        if version != MODEL_FORMAT_VERSION.to_string() {
            return Err(MlpError::UnknownVersion(version.to_string()));
        }
        let input_dim: usize = num("input_dim", get("input_dim")?)?;
        let dims = get("layer_dims")?
            .split(',')
            .map(|d| num::<usize>("layer_dims", d))
            .collect::<Result<Vec<_>, _>>()?;
        let config = MlpConfig {
            hidden_layers: num("hidden_layers", get("hidden_layers")?)?,
            hidden_dim: num("hidden_dim", get("hidden_dim")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            dropout: num("dropout", get("dropout")?)?,
            weight_decay: num("weight_decay", get("weight_decay")?)?,
            max_epochs: num("max_epochs", get("max_epochs")?)?,
            patience: num("patience", get("patience")?)?,
        };
        config.validate()?;
        if dims.first() != Some(&input_dim)
            || dims.last() != Some(&OUTPUT_DIM)
            || dims != config.layer_dims(input_dim)
        {
            return Err(bad(format!(
                "layer dims {dims:?} do not chain from input {input_dim} through the configured \
                 hidden layers to {OUTPUT_DIM} outputs"
            )));
        }
        let scaler = ParamScaler {
            s0: bounds("s0_range")?,
            amplitude: bounds("amplitude_range")?,
            sigma: bounds("sigma_range")?,
        };
        let omega_c: f64 = num("omega_c", get("omega_c")?)?;
        let n_bar: u32 = num("n_bar", get("n_bar")?)?;
        let dataset_seed: u64 = num("dataset_seed", get("dataset_seed")?)?;

        let mut next = || -> Result<String, MlpError> {
            loop {
                let line = lines.next().ok_or_else(|| {
                    MlpError::MalformedModel("unexpected end of weights".into())
                })??;
                if !line.trim().is_empty() {
                    return Ok(line);
                }
            }
        };
        let parse_row = |line: &str, expected: usize| -> Result<Vec<f64>, MlpError> {
            let row = line
                .split(',')
                .map(|v| num::<f64>("weights", v))
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != expected {
                return Err(MlpError::MalformedModel(format!(
                    "expected {expected} values per row, found {}",
                    row.len()
                )));
            }
            Ok(row)
        };
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (rows, cols) = (dims[l], dims[l + 1]);
            let tag = next()?;
            if tag.split_whitespace().collect::<Vec<_>>()
                != [
                    "layer",
                    &(l + 1).to_string(),
                    &rows.to_string(),
                    &cols.to_string(),
                ]
            {
                return Err(bad(format!(
                    "expected 'layer {} {rows} {cols}', got '{tag}'",
                    l + 1
                )));
            }
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                w.extend(parse_row(&next()?, cols)?);
            }
            let b = parse_row(&next()?, cols)?;
            layers.push((w, b));
        }
        let params = MlpParams::from_layers(&dims, &layers)?;
        if !params.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(Self {
            params,
            config,
            scaler,
            omega_c,
            n_bar,
            dataset_seed,
        })
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_rng, ParamRanges};

    fn model() -> MlpModel {
        let config = MlpConfig {
            hidden_layers: 2,
            hidden_dim: 5,
            ..MlpConfig::preset(16).unwrap()
        };
        let params = MlpParams::glorot(&config.layer_dims(7), &mut sample_rng(2, 0)).unwrap();
        let ranges = ParamRanges::default();
        MlpModel {
            params,
            config,
            scaler: ParamScaler::from_ranges(&ranges),
            omega_c: ranges.omega_c,
            n_bar: 16,
            dataset_seed: 99,
        }
    }

    #[test]
    fn round_trip() {
        let m = model();
        let back = MlpModel::read_from(m.to_text().as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }

    #[test]
    fn rejects_broken_chain() {
        let text = model()
            .to_text()
            .replace("layer_dims = 7,5,5,3", "layer_dims = 7,5,4,3");
        assert!(matches!(
            MlpModel::read_from(text.as_bytes()),
            Err(MlpError::MalformedModel(_))
        ));
    }

    #[test]
    fn rejects_unknown_version() {
        let text = model()
            .to_text()
            .replace("format_version = 1", "format_version = 7");
        assert!(matches!(
            MlpModel::read_from(text.as_bytes()),
            Err(MlpError::UnknownVersion(_))
        ));
    }

    #[test]
    fn rejects_truncated_weights() {
        let text = model().to_text();
        let cut: String = text
            .lines()
            .take(text.lines().count() - 2)
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(MlpModel::read_from(cut.as_bytes()).is_err());
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = model();
        let x = vec![0.5; 7];
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert!(matches!(
            m.predict(&[0.5; 6]),
            Err(MlpError::DimensionMismatch { .. })
        ));
    }
}
