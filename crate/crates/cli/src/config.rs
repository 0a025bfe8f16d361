//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stable_koopman::data::{
    load_manifest, load_trajectories, synth_handwriting_like, synth_stable_spiral, Dataset,
    Equilibrium, HandwritingSpec, ShapeKind, SourceFormat, SpiralSpec,
};
use stable_koopman::model::{KInit, ModelConfig};
use stable_koopman::projection::ProjectionMode;
use stable_koopman::trainer::TrainConfig;
use stable_koopman::{Activation, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Center {
    None,
    Final,
    Point(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<String>,
    /// Directory that relative dataset paths are resolved against.
    pub base: PathBuf,
    pub validation: usize,
    pub n_traj: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub dt: Option<f64>,
    pub center: Center,
    pub normalize: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            base: PathBuf::from("."),
            validation: 2,
            n_traj: 7,
            noise: 0.0,
            data_seed: 0,
            dt: Some(0.1),
            center: Center::Final,
            normalize: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            out: PathBuf::from("run"),
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("dataset", "manifest file, directory of CSVs, single CSV, or synthetic:<s-curve|hook|spiral-in|spiral> (required)"),
    ("validation", "trajectories held out when the source has no split"),
    ("n_traj", "synthetic demonstrations"),
    ("noise", "synthetic noise standard deviation"),
    ("data_seed", "synthetic generator seed"),
    ("dt", "resampling step in seconds, or none"),
    ("center", "final, none, or an explicit point x1,x2,..."),
    ("normalize", "scale each dimension to unit max-abs over the train split"),
    ("lifted_dim", "lifted dimension d"),
    ("hidden", "hidden layer widths of the encoder (mirrored in the decoder)"),
    ("activation", "tanh, relu or identity"),
    ("k_init", "K starts as this multiple of the identity"),
    ("s_noise", "uniform noise half-width added to S = I"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("epsilon", "Adam denominator floor"),
    ("epochs", "training epochs"),
    ("batch_size", "trajectories per iteration, 0 for full batch"),
    ("lambda", "prediction loss weight"),
    ("mu", "linearity loss weight"),
    ("nu", "reconstruction loss weight"),
    ("horizon", "multi-step loss horizon H"),
    ("alpha", "barrier relaxation factor in (0, 1]"),
    ("mode", "symmetric or asymmetric"),
    ("margin", "extra barrier margin after projection"),
    ("stable", "project K after every step"),
    ("seed", "initialization and shuffling seed"),
    ("eval_every", "validation interval in epochs, 0 to disable"),
    ("patience", "early-stop patience in epochs, 0 to disable"),
    ("checkpoint_every", "checkpoint interval in epochs, 0 for final only"),
    ("condition_cap", "largest allowed condition number of S"),
    ("out", "output directory"),
];

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Contract(format!(
        "invalid value {value:?} for `{key}`: expected {what}"
    ))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, what))
}

fn list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim(), what)).collect()
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self {
            base: path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
            ..Self::default()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, found {line:?}")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Sets one key; the same names as in the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "dataset" => self.dataset = Some(value.to_string()),
            "validation" => self.validation = num(key, value, "a count")?,
            "n_traj" => self.n_traj = num(key, value, "a count")?,
            "noise" => self.noise = num(key, value, "a number")?,
            "data_seed" => self.data_seed = num(key, value, "an integer")?,
            "dt" => {
                self.dt = match value {
                    "none" => None,
                    v => Some(num(key, v, "a step in seconds or none")?),
                }
            }
            "center" => {
                self.center = match value {
                    "none" => Center::None,
                    "final" => Center::Final,
                    v => Center::Point(list(key, v, "final, none or a point")?),
                }
            }
            "normalize" => self.normalize = boolean(key, value)?,
            "lifted_dim" => m.lifted_dim = num(key, value, "a count")?,
            "hidden" => m.hidden = list(key, value, "comma separated widths")?,
            "activation" => {
                m.activation = value
                    .parse::<Activation>()
                    .map_err(|_| bad(key, value, "tanh, relu or identity"))?
            }
            "k_init" => m.k_init = KInit::ScaledIdentity(num(key, value, "a number")?),
            "s_noise" => m.s_noise = num(key, value, "a number")?,
            "learning_rate" => t.optimizer.learning_rate = num(key, value, "a number")?,
            "beta1" => t.optimizer.beta1 = num(key, value, "a number")?,
            "beta2" => t.optimizer.beta2 = num(key, value, "a number")?,
            "epsilon" => t.optimizer.epsilon = num(key, value, "a number")?,
            "epochs" => t.epochs = num(key, value, "a count")?,
            "batch_size" => t.batch_size = num(key, value, "a count")?,
            "lambda" => t.weights.pred = num(key, value, "a number")?,
            "mu" => t.weights.lin = num(key, value, "a number")?,
            "nu" => t.weights.rec = num(key, value, "a number")?,
            "horizon" => t.weights.horizon = num(key, value, "a count")?,
            "alpha" => t.alpha = num(key, value, "a number")?,
            "mode" => {
                t.mode = value
                    .parse::<ProjectionMode>()
                    .map_err(|_| bad(key, value, "symmetric or asymmetric"))?
            }
            "margin" => t.margin = num(key, value, "a number")?,
            "stable" => t.stable = boolean(key, value)?,
            "seed" => {
                let s = num(key, value, "an integer")?;
                t.seed = s;
                m.seed = s;
            }
            "eval_every" => t.eval_every = num(key, value, "a count")?,
            "patience" => {
                t.patience = match num(key, value, "a count")? {
                    0 => None,
                    p => Some(p),
                }
            }
            "checkpoint_every" => self.checkpoint_every = num(key, value, "a count")?,
            "condition_cap" => t.condition_cap = num(key, value, "a number")?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::Contract(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of every key except `out`, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let m = &self.model;
        let KInit::ScaledIdentity(k0) = m.k_init;
        let values = [
            self.dataset.clone().unwrap_or_default(),
            self.validation.to_string(),
            self.n_traj.to_string(),
            format!("{:?}", self.noise),
            self.data_seed.to_string(),
            self.dt.map_or("none".to_string(), |d| format!("{d:?}")),
            match &self.center {
                Center::None => "none".into(),
                Center::Final => "final".into(),
                Center::Point(p) => join(p),
            },
            self.normalize.to_string(),
            m.lifted_dim.to_string(),
            m.hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            m.activation.name().to_string(),
            format!("{k0:?}"),
            format!("{:?}", m.s_noise),
            format!("{:?}", t.optimizer.learning_rate),
            format!("{:?}", t.optimizer.beta1),
            format!("{:?}", t.optimizer.beta2),
            format!("{:?}", t.optimizer.epsilon),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            format!("{:?}", t.weights.pred),
            format!("{:?}", t.weights.lin),
            format!("{:?}", t.weights.rec),
            t.weights.horizon.to_string(),
            format!("{:?}", t.alpha),
            t.mode.name().to_string(),
            format!("{:?}", t.margin),
            t.stable.to_string(),
            t.seed.to_string(),
            t.eval_every.to_string(),
            t.patience.unwrap_or(0).to_string(),
            self.checkpoint_every.to_string(),
            format!("{:?}", t.condition_cap),
        ];
        KEYS.iter()
            .filter(|(k, _)| *k != "out")
            .zip(values)
            .map(|((k, _), v)| (k.to_string(), v))
            .collect()
    }

    /// Key reference with defaults, for `--help`.
    pub fn help_text() -> String {
        let defaults = Self::default().entries();
        let mut s = String::from("Config keys (file lines `key = value`, or `--set key=value`):\n");
        for (key, doc) in KEYS {
            let value = match *key {
                "out" => "run".to_string(),
                "dataset" => "(none)".to_string(),
                _ => defaults
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default(),
            };
            let _ = writeln!(s, "  {key:<17} {doc} [default: {value}]");
        }
        s
    }

    /// Loads the dataset and applies resampling, centering and
    /// normalization.
    pub fn prepared_dataset(&self) -> Result<Dataset> {
        let spec = self
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Contract("missing required key `dataset`".into()))?;
        let mut ds = load_dataset(
            spec,
            &self.base,
            self.validation,
            self.n_traj,
            self.noise,
            self.data_seed,
        )?;
        if let Some(dt) = self.dt {
            ds = ds.resample(dt)?;
        }
        ds = match &self.center {
            Center::None => ds,
            Center::Final => ds.center_to_equilibrium(Equilibrium::FinalPoint)?,
            Center::Point(p) => ds.center_to_equilibrium(Equilibrium::Explicit(p.clone()))?,
        };
        if self.normalize {
            ds = ds.normalize()?;
        }
        Ok(ds)
    }
}

/// Resolves a dataset argument to raw trajectories with a split.
pub fn load_dataset(
    spec: &str,
    base: &Path,
    validation: usize,
    n_traj: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if let Some(kind) = spec.strip_prefix("synthetic:") {
        let ds = if kind == "spiral" {
            synth_stable_spiral(&SpiralSpec {
                n_traj,
                noise,
                seed,
                ..SpiralSpec::default()
            })?
        } else {
            let shape: ShapeKind = kind.parse()?;
            synth_handwriting_like(&HandwritingSpec {
                n_traj,
                shape,
                noise,
                seed,
                ..HandwritingSpec::default()
            })?
        };
        return ds.with_validation_tail(validation);
    }
    let path = if Path::new(spec).is_absolute() {
        PathBuf::from(spec)
    } else {
        base.join(spec)
    };
    if path.is_dir() {
        let trajs = load_trajectories(&path, SourceFormat::DirectoryOfCsv)?;
        Dataset::all_train(trajs)?.with_validation_tail(validation)
    } else if path.extension().is_some_and(|e| e == "csv") {
        Dataset::all_train(load_trajectories(&path, SourceFormat::CsvPerTrajectory)?)
    } else {
        load_manifest(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = RunConfig::default();
        assert_eq!(c.model.hidden, vec![50, 50, 50]);
        assert_eq!(c.model.lifted_dim, 20);
        assert_eq!(c.dt, Some(0.1));
        let w = c.train.weights;
        assert_eq!((w.pred, w.lin, w.rec), (1.0, 0.1, 1.0));
        assert_eq!(c.train.alpha, 1.0);
        assert_eq!(c.train.optimizer.learning_rate, 1e-3);
        assert_eq!(c.entries().len(), KEYS.len() - 1);
    }

    #[test]
    fn every_entry_round_trips_through_set() {
        let mut c = RunConfig::default();
        c.set("dataset", "synthetic:hook").unwrap();
        c.set("center", "1.5,-2").unwrap();
        c.set("patience", "7").unwrap();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("learning_rat", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        assert!(c.set("mode", "sideways").is_err());
        assert!(c.set("stable", "maybe").is_err());
        assert!(RunConfig::help_text().contains("learning_rate"));
    }
}
