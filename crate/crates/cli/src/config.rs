//! `key = value` run configuration with file, environment and flag layers.
//!
//! Every key of [`KEYS`] can appear once in a config file and once as a
//! kebab-case flag. Later layers win: defaults, then the file, then
//! `MIST_SEED`, then flags.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mist_core::harness::{ExperimentConfig, HostKind, Protocol};
use mist_core::mist::AdaptLoss;
use mist_core::sparsity::{FisherVariant, ScoreMethod};
use thiserror::Error;

/// Environment variable that overrides `master_seed`.
pub const SEED_ENV: &str = "MIST_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown key '{key}'")]
    UnknownKey { key: String },
    #[error("key '{key}' given twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
    #[error("key '{key}': expected {expected}, got '{value}'")]
    Type {
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
}

/// A documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, kind: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, kind, help }
}

const PROTOCOLS: &str = "one of compare, ablation, sweep_k, sweep_d, batch_size, erosion";
const HOSTS: &str = "one of prototype, linear";
const SCORERS: &str = "one of mi_fisher, grad_magnitude, l2_norm, random";
const LOSSES: &str = "one of mi, cross_entropy";
const FISHERS: &str = "one of squared_sum, sum_of_squares";
const FLOAT: &str = "a number";
const COUNT: &str = "a non-negative integer";
const SEED: &str = "an unsigned 64-bit integer";
const BOOL: &str = "true or false";
const LIST: &str = "a comma-separated list of positive integers";
const PATH: &str = "a path";

pub const KEYS: &[KeySpec] = &[
    key("protocol", PROTOCOLS, "experiment grid to run"),
    key("host", HOSTS, "frozen-backbone classifier"),
    key("host_epochs", COUNT, "training epochs of the linear host"),
    key("host_lr", FLOAT, "learning rate of the linear host"),
    key("k_percent", FLOAT, "percent of backbone scalars selected per task"),
    key("d_percent", FLOAT, "percent of the selection dropped per batch"),
    key("epochs", COUNT, "pre-adaptation epochs per task"),
    key("lr", FLOAT, "pre-adaptation learning rate"),
    key("mi_batch_size", COUNT, "pre-adaptation mini-batch size"),
    key("tau", FLOAT, "InfoNCE temperature"),
    key("aug_noise_sigma", FLOAT, "std of the Gaussian jitter augmentation"),
    key("aug_mask_prob", FLOAT, "probability of masking an input coordinate"),
    key("normalize_features", BOOL, "L2-normalize features in the MI loss"),
    key("scorer", SCORERS, "parameter sensitivity score"),
    key("loss", LOSSES, "pre-adaptation objective"),
    key("fisher", FISHERS, "batch accumulation of the MI-Fisher score"),
    key("input_dim", COUNT, "input features of stream and backbone"),
    key("hidden_dims", LIST, "hidden layer widths"),
    key("feature_dim", COUNT, "backbone output width"),
    key("num_tasks", COUNT, "tasks in the stream"),
    key("classes_per_task", COUNT, "new classes per task"),
    key("samples_per_class", COUNT, "training samples per class"),
    key("test_samples_per_class", COUNT, "test samples per class"),
    key("shift_level", FLOAT, "domain shift between pretraining and tasks"),
    key("separation", FLOAT, "norm of the class means"),
    key("signal_dim", COUNT, "dimension of the class-mean subspace"),
    key("nuisance_dim", COUNT, "number of nuisance directions"),
    key("nuisance_std", FLOAT, "std along the nuisance directions"),
    key("pretrain_classes", COUNT, "classes of the pretraining domain"),
    key("pretrain_samples_per_class", COUNT, "pretraining samples per class"),
    key("pretrain_epochs", COUNT, "backbone pretraining epochs"),
    key("pretrain_lr", FLOAT, "backbone pretraining learning rate"),
    key("pretrain_batch_size", COUNT, "backbone pretraining batch size"),
    key("fft_epochs", COUNT, "full fine-tuning epochs per task"),
    key("fft_lr", FLOAT, "full fine-tuning learning rate"),
    key("master_seed", SEED, "seed of every random stream"),
    key("num_seeds", COUNT, "replicates per grid point"),
    key("jobs", COUNT, "grid points evaluated concurrently"),
    key("output_dir", PATH, "directory receiving the result files"),
    key(
        "checkpoint",
        PATH,
        "pretrained backbone to start from (empty: pretrain)",
    ),
];

/// Keys that do not influence results and stay out of the config snapshot.
const LOCAL_KEYS: &[&str] = &["output_dir", "checkpoint", "jobs"];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostName {
    Prototype,
    Linear,
}

impl fmt::Display for HostName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HostName::Prototype => "prototype",
            HostName::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub host: HostName,
    pub host_epochs: usize,
    pub host_lr: f64,
    /// Everything except the host, which is assembled by [`RunConfig::experiment`].
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Compare,
            host: HostName::Prototype,
            host_epochs: 100,
            host_lr: 0.1,
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("results"),
            checkpoint: None,
        }
    }
}

fn typed<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        key: key.into(),
        expected,
        value: value.into(),
    })
}

fn float(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = typed(key, value, FLOAT)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::Type {
            key: key.into(),
            expected: "a finite number",
            value: value.into(),
        })
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let bad = || ConfigError::Type {
        key: key.into(),
        expected: LIST,
        value: value.into(),
    };
    let dims = value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.contains(&0) {
        return Err(bad());
    }
    Ok(dims)
}

fn join(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let e = &mut self.experiment;
        match key {
            "protocol" => self.protocol = typed(key, value, PROTOCOLS)?,
            "host" => {
                self.host = match value {
                    "prototype" => HostName::Prototype,
                    "linear" => HostName::Linear,
                    _ => {
                        return Err(ConfigError::Type {
                            key: key.into(),
                            expected: HOSTS,
                            value: value.into(),
                        })
                    }
                }
            }
            "host_epochs" => self.host_epochs = typed(key, value, COUNT)?,
            "host_lr" => self.host_lr = float(key, value)?,
            "k_percent" => e.mist.k_percent = float(key, value)?,
            "d_percent" => e.mist.d_percent = float(key, value)?,
            "epochs" => e.mist.epochs = typed(key, value, COUNT)?,
            "lr" => e.mist.lr = float(key, value)?,
            "mi_batch_size" => e.mist.mi_batch_size = typed(key, value, COUNT)?,
            "tau" => e.mist.mi_cfg.tau = float(key, value)?,
            "aug_noise_sigma" => e.mist.mi_cfg.aug_noise_sigma = float(key, value)?,
            "aug_mask_prob" => e.mist.mi_cfg.aug_mask_prob = float(key, value)?,
            "normalize_features" => e.mist.mi_cfg.normalize_features = typed(key, value, BOOL)?,
            "scorer" => e.mist.scorer = typed::<ScoreMethod>(key, value, SCORERS)?,
            "loss" => e.mist.loss = typed::<AdaptLoss>(key, value, LOSSES)?,
            "fisher" => e.mist.fisher = typed::<FisherVariant>(key, value, FISHERS)?,
            "input_dim" => {
                let d = typed(key, value, COUNT)?;
                e.stream.input_dim = d;
                e.backbone.input_dim = d;
            }
            "hidden_dims" => e.backbone.hidden_dims = list(key, value)?,
            "feature_dim" => e.backbone.feature_dim = typed(key, value, COUNT)?,
            "num_tasks" => e.stream.num_tasks = typed(key, value, COUNT)?,
            "classes_per_task" => e.stream.classes_per_task = typed(key, value, COUNT)?,
            "samples_per_class" => e.stream.samples_per_class = typed(key, value, COUNT)?,
            "test_samples_per_class" => e.stream.test_samples_per_class = typed(key, value, COUNT)?,
            "shift_level" => e.stream.shift_level = float(key, value)?,
            "separation" => e.stream.separation = float(key, value)?,
            "signal_dim" => e.stream.signal_dim = typed(key, value, COUNT)?,
            "nuisance_dim" => e.stream.nuisance_dim = typed(key, value, COUNT)?,
            "nuisance_std" => e.stream.nuisance_std = float(key, value)?,
            "pretrain_classes" => e.stream.pretrain_classes = typed(key, value, COUNT)?,
            "pretrain_samples_per_class" => e.stream.pretrain_samples_per_class = typed(key, value, COUNT)?,
            "pretrain_epochs" => e.pretrain_epochs = typed(key, value, COUNT)?,
            "pretrain_lr" => e.pretrain_lr = float(key, value)?,
            "pretrain_batch_size" => e.pretrain_batch_size = typed(key, value, COUNT)?,
            "fft_epochs" => e.fft_epochs = typed(key, value, COUNT)?,
            "fft_lr" => e.fft_lr = float(key, value)?,
            "master_seed" => e.master_seed = typed(key, value, SEED)?,
            "num_seeds" => e.num_seeds = typed(key, value, COUNT)?,
            "jobs" => e.jobs = typed(key, value, COUNT)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Textual value of one key, in a form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let e = &self.experiment;
        let m = &e.mist;
        let s = &e.stream;
        Some(match key {
            "protocol" => self.protocol.to_string(),
            "host" => self.host.to_string(),
            "host_epochs" => self.host_epochs.to_string(),
            "host_lr" => self.host_lr.to_string(),
            "k_percent" => m.k_percent.to_string(),
            "d_percent" => m.d_percent.to_string(),
            "epochs" => m.epochs.to_string(),
            "lr" => m.lr.to_string(),
            "mi_batch_size" => m.mi_batch_size.to_string(),
            "tau" => m.mi_cfg.tau.to_string(),
            "aug_noise_sigma" => m.mi_cfg.aug_noise_sigma.to_string(),
            "aug_mask_prob" => m.mi_cfg.aug_mask_prob.to_string(),
            "normalize_features" => m.mi_cfg.normalize_features.to_string(),
            "scorer" => m.scorer.to_string(),
            "loss" => match m.loss {
                AdaptLoss::Mi => "mi".into(),
                AdaptLoss::CrossEntropy => "cross_entropy".into(),
            },
            "fisher" => match m.fisher {
                FisherVariant::SquaredSum => "squared_sum".into(),
                FisherVariant::SumOfSquares => "sum_of_squares".into(),
            },
            "input_dim" => s.input_dim.to_string(),
            "hidden_dims" => join(&e.backbone.hidden_dims),
            "feature_dim" => e.backbone.feature_dim.to_string(),
            "num_tasks" => s.num_tasks.to_string(),
            "classes_per_task" => s.classes_per_task.to_string(),
            "samples_per_class" => s.samples_per_class.to_string(),
            "test_samples_per_class" => s.test_samples_per_class.to_string(),
            "shift_level" => s.shift_level.to_string(),
            "separation" => s.separation.to_string(),
            "signal_dim" => s.signal_dim.to_string(),
            "nuisance_dim" => s.nuisance_dim.to_string(),
            "nuisance_std" => s.nuisance_std.to_string(),
            "pretrain_classes" => s.pretrain_classes.to_string(),
            "pretrain_samples_per_class" => s.pretrain_samples_per_class.to_string(),
            "pretrain_epochs" => e.pretrain_epochs.to_string(),
            "pretrain_lr" => e.pretrain_lr.to_string(),
            "pretrain_batch_size" => e.pretrain_batch_size.to_string(),
            "fft_epochs" => e.fft_epochs.to_string(),
            "fft_lr" => e.fft_lr.to_string(),
            "master_seed" => e.master_seed.to_string(),
            "num_seeds" => e.num_seeds.to_string(),
            "jobs" => e.jobs.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint" => self
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => return None,
        })
    }

    /// The harness configuration, host included.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            host: match self.host {
                HostName::Prototype => HostKind::Prototype,
                HostName::Linear => HostKind::Linear {
                    epochs: self.host_epochs,
                    lr: self.host_lr,
                },
            },
            ..self.experiment.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.host_lr <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "host_lr must be positive, got {}",
                self.host_lr
            )));
        }
        if self.experiment.jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be at least 1".into()));
        }
        self.experiment()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Every result-relevant key with its value. Parsing this back through
    /// [`RunConfig::set`] reproduces the run.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .filter(|k| !LOCAL_KEYS.contains(&k.name))
            .map(|k| (k.name.to_string(), self.get(k.name).expect("every listed key renders")))
            .collect()
    }

    /// The configuration as a config file.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, self.get(k.name).expect("every listed key renders")))
            .collect()
    }
}

/// One `key = value` assignment and the line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits config text into entries. Blank lines and `#` comments are
/// skipped; unknown and repeated keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: raw.trim().into(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: raw.trim().into(),
            });
        }
        if !KEYS.iter().any(|s| s.name == k) {
            return Err(ConfigError::UnknownKey { key: k.into() });
        }
        if let Some(&first) = seen.get(k) {
            return Err(ConfigError::Duplicate {
                key: k.into(),
                first,
                second: line,
            });
        }
        seen.insert(k.into(), line);
        out.push(Entry {
            key: k.into(),
            value: v.into(),
            line,
        });
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.into(),
        message: e.to_string(),
    })?;
    parse_entries(&text)
}

/// Layers file entries, the seed variable and flag overrides over the
/// defaults, then validates the result.
pub fn parse_config(
    file: &[Entry],
    seed_env: Option<&str>,
    flags: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for e in file {
        cfg.set(&e.key, &e.value)?;
    }
    if let Some(seed) = seed_env {
        cfg.experiment.master_seed = typed(SEED_ENV, seed.trim(), SEED)?;
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config(&parse_entries("").unwrap(), None, &[]).unwrap();
        let m = &cfg.experiment.mist;
        assert_eq!((m.k_percent, m.d_percent, m.epochs, m.lr), (5.0, 90.0, 20, 1e-4));
        assert_eq!(m.mi_cfg.tau, 0.5);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\nk_percent = 10   # inline\n  lr=0.5\n";
        let cfg = parse_config(&parse_entries(text).unwrap(), None, &[]).unwrap();
        assert_eq!(cfg.experiment.mist.k_percent, 10.0);
        assert_eq!(cfg.experiment.mist.lr, 0.5);
    }

    #[test]
    fn out_of_range_percent() {
        let err = parse_config(&parse_entries("k_percent = 150").unwrap(), None, &[]).unwrap_err();
        assert!(
            matches!(err, ConfigError::Invalid(ref m) if m.contains("k_percent")),
            "{err}"
        );
    }

    #[test]
    fn flags_beat_file() {
        let file = parse_entries("d_percent = 90").unwrap();
        let cfg = parse_config(&file, None, &[("d_percent".into(), "80".into())]).unwrap();
        assert_eq!(cfg.experiment.mist.d_percent, 80.0);
    }

    #[test]
    fn seed_variable_sits_between_file_and_flags() {
        let file = parse_entries("master_seed = 1").unwrap();
        assert_eq!(parse_config(&file, Some("7"), &[]).unwrap().experiment.master_seed, 7);
        let flags = [("master_seed".to_string(), "9".to_string())];
        assert_eq!(
            parse_config(&file, Some("7"), &flags).unwrap().experiment.master_seed,
            9
        );
        assert!(matches!(
            parse_config(&file, Some("x"), &[]),
            Err(ConfigError::Type { ref key, .. }) if key == SEED_ENV
        ));
    }

    #[test]
    fn unknown_duplicate_and_malformed() {
        assert_eq!(
            parse_entries("k = 1").unwrap_err(),
            ConfigError::UnknownKey { key: "k".into() }
        );
        assert_eq!(
            parse_entries("lr = 1\nlr = 2").unwrap_err(),
            ConfigError::Duplicate {
                key: "lr".into(),
                first: 1,
                second: 2
            }
        );
        assert!(matches!(
            parse_entries("lr 1"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(parse_entries("= 1"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn type_errors_name_key_and_type() {
        let err = parse_config(&parse_entries("epochs = many").unwrap(), None, &[]).unwrap_err();
        assert_eq!(
            err.to_string(),
            "key 'epochs': expected a non-negative integer, got 'many'"
        );
        let err = parse_config(&parse_entries("scorer = fisher").unwrap(), None, &[]).unwrap_err();
        assert!(err.to_string().contains("one of mi_fisher"));
        assert!(parse_config(&parse_entries("lr = inf").unwrap(), None, &[]).is_err());
        assert!(parse_config(&parse_entries("hidden_dims = 4,0").unwrap(), None, &[]).is_err());
    }

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("hidden_dims", "32, 16").unwrap();
        cfg.set("loss", "ce").unwrap();
        cfg.set("checkpoint", "b.ckpt").unwrap();
        cfg.set("host", "linear").unwrap();
        for k in KEYS {
            let v = cfg.get(k.name).unwrap_or_else(|| panic!("{} has no getter", k.name));
            let mut other = cfg.clone();
            other.set(k.name, &v).unwrap();
            assert_eq!(other, cfg, "{}", k.name);
        }
        let back = parse_config(&parse_entries(&cfg.to_text()).unwrap(), None, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn snapshot_leaves_out_local_keys() {
        let snap = RunConfig::default().snapshot();
        assert!(snap.contains_key("k_percent"));
        assert!(!snap.contains_key("output_dir"));
        assert!(!snap.contains_key("jobs"));
        assert_eq!(snap.len(), KEYS.len() - LOCAL_KEYS.len());
    }

    #[test]
    fn input_dim_sets_stream_and_backbone() {
        let mut cfg = RunConfig::default();
        cfg.set("input_dim", "40").unwrap();
        assert_eq!(cfg.experiment.stream.input_dim, 40);
        assert_eq!(cfg.experiment.backbone.input_dim, 40);
        assert_eq!(flag_name("mi_batch_size"), "mi-batch-size");
    }
}
