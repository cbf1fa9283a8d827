//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys, repeated
//! keys and unparsable values are errors. [`RunConfig::resolved`] renders
//! every field, defaults included, in a form [`RunConfig::parse`] reads back.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use neuroevo_core::aco::AcoConfig;
use neuroevo_core::dist::{config_digest, Digest, MasterConfig};
use neuroevo_core::flightdata::DEFAULT_TARGET;
use neuroevo_core::trainer::{BatchMode, TrainConfig};
use neuroevo_core::Arch;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{0} is required")]
    Missing(&'static str),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub const KEYS: &[&str] = &[
    "train_dir",
    "test_dir",
    "channels",
    "target",
    "arch",
    "window",
    "horizon",
    "epochs",
    "learning_rate",
    "shuffle",
    "batch",
    "clip_norm",
    "seed",
    "ants",
    "iterations",
    "max_pheromone",
    "reward_factor",
    "workers",
    "bind",
    "connect",
    "connect_attempts",
    "timeout_floor_s",
    "out",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Input channels in slot order; empty means every channel of the
    /// training flights in file order.
    pub channels: Vec<String>,
    pub target: String,
    pub arch: Arch,
    /// Optional restatement of the window length; must match the architecture.
    pub window: Option<usize>,
    pub horizon: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
    pub batch: BatchMode,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub ants: usize,
    pub iterations: usize,
    pub max_pheromone: f64,
    pub reward_factor: f64,
    /// Worker threads for `--role local`.
    pub workers: usize,
    pub bind: String,
    pub connect: String,
    pub connect_attempts: usize,
    pub timeout_floor_s: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let aco = AcoConfig::default();
        Self {
            train_dir: None,
            test_dir: None,
            channels: Vec::new(),
            target: DEFAULT_TARGET.to_string(),
            arch: Arch::I,
            window: None,
            horizon: 10,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            shuffle: train.shuffle,
            batch: train.batch,
            clip_norm: train.clip_norm,
            seed: train.seed,
            ants: aco.n_ants,
            iterations: aco.n_iterations,
            max_pheromone: aco.max_pheromone,
            reward_factor: aco.reward_factor,
            workers: 1,
            bind: "0.0.0.0:7070".into(),
            connect: "127.0.0.1:7070".into(),
            connect_attempts: 10,
            timeout_floor_s: 60.0,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), reason: format!("{v:?}: {e}") })
}

fn parse_batch(v: &str) -> Result<BatchMode, ConfigError> {
    match v {
        "per_sample" => Ok(BatchMode::PerSample),
        "full_batch" => Ok(BatchMode::FullBatch),
        _ => Err(ConfigError::BadValue { key: "batch".into(), reason: format!("{v:?}: expected per_sample or full_batch") }),
    }
}

fn batch_name(b: BatchMode) -> &'static str {
    match b {
        BatchMode::PerSample => "per_sample",
        BatchMode::FullBatch => "full_batch",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let opt_path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "train_dir" => self.train_dir = opt_path(v),
            "test_dir" => self.test_dir = opt_path(v),
            "channels" => self.channels = v.split(',').map(str::trim).filter(|c| !c.is_empty()).map(String::from).collect(),
            "target" => self.target = v.to_string(),
            "arch" => self.arch = parse_value(key, v)?,
            "window" => self.window = Some(parse_value(key, v)?),
            "horizon" => self.horizon = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "shuffle" => self.shuffle = parse_value(key, v)?,
            "batch" => self.batch = parse_batch(v)?,
            "clip_norm" => self.clip_norm = if v.is_empty() || v == "none" { None } else { Some(parse_value(key, v)?) },
            "seed" => self.seed = parse_value(key, v)?,
            "ants" => self.ants = parse_value(key, v)?,
            "iterations" => self.iterations = parse_value(key, v)?,
            "max_pheromone" => self.max_pheromone = parse_value(key, v)?,
            "reward_factor" => self.reward_factor = parse_value(key, v)?,
            "workers" => self.workers = parse_value(key, v)?,
            "bind" => self.bind = v.to_string(),
            "connect" => self.connect = v.to_string(),
            "connect_attempts" => self.connect_attempts = parse_value(key, v)?,
            "timeout_floor_s" => self.timeout_floor_s = parse_value(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    /// Checks cross-field constraints. Called by [`RunConfig::parse`]; call
    /// again after applying command-line overrides.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| Err(ConfigError::BadValue { key: key.into(), reason });
        if let Some(w) = self.window {
            if w != self.arch.window_len() {
                return bad("window", format!("architecture {} uses {} time steps, not {w}", self.arch, self.arch.window_len()));
            }
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1".into());
        }
        if self.channels.len() > neuroevo_core::flightdata::N_PARAMS {
            return bad("channels", format!("at most {} input channels", neuroevo_core::flightdata::N_PARAMS));
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        if self.connect_attempts == 0 {
            return bad("connect_attempts", "must be at least 1".into());
        }
        if !(self.timeout_floor_s.is_finite() && self.timeout_floor_s > 0.0) {
            return bad("timeout_floor_s", "must be a positive number of seconds".into());
        }
        self.train_config().validate().map_err(|e| ConfigError::BadValue { key: "training".into(), reason: e.to_string() })?;
        self.aco_config().validate().map_err(|e| ConfigError::BadValue { key: "aco".into(), reason: e.to_string() })?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            shuffle: self.shuffle,
            batch: self.batch,
            clip_norm: self.clip_norm,
        }
    }

    pub fn aco_config(&self) -> AcoConfig {
        AcoConfig {
            n_ants: self.ants,
            n_iterations: self.iterations,
            max_pheromone: self.max_pheromone,
            reward_factor: self.reward_factor,
            seed: self.seed,
        }
    }

    pub fn master_config(&self) -> MasterConfig {
        MasterConfig { timeout_floor: Duration::from_secs_f64(self.timeout_floor_s), ..MasterConfig::default() }
    }

    pub fn require_data(&self) -> Result<(&Path, &Path), ConfigError> {
        Ok((self.train_dir.as_deref().ok_or(ConfigError::Missing("train_dir"))?, self.test_dir.as_deref().ok_or(ConfigError::Missing("test_dir"))?))
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("train_dir", path(&self.train_dir));
        put("test_dir", path(&self.test_dir));
        put("channels", self.channels.join(","));
        put("target", self.target.clone());
        put("arch", self.arch.to_string());
        put("window", self.arch.window_len().to_string());
        put("horizon", self.horizon.to_string());
        put("epochs", self.epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("shuffle", self.shuffle.to_string());
        put("batch", batch_name(self.batch).into());
        put("clip_norm", self.clip_norm.map(|c| c.to_string()).unwrap_or_else(|| "none".into()));
        put("seed", self.seed.to_string());
        put("ants", self.ants.to_string());
        put("iterations", self.iterations.to_string());
        put("max_pheromone", self.max_pheromone.to_string());
        put("reward_factor", self.reward_factor.to_string());
        put("workers", self.workers.to_string());
        put("bind", self.bind.clone());
        put("connect", self.connect.clone());
        put("connect_attempts", self.connect_attempts.to_string());
        put("timeout_floor_s", self.timeout_floor_s.to_string());
        put("out", self.out.display().to_string());
        s
    }

    /// Digest of the settings that decide a mesh's fitness. Paths, addresses,
    /// worker count and output directory are left out so that machines with
    /// different layouts can still cooperate.
    pub fn digest(&self) -> Digest {
        let text = format!(
            "channels={}\ntarget={}\narch={}\nhorizon={}\nepochs={}\nlearning_rate={}\nshuffle={}\nbatch={}\nclip_norm={:?}\nseed={}\n",
            self.channels.join(","),
            self.target,
            self.arch,
            self.horizon,
            self.epochs,
            self.learning_rate,
            self.shuffle,
            batch_name(self.batch),
            self.clip_norm,
            self.seed,
        );
        config_digest(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_parse_back() {
        let cfg = RunConfig::default();
        let mut back = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(back.window, Some(10));
        back.window = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn values_are_read() {
        let cfg = RunConfig::parse("# comment\n\narch = III\nhorizon=5\nchannels = A, B,Vib\nclip_norm = 2.5\nbatch = full_batch\n").unwrap();
        assert_eq!(cfg.arch, Arch::III);
        assert_eq!(cfg.horizon, 5);
        assert_eq!(cfg.channels, ["A", "B", "Vib"]);
        assert_eq!(cfg.clip_norm, Some(2.5));
        assert_eq!(cfg.batch, BatchMode::FullBatch);
        assert_eq!(RunConfig::parse(&cfg.resolved()).unwrap().clip_norm, Some(2.5));
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(RunConfig::parse("epochs = 3\nepoch = 4"), Err(ConfigError::UnknownKey { line: 2, .. })));
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(matches!(RunConfig::parse("epochs"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(RunConfig::parse("epochs = ten"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(RunConfig::parse("arch = III\nwindow = 10"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::parse("learning_rate = -1"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn digest_ignores_placement() {
        let a = RunConfig::parse("seed = 4\nout = a\nbind = 1.2.3.4:1").unwrap();
        let b = RunConfig::parse("seed = 4\nout = b\nworkers = 3").unwrap();
        let c = RunConfig::parse("seed = 5").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
