//! Run configuration: one text file of dotted `key=value` pairs.

use std::path::Path;

use ppf_core::agent::{AgentConfig, OptimizerKind};
use ppf_core::importance::{ImportanceMethod, ImportanceParams};
use ppf_core::model::{ModelConfig, TrainConfig};
use ppf_core::predictor::{CollectGrid, PredictorConfig, TrainSettings};
use ppf_core::PpfError;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSettings {
    pub seed: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_calib: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 20_000,
            n_heldout: 1024,
            n_calib: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub corpus: CorpusSettings,
    pub train: TrainConfig,
    pub importance: ImportanceParams,
    pub grid: CollectGrid,
    pub predictor: TrainSettings,
    /// Network layout; the input shape is always taken from the data.
    pub net: PredictorConfig,
    pub agent: AgentConfig,
    /// Seed for predictor splits, predictor init and agent training.
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            model_seed: 7,
            corpus: CorpusSettings::default(),
            train: TrainConfig::default(),
            importance: ImportanceParams::default(),
            grid: CollectGrid::default(),
            predictor: TrainSettings::default(),
            net: PredictorConfig::for_input([1, 1, 1]),
            agent: AgentConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_float_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (a, b, s): (f64, f64, f64) = (num(key, start)?, num(key, stop)?, num(key, step)?);
            if !(s > 0.0) || b < a {
                return Err(CliError::Config(format!("{key}: range {v:?} is empty or has a non-positive step")));
            }
            let n = ((b - a) / s + 1e-9).floor() as usize + 1;
            Ok((0..n).map(|i| ((a + i as f64 * s) * 1e12).round() / 1e12).collect())
        }
        [_] => v.split(',').map(|x| num(key, x)).collect(),
        _ => Err(CliError::Config(format!("{key}: expected start:stop:step or a list, got {v:?}"))),
    }
}

impl RunConfig {
    /// Applies one dotted setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let unknown = || CliError::Config(format!("unknown config key {key:?}"));
        match key.split_once('.') {
            Some(("model", "seed")) => self.model_seed = num(key, v)?,
            Some(("model", k)) => {
                if !self.model.set(k, v)? {
                    return Err(unknown());
                }
            }
            Some(("corpus", k)) => match k {
                "seed" => self.corpus.seed = num(key, v)?,
                "n_train" => self.corpus.n_train = num(key, v)?,
                "n_heldout" => self.corpus.n_heldout = num(key, v)?,
                "n_calib" => self.corpus.n_calib = num(key, v)?,
                _ => return Err(unknown()),
            },
            Some(("train", k)) => match k {
                "steps" => self.train.steps = num(key, v)?,
                "lr" => self.train.lr = num(key, v)?,
                "batch" => self.train.batch = num(key, v)?,
                "seed" => self.train.seed = num(key, v)?,
                _ => return Err(unknown()),
            },
            Some(("importance", k)) => match k {
                "outlier_multiplier" => self.importance.outlier_multiplier = num(key, v)?,
                "tail_fraction" => self.importance.tail_fraction = num(key, v)?,
                _ => return Err(unknown()),
            },
            Some(("collect", k)) => match k {
                "ratios" => self.grid.ratios = parse_float_list(key, v)?,
                "scales" => self.grid.scales = parse_float_list(key, v)?,
                "methods" => {
                    self.grid.methods = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.parse::<ImportanceMethod>())
                        .collect::<Result<_, _>>()?
                }
                _ => return Err(unknown()),
            },
            Some(("predictor", k)) => match k {
                "epochs" => self.predictor.epochs = num(key, v)?,
                "lr" => self.predictor.lr = num(key, v)?,
                "momentum" => self.predictor.momentum = num(key, v)?,
                "test_fraction" => self.predictor.test_fraction = num(key, v)?,
                "input" => return Err(CliError::Config("predictor.input is derived from the data".into())),
                other => {
                    if !self.net.set(other, v)? {
                        return Err(unknown());
                    }
                }
            },
            Some(("agent", k)) => {
                let a = &mut self.agent;
                match k {
                    "episodes" => a.episodes = num(key, v)?,
                    "window.alpha" => a.window.alpha = num(key, v)?,
                    "window.beta" => a.window.beta = num(key, v)?,
                    "window.k" => a.window.k = num(key, v)?,
                    "noise0" => a.noise0 = num(key, v)?,
                    "noise_decay" => a.noise_decay = num(key, v)?,
                    "capacity" => a.capacity = num(key, v)?,
                    "batch" => a.batch = num(key, v)?,
                    "hidden" => a.hidden = num(key, v)?,
                    "tau" => a.tau = num(key, v)?,
                    "gamma" => a.gamma = num(key, v)?,
                    "actor_lr" => a.actor_lr = num(key, v)?,
                    "critic_lr" => a.critic_lr = num(key, v)?,
                    "optimizer" => a.optimizer = OptimizerKind::parse(v)?,
                    "updates_per_episode" => a.updates_per_episode = num(key, v)?,
                    _ => return Err(unknown()),
                }
            }
            None if key == "seed" => self.seed = num(key, v)?,
            None if key == "workers" => self.workers = num(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Fills derived seeds and checks every sub-configuration.
    pub fn finalize(mut self) -> Result<Self, CliError> {
        self.predictor.seed = self.seed;
        self.agent.seed = self.seed;
        self.model.validate()?;
        self.agent.validate()?;
        if self.train.steps > 0 && !(self.train.lr > 0.0) {
            return Err(CliError::Config("train.lr must be positive".into()));
        }
        if !(0.0 < self.predictor.test_fraction && self.predictor.test_fraction < 1.0) {
            return Err(CliError::Config("predictor.test_fraction must lie in (0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.corpus.n_calib == 0 || self.corpus.n_heldout < 2 || self.corpus.n_train < 2 {
            return Err(CliError::Config("corpus slices are too small".into()));
        }
        Ok(self)
    }
}

impl From<PpfError> for CliError {
    fn from(e: PpfError) -> Self {
        CliError::Core(e)
    }
}
