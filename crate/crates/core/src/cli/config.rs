//! Flat `key = value` run configuration.
//!
//! Lines are `namespace.key = value`; `#` starts a comment. Lists are
//! comma-separated. Every key has a default and unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::icil::{DecodeVia, TaskFamily};
use crate::tokenizer::TokenizerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Scripted-expert episodes from the toy suite.
    Expert,
    /// Minimum-jerk 7-dim action sequences.
    MinJerk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepTarget {
    /// Standalone tokenizer training; reconstruction, perplexity, smoothness.
    Tokenizer,
    /// Full in-context policy training and rollouts.
    Icil,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,

    pub data_path: Option<PathBuf>,
    pub data_mode: DataMode,
    pub data_episodes: usize,
    pub data_horizon: usize,
    pub data_segments: usize,

    pub tokenizer_kind: TokenizerKind,
    pub tokenizer_action_dim: usize,
    pub tokenizer_latent_dim: usize,
    pub tokenizer_codebook_size: usize,
    pub tokenizer_hidden: Vec<usize>,
    pub tokenizer_alpha: f64,
    pub tokenizer_beta: f64,
    pub tokenizer_gamma: f64,
    /// `None` follows the kind's default.
    pub tokenizer_lipschitz: Option<bool>,

    pub train_steps: u64,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_warmup: u64,

    pub smoothness_checkpoints: Vec<PathBuf>,
    pub smoothness_trajectories: usize,

    pub icil_kinds: Vec<TokenizerKind>,
    pub icil_tasks: Vec<TaskFamily>,
    pub icil_seeds: Vec<u64>,
    pub icil_steps: u64,
    pub icil_batch_size: usize,
    pub icil_lr: f64,
    pub icil_train_episodes: usize,
    pub icil_rollouts: usize,
    pub icil_decode: DecodeVia,
    pub icil_freeze_tokenizer: bool,

    pub sweep_target: SweepTarget,
    pub sweep_kind: TokenizerKind,
    pub sweep_codebook_sizes: Vec<usize>,
    pub sweep_lipschitz: Vec<bool>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            workers: 1,
            data_path: None,
            data_mode: DataMode::Expert,
            data_episodes: 100,
            data_horizon: 50,
            data_segments: 3,
            tokenizer_kind: TokenizerKind::LipVqVae,
            tokenizer_action_dim: 7,
            tokenizer_latent_dim: 8,
            tokenizer_codebook_size: 1024,
            tokenizer_hidden: vec![256, 256],
            tokenizer_alpha: 1.0,
            tokenizer_beta: 0.25,
            tokenizer_gamma: 1e-6,
            tokenizer_lipschitz: None,
            train_steps: 20_000,
            train_batch_size: 32,
            train_lr: 1e-4,
            train_warmup: 100,
            smoothness_checkpoints: Vec::new(),
            smoothness_trajectories: 500,
            icil_kinds: TokenizerKind::ALL.to_vec(),
            icil_tasks: TaskFamily::ALL.to_vec(),
            icil_seeds: vec![0, 1, 2],
            icil_steps: 20_000,
            icil_batch_size: 16,
            icil_lr: 1e-3,
            icil_train_episodes: 100,
            icil_rollouts: 100,
            icil_decode: DecodeVia::Head,
            icil_freeze_tokenizer: false,
            sweep_target: SweepTarget::Tokenizer,
            sweep_kind: TokenizerKind::VqVae,
            sweep_codebook_sizes: vec![256, 512, 1024, 2048],
            sweep_lipschitz: vec![false],
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value `{value}` for `{key}`"))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn kinds(key: &str, v: &str) -> Result<Vec<TokenizerKind>> {
    v.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| bad(key, p)))
        .collect()
}

fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(bad(key, v)),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "workers" => self.workers = parse(key, v)?,
            "data.path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.mode" => {
                self.data_mode = match v {
                    "expert" => DataMode::Expert,
                    "min-jerk" => DataMode::MinJerk,
                    _ => return Err(bad(key, v)),
                }
            }
            "data.episodes" => self.data_episodes = parse(key, v)?,
            "data.horizon" => self.data_horizon = parse(key, v)?,
            "data.segments" => self.data_segments = parse(key, v)?,
            "tokenizer.kind" => self.tokenizer_kind = v.parse().map_err(|_| bad(key, v))?,
            "tokenizer.action_dim" => self.tokenizer_action_dim = parse(key, v)?,
            "tokenizer.latent_dim" => self.tokenizer_latent_dim = parse(key, v)?,
            "tokenizer.codebook_size" => self.tokenizer_codebook_size = parse(key, v)?,
            "tokenizer.hidden" => self.tokenizer_hidden = list(key, v)?,
            "tokenizer.alpha" => self.tokenizer_alpha = parse(key, v)?,
            "tokenizer.beta" => self.tokenizer_beta = parse(key, v)?,
            "tokenizer.gamma" => self.tokenizer_gamma = parse(key, v)?,
            "tokenizer.lipschitz" => {
                self.tokenizer_lipschitz = match v {
                    "auto" => None,
                    _ => Some(on_off(key, v)?),
                }
            }
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.batch_size" => self.train_batch_size = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            "train.warmup" => self.train_warmup = parse(key, v)?,
            "smoothness.checkpoints" => {
                self.smoothness_checkpoints = v
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| PathBuf::from(p.trim()))
                    .collect()
            }
            "smoothness.trajectories" => self.smoothness_trajectories = parse(key, v)?,
            "icil.kinds" => self.icil_kinds = kinds(key, v)?,
            "icil.tasks" => {
                self.icil_tasks = v
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| p.trim().parse().map_err(|_| bad(key, p)))
                    .collect::<Result<_>>()?
            }
            "icil.seeds" => self.icil_seeds = list(key, v)?,
            "icil.steps" => self.icil_steps = parse(key, v)?,
            "icil.batch_size" => self.icil_batch_size = parse(key, v)?,
            "icil.lr" => self.icil_lr = parse(key, v)?,
            "icil.train_episodes" => self.icil_train_episodes = parse(key, v)?,
            "icil.rollouts" => self.icil_rollouts = parse(key, v)?,
            "icil.decode" => {
                self.icil_decode = match v {
                    "head" => DecodeVia::Head,
                    "tokenizer-decoder" => DecodeVia::TokenizerDecoder,
                    _ => return Err(bad(key, v)),
                }
            }
            "icil.freeze_tokenizer" => self.icil_freeze_tokenizer = on_off(key, v)?,
            "sweep.target" => {
                self.sweep_target = match v {
                    "tokenizer" => SweepTarget::Tokenizer,
                    "icil" => SweepTarget::Icil,
                    _ => return Err(bad(key, v)),
                }
            }
            "sweep.kind" => self.sweep_kind = v.parse().map_err(|_| bad(key, v))?,
            "sweep.codebook_sizes" => self.sweep_codebook_sizes = list(key, v)?,
            "sweep.lipschitz" => {
                self.sweep_lipschitz = v
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| on_off(key, p.trim()))
                    .collect::<Result<_>>()?
            }
            "sweep.seeds" => self.sweep_seeds = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted, parseable by
    /// [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("workers", self.workers.to_string()),
            ("data.path", path(&self.data_path)),
            (
                "data.mode",
                match self.data_mode {
                    DataMode::Expert => "expert",
                    DataMode::MinJerk => "min-jerk",
                }
                .into(),
            ),
            ("data.episodes", self.data_episodes.to_string()),
            ("data.horizon", self.data_horizon.to_string()),
            ("data.segments", self.data_segments.to_string()),
            ("tokenizer.kind", self.tokenizer_kind.to_string()),
            ("tokenizer.action_dim", self.tokenizer_action_dim.to_string()),
            ("tokenizer.latent_dim", self.tokenizer_latent_dim.to_string()),
            ("tokenizer.codebook_size", self.tokenizer_codebook_size.to_string()),
            ("tokenizer.hidden", join(&self.tokenizer_hidden)),
            ("tokenizer.alpha", format!("{:e}", self.tokenizer_alpha)),
            ("tokenizer.beta", format!("{:e}", self.tokenizer_beta)),
            ("tokenizer.gamma", format!("{:e}", self.tokenizer_gamma)),
            (
                "tokenizer.lipschitz",
                self.tokenizer_lipschitz
                    .map_or("auto".into(), |b| if b { "on" } else { "off" }.into()),
            ),
            ("train.steps", self.train_steps.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.lr", format!("{:e}", self.train_lr)),
            ("train.warmup", self.train_warmup.to_string()),
            (
                "smoothness.checkpoints",
                self.smoothness_checkpoints
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("smoothness.trajectories", self.smoothness_trajectories.to_string()),
            ("icil.kinds", join(&self.icil_kinds)),
            ("icil.tasks", join(&self.icil_tasks)),
            ("icil.seeds", join(&self.icil_seeds)),
            ("icil.steps", self.icil_steps.to_string()),
            ("icil.batch_size", self.icil_batch_size.to_string()),
            ("icil.lr", format!("{:e}", self.icil_lr)),
            ("icil.train_episodes", self.icil_train_episodes.to_string()),
            ("icil.rollouts", self.icil_rollouts.to_string()),
            (
                "icil.decode",
                match self.icil_decode {
                    DecodeVia::Head => "head",
                    DecodeVia::TokenizerDecoder => "tokenizer-decoder",
                }
                .into(),
            ),
            ("icil.freeze_tokenizer", if self.icil_freeze_tokenizer { "on" } else { "off" }.into()),
            (
                "sweep.target",
                match self.sweep_target {
                    SweepTarget::Tokenizer => "tokenizer",
                    SweepTarget::Icil => "icil",
                }
                .into(),
            ),
            ("sweep.kind", self.sweep_kind.to_string()),
            ("sweep.codebook_sizes", join(&self.sweep_codebook_sizes)),
            (
                "sweep.lipschitz",
                self.sweep_lipschitz
                    .iter()
                    .map(|&b| if b { "on" } else { "off" })
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("sweep.seeds", join(&self.sweep_seeds)),
        ];
        kv.sort_by(|a, b| a.0.cmp(b.0));
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 9\nicil.kinds = mlp, bin # two\nsweep.lipschitz = off,on\ntokenizer.lipschitz = on")
            .unwrap();
        assert_eq!(c.icil_kinds, vec![TokenizerKind::Mlp, TokenizerKind::Bin]);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("train.stepz = 3").is_err());
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("icil.kinds = fast").is_err());
    }
}
