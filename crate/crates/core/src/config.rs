//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known; the
//! echo written by [`RunConfig::to_text`] parses back to the same config.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, IoContext, Result};
use crate::model::ModelConfig;
use crate::train_eval::TrainConfig;

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "DUALCORR_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` defers to [`SEED_ENV`], then 0.
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    /// Share of the dataset held out for evaluation.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: None,
            data: None,
            test_fraction: 0.25,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }

    /// Seed from the config, else from [`SEED_ENV`], else 0.
    pub fn effective_seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => match std::env::var(SEED_ENV) {
                Ok(v) => parse(SEED_ENV, v.trim()),
                Err(_) => Ok(0),
            },
        }
    }

    /// Training config with the effective seed filled in.
    pub fn resolved_train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            seed: self.effective_seed()?,
            ..self.train.clone()
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.model.encoder;
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "clip_len" => t.clip_len = parse(key, value)?,
            "frame_distance" => t.frame_distance = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "contrastive_warmup" => t.contrastive_warmup = parse(key, value)?,
            "lambda_loc" => t.weights.loc = parse(key, value)?,
            "lambda_cls" => t.weights.cls = parse(key, value)?,
            "lambda_inter" => t.weights.inter = parse(key, value)?,
            "lambda_cross" => t.weights.cross = parse(key, value)?,
            "tau" => t.correspondence.tau = parse(key, value)?,
            "r_inter" => t.correspondence.r_inter = parse(key, value)?,
            "r_cross" => t.correspondence.r_cross = parse(key, value)?,
            "inter_mode" => t.correspondence.inter_mode = value.parse()?,
            "inter_align" => t.correspondence.inter_align = value.parse()?,
            "cross_select" => t.correspondence.cross_select = value.parse()?,
            "lr" => t.optimizer.lr = parse(key, value)?,
            "rho" => t.optimizer.rho = parse(key, value)?,
            "eps" => t.optimizer.eps = parse(key, value)?,
            "power" => t.optimizer.power = parse(key, value)?,
            "stride" => e.stride = parse(key, value)?,
            "window" => e.window = parse(key, value)?,
            "dim" => e.dim = parse(key, value)?,
            "max_words" => e.max_words = parse(key, value)?,
            "head_hidden" => self.model.head_hidden = parse(key, value)?,
            "anchor" => self.model.anchor = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Effective configuration, one `key = value` per line. The seed is
    /// written resolved.
    pub fn to_text(&self) -> Result<String> {
        let t = &self.train;
        let c = &t.correspondence;
        let e = &self.model.encoder;
        let mut pairs = vec![("seed", self.effective_seed()?.to_string())];
        if let Some(d) = &self.data {
            pairs.push(("data", d.display().to_string()));
        }
        pairs.extend([
            ("test_fraction", self.test_fraction.to_string()),
            ("steps", t.steps.to_string()),
            ("clip_len", t.clip_len.to_string()),
            ("frame_distance", t.frame_distance.to_string()),
            ("augment", t.augment.to_string()),
            ("contrastive_warmup", t.contrastive_warmup.to_string()),
            ("lambda_loc", t.weights.loc.to_string()),
            ("lambda_cls", t.weights.cls.to_string()),
            ("lambda_inter", t.weights.inter.to_string()),
            ("lambda_cross", t.weights.cross.to_string()),
            ("tau", c.tau.to_string()),
            ("r_inter", c.r_inter.to_string()),
            ("r_cross", c.r_cross.to_string()),
            ("inter_mode", c.inter_mode.to_string()),
            ("inter_align", c.inter_align.to_string()),
            ("cross_select", c.cross_select.to_string()),
            ("lr", t.optimizer.lr.to_string()),
            ("rho", t.optimizer.rho.to_string()),
            ("eps", t.optimizer.eps.to_string()),
            ("power", t.optimizer.power.to_string()),
            ("stride", e.stride.to_string()),
            ("window", e.window.to_string()),
            ("dim", e.dim.to_string()),
            ("max_words", e.max_words.to_string()),
            ("head_hidden", self.model.head_hidden.to_string()),
            ("anchor", self.model.anchor.to_string()),
        ]);
        Ok(pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }
}
