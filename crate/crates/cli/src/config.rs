//! Flat `key = value` run configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use lmdm_core::autoencoder::{AeConfig, RegMode};
use lmdm_core::diffusion::{DiffusionConfig, LossSpace, ScheduleKind, SigmaMode};
use lmdm_core::elements::ElementVocab;
use lmdm_core::sampler::VarNoiseSource;
use lmdm_core::score_network::{ScoreConfig, VarNoiseScale};
use lmdm_core::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: invalid value {value:?}: {message}")]
    Value { key: String, value: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint config disagrees on {key}: {ours} here, {theirs} in the checkpoint")]
    Mismatch { key: &'static str, ours: String, theirs: String },
    #[error("{0}")]
    Invalid(String),
}

/// Every key with its default and a one-line description, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("k", "1", "invariant latent width per atom"),
    ("tau", "2.0", "local edge cutoff in Å"),
    ("T", "1000", "diffusion steps"),
    ("schedule_kind", "linear", "linear | polynomial"),
    ("beta_start", "0.0001", "first β of the linear schedule"),
    ("beta_end", "0.02", "last β of the linear schedule"),
    ("sigma_mode", "beta_tilde", "reverse-step std: beta_tilde | beta | unit"),
    ("loss_space", "noise", "score | noise"),
    ("gamma_weighting", "false", "extra per-step loss weight"),
    ("coord_target_scale", "0.5", "multiplier on the distance-based coordinate target"),
    ("reg_mode", "es", "autoencoder regularizer: kl | es"),
    ("kl_weight", "1", "weight of the autoencoder KL term"),
    ("es_patience", "5", "validation rounds without improvement before stopping"),
    ("var_noise_source", "normal", "sampling-time η: normal | uniform | encoder"),
    ("var_noise_scale", "squared", "squared | linear"),
    ("var_dim", "2", "width of the variational noise per atom"),
    ("time_dim", "8", "Fourier time features"),
    ("learning_rate", "0.001", "Adam step size"),
    ("batch_size", "32", "molecules per step"),
    ("max_steps", "1000", "step budget used when a stage budget is 0"),
    ("ae_steps", "0", "autoencoder step budget, 0 = max_steps"),
    ("diffusion_steps", "0", "diffusion step budget, 0 = max_steps"),
    ("seed", "0", "master seed"),
    ("cond_properties", "", "comma-separated sidecar columns used as conditioning"),
    ("elements", "H,C,N,O,F", "element vocabulary"),
    ("ae_hidden", "32", "autoencoder hidden width"),
    ("ae_layers", "3", "EGCL layers in encoder and decoder"),
    ("score_hidden", "32", "score network hidden width"),
    ("score_layers", "2", "interaction blocks per score branch"),
    ("require_connected", "true", "validity requires a single fragment"),
];

/// Keys that fix parameter shapes or the meaning of stored weights.
const AE_KEYS: &[&str] = &["k", "tau", "elements", "ae_hidden", "ae_layers"];
const DIFFUSION_KEYS: &[&str] = &[
    "T",
    "schedule_kind",
    "beta_start",
    "beta_end",
    "var_noise_scale",
    "var_dim",
    "time_dim",
    "score_hidden",
    "score_layers",
    "cond_properties",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub tau: f64,
    pub steps: usize,
    pub schedule_kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub loss_space: LossSpace,
    pub gamma_weighting: bool,
    pub coord_target_scale: f64,
    pub reg_mode: RegMode,
    pub kl_weight: f64,
    pub es_patience: usize,
    pub var_noise_source: VarNoiseSource,
    pub var_noise_scale: VarNoiseScale,
    pub var_dim: usize,
    pub time_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub ae_steps: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
    pub cond_properties: Vec<String>,
    pub elements: Vec<String>,
    pub ae_hidden: usize,
    pub ae_layers: usize,
    pub score_hidden: usize,
    pub score_layers: usize,
    pub require_connected: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            k: 0,
            tau: 0.0,
            steps: 0,
            schedule_kind: ScheduleKind::default(),
            beta_start: 0.0,
            beta_end: 0.0,
            sigma_mode: SigmaMode::default(),
            loss_space: LossSpace::default(),
            gamma_weighting: false,
            coord_target_scale: 0.0,
            reg_mode: RegMode::default(),
            kl_weight: 0.0,
            es_patience: 0,
            var_noise_source: VarNoiseSource::default(),
            var_noise_scale: VarNoiseScale::default(),
            var_dim: 0,
            time_dim: 0,
            learning_rate: 0.0,
            batch_size: 0,
            max_steps: 0,
            ae_steps: 0,
            diffusion_steps: 0,
            seed: 0,
            cond_properties: Vec::new(),
            elements: Vec::new(),
            ae_hidden: 0,
            ae_layers: 0,
            score_hidden: 0,
            score_layers: 0,
            require_connected: true,
        };
        for (key, default, _) in KEYS {
            c.set(key, default).expect("documented defaults parse");
        }
        c
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value { key: key.into(), value: value.into(), message: e.to_string() })
}

fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-tripping form; `1` rather than `1.0` is fine for parsing.
    format!("{v}")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "k" => self.k = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "T" => self.steps = parse(key, v)?,
            "schedule_kind" => self.schedule_kind = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "sigma_mode" => self.sigma_mode = parse(key, v)?,
            "loss_space" => self.loss_space = parse(key, v)?,
            "gamma_weighting" => self.gamma_weighting = parse(key, v)?,
            "coord_target_scale" => self.coord_target_scale = parse(key, v)?,
            "reg_mode" => self.reg_mode = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "es_patience" => self.es_patience = parse(key, v)?,
            "var_noise_source" => self.var_noise_source = parse(key, v)?,
            "var_noise_scale" => self.var_noise_scale = parse(key, v)?,
            "var_dim" => self.var_dim = parse(key, v)?,
            "time_dim" => self.time_dim = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "ae_steps" => self.ae_steps = parse(key, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "cond_properties" => self.cond_properties = list(v),
            "elements" => self.elements = list(v),
            "ae_hidden" => self.ae_hidden = parse(key, v)?,
            "ae_layers" => self.ae_layers = parse(key, v)?,
            "score_hidden" => self.score_hidden = parse(key, v)?,
            "score_layers" => self.score_layers = parse(key, v)?,
            "require_connected" => self.require_connected = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "k" => self.k.to_string(),
            "tau" => fmt_f64(self.tau),
            "T" => self.steps.to_string(),
            "schedule_kind" => self.schedule_kind.to_string(),
            "beta_start" => fmt_f64(self.beta_start),
            "beta_end" => fmt_f64(self.beta_end),
            "sigma_mode" => self.sigma_mode.to_string(),
            "loss_space" => self.loss_space.to_string(),
            "gamma_weighting" => self.gamma_weighting.to_string(),
            "coord_target_scale" => fmt_f64(self.coord_target_scale),
            "reg_mode" => self.reg_mode.to_string(),
            "kl_weight" => fmt_f64(self.kl_weight),
            "es_patience" => self.es_patience.to_string(),
            "var_noise_source" => self.var_noise_source.to_string(),
            "var_noise_scale" => self.var_noise_scale.to_string(),
            "var_dim" => self.var_dim.to_string(),
            "time_dim" => self.time_dim.to_string(),
            "learning_rate" => fmt_f64(self.learning_rate),
            "batch_size" => self.batch_size.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "ae_steps" => self.ae_steps.to_string(),
            "diffusion_steps" => self.diffusion_steps.to_string(),
            "seed" => self.seed.to_string(),
            "cond_properties" => self.cond_properties.join(","),
            "elements" => self.elements.join(","),
            "ae_hidden" => self.ae_hidden.to_string(),
            "ae_layers" => self.ae_layers.to_string(),
            "score_hidden" => self.score_hidden.to_string(),
            "score_layers" => self.score_layers.to_string(),
            "require_connected" => self.require_connected.to_string(),
            _ => return None,
        })
    }

    /// Parses config text. `#` starts a comment; keys may appear once.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, message: format!("expected key = value, found {line:?}") })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(ConfigError::Syntax { line: i + 1, message: format!("duplicate key {key}") });
            }
            seen.push(key);
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax { line: i + 1, message: format!("unknown key {k:?}") },
                other => ConfigError::Syntax { line: i + 1, message: other.to_string() },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// Canonical text with every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    /// Defaults with their descriptions, usable as a starting file.
    pub fn documented_defaults() -> String {
        let d = Self::default();
        KEYS.iter().map(|(k, _, doc)| format!("# {doc}\n{k} = {}\n", d.get(k).expect("listed key"))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.steps == 0 {
            return bad("T must be at least 1");
        }
        if self.var_dim == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("var_dim must be positive and time_dim a positive even number");
        }
        if self.ae_hidden == 0 || self.ae_layers == 0 || self.score_hidden == 0 || self.score_layers == 0 {
            return bad("layer counts and widths must be positive");
        }
        self.vocab()?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.diffusion_config().schedule().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<ElementVocab, ConfigError> {
        ElementVocab::new(self.elements.iter().cloned()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn diffusion_config(&self) -> DiffusionConfig {
        DiffusionConfig {
            schedule_kind: self.schedule_kind,
            steps: self.steps,
            sigma_mode: self.sigma_mode,
            gamma_weighting: self.gamma_weighting,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            loss_space: self.loss_space,
            coord_target_scale: self.coord_target_scale,
        }
    }

    pub fn ae_config(&self) -> AeConfig {
        AeConfig {
            vocab_size: self.elements.len(),
            k: self.k,
            hidden: self.ae_hidden,
            n_layers: self.ae_layers,
            tau: self.tau,
            reg_mode: self.reg_mode,
            kl_weight: self.kl_weight,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            k: self.k,
            hidden: self.score_hidden,
            n_layers: self.score_layers,
            time_dim: self.time_dim,
            var_dim: self.var_dim,
            cond_dim: self.cond_properties.len(),
            tau: self.tau,
            var_noise_scale: self.var_noise_scale,
        }
    }

    /// Trainer settings; `max_steps` is the generic budget.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            es_patience: self.es_patience,
            seed: self.seed,
            ae: self.ae_config(),
            score: self.score_config(),
            diffusion: self.diffusion_config(),
        }
    }

    pub fn ae_budget(&self) -> usize {
        if self.ae_steps == 0 {
            self.max_steps
        } else {
            self.ae_steps
        }
    }

    pub fn diffusion_budget(&self) -> usize {
        if self.diffusion_steps == 0 {
            self.max_steps
        } else {
            self.diffusion_steps
        }
    }

    /// Fails if `other` (a checkpoint snapshot) would build differently
    /// shaped or differently interpreted weights for `stage`.
    pub fn check_compatible(&self, other: &RunConfig, include_diffusion: bool) -> Result<(), ConfigError> {
        let keys = AE_KEYS.iter().chain(if include_diffusion { DIFFUSION_KEYS } else { &[] });
        for key in keys {
            let (ours, theirs) = (self.get(key).expect("listed key"), other.get(key).expect("listed key"));
            if ours != theirs {
                return Err(ConfigError::Mismatch { key, ours, theirs });
            }
        }
        Ok(())
    }
}
