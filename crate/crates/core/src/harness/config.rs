//! Flat `key = value` model configuration.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerKind {
    Gmvq,
    VqvaeSte,
    StochasticVq,
}

impl FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmvq" => Ok(Self::Gmvq),
            "vqvae_ste" => Ok(Self::VqvaeSte),
            "stochastic_vq" => Ok(Self::StochasticVq),
            _ => Err(Error::Config(format!("unknown quantizer `{s}`"))),
        }
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gmvq => "gmvq",
            Self::VqvaeSte => "vqvae_ste",
            Self::StochasticVq => "stochastic_vq",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub quantizer: QuantizerKind,
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the codebook term in the VQ-VAE loss.
    pub alpha: f64,
    /// Weight of the mutual-information regularizer (0 disables it).
    pub entropy_weight: f64,
    pub sigma2_z: f64,
    pub sigma2_x: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub warmup_start_factor: f64,
    pub weight_decay: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay_fraction: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            latent_dim: 8,
            codebook_size: 32,
            encoder_hidden: vec![128, 64],
            decoder_hidden: vec![64, 128],
            activation: Activation::Relu,
            quantizer: QuantizerKind::Gmvq,
            beta: 1.0,
            gamma: 0.1,
            alpha: 1.0,
            entropy_weight: 0.0,
            sigma2_z: 1.0,
            sigma2_x: 1.0,
            batch_size: 256,
            epochs: 50,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            warmup_start_factor: 0.2,
            weight_decay: 1e-4,
            tau_start: 2.0,
            tau_end: 0.1,
            tau_decay_fraction: 0.8,
            kmeans_iters: 10,
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "input_dim",
    "latent_dim",
    "codebook_size",
    "encoder_hidden",
    "decoder_hidden",
    "activation",
    "quantizer",
    "beta",
    "gamma",
    "alpha",
    "entropy_weight",
    "sigma2_z",
    "sigma2_x",
    "batch_size",
    "epochs",
    "learning_rate",
    "warmup_fraction",
    "warmup_start_factor",
    "weight_decay",
    "tau_start",
    "tau_end",
    "tau_decay_fraction",
    "kmeans_iters",
    "seed",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ModelConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "input_dim" => self.input_dim = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, v)?,
            "activation" => self.activation = v.parse()?,
            "quantizer" => self.quantizer = v.parse()?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "entropy_weight" => self.entropy_weight = parse(key, v)?,
            "sigma2_z" => self.sigma2_z = parse(key, v)?,
            "sigma2_x" => self.sigma2_x = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, v)?,
            "warmup_start_factor" => self.warmup_start_factor = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "tau_start" => self.tau_start = parse(key, v)?,
            "tau_end" => self.tau_end = parse(key, v)?,
            "tau_decay_fraction" => self.tau_decay_fraction = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config document on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored; repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
            seen.push(k);
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize every key in a fixed order; `parse_str` reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "input_dim" => self.input_dim.to_string(),
                "latent_dim" => self.latent_dim.to_string(),
                "codebook_size" => self.codebook_size.to_string(),
                "encoder_hidden" => join(&self.encoder_hidden),
                "decoder_hidden" => join(&self.decoder_hidden),
                "activation" => self.activation.to_string(),
                "quantizer" => self.quantizer.to_string(),
                "beta" => self.beta.to_string(),
                "gamma" => self.gamma.to_string(),
                "alpha" => self.alpha.to_string(),
                "entropy_weight" => self.entropy_weight.to_string(),
                "sigma2_z" => self.sigma2_z.to_string(),
                "sigma2_x" => self.sigma2_x.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "epochs" => self.epochs.to_string(),
                "learning_rate" => self.learning_rate.to_string(),
                "warmup_fraction" => self.warmup_fraction.to_string(),
                "warmup_start_factor" => self.warmup_start_factor.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "tau_start" => self.tau_start.to_string(),
                "tau_end" => self.tau_end.to_string(),
                "tau_decay_fraction" => self.tau_decay_fraction.to_string(),
                "kmeans_iters" => self.kmeans_iters.to_string(),
                "seed" => self.seed.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.latent_dim == 0 || self.batch_size == 0 {
            return bad("input_dim, latent_dim and batch_size must be positive".into());
        }
        if self.codebook_size < 2 {
            return bad(format!(
                "codebook_size must be at least 2, got {}",
                self.codebook_size
            ));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&h| h == 0)
        {
            return bad("hidden sizes must be positive".into());
        }
        for (k, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("entropy_weight", self.entropy_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        for (k, v) in [
            ("sigma2_z", self.sigma2_z),
            ("sigma2_x", self.sigma2_x),
            ("learning_rate", self.learning_rate),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
            ("warmup_start_factor", self.warmup_start_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if self.tau_end > self.tau_start {
            return bad("tau_end must not exceed tau_start".into());
        }
        for (k, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("tau_decay_fraction", self.tau_decay_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1], got {v}"));
            }
        }
        if self.tau_decay_fraction == 0.0 {
            return bad("tau_decay_fraction must be positive".into());
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
