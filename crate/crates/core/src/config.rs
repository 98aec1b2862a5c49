//! Training configuration and its flat `key=value` text format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_dataset, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::losses::{AdvForm, Lambdas};
use crate::nets::NetConfig;

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Dir(PathBuf),
    /// `synthetic:N:SEED` procedural blobs at the configured image size.
    Synthetic {
        n: usize,
        seed: u64,
    },
}

impl DatasetSource {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let (n, seed) = rest
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected synthetic:N:SEED, got {s}")))?;
            let n = n
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic image count in {s}")))?;
            let seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic seed in {s}")))?;
            return Ok(Self::Synthetic { n, seed });
        }
        Ok(Self::Dir(PathBuf::from(s)))
    }

    pub fn load(&self, image_size: usize) -> Result<Dataset> {
        match self {
            Self::Dir(p) => load_dataset(p),
            Self::Synthetic { n, seed } => synthetic_blobs(*n, image_size, *seed),
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Dir(p) => write!(f, "{}", p.display()),
            Self::Synthetic { n, seed } => write!(f, "synthetic:{n}:{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    /// Form of the discriminator adversarial term.
    pub adv_form: AdvForm,
    pub batch_size: usize,
    /// Interpolation size `k`.
    pub interp_size: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub dirichlet_alpha: f64,
    /// Discriminator layer ids feeding the self-correlation loss; empty means
    /// the last two conv layers.
    pub taps: Vec<usize>,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub out_dir: PathBuf,
    /// Steps between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_every: u64,
    /// Steps between metric rows; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval_paths: usize,
    pub eval_k: usize,
    pub fags_on: bool,
    pub iandr_on: bool,
    pub latent_dim: usize,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            adv_form: AdvForm::Direct,
            batch_size: 4,
            interp_size: 4,
            steps: 2000,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            dirichlet_alpha: 1.0,
            taps: Vec::new(),
            seed: 0,
            dataset: DatasetSource::Synthetic { n: 10, seed: 0 },
            out_dir: PathBuf::from("run"),
            checkpoint_every: 0,
            eval_every: 0,
            eval_samples: 16,
            eval_paths: 8,
            eval_k: 8,
            fags_on: true,
            iandr_on: true,
            latent_dim: 64,
            image_size: 16,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value for {key}: {value:?}"))),
    }
}

impl TrainConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            latent_dim: self.latent_dim,
            image_size: self.image_size,
        }
    }

    /// Tap ids in use, resolving the empty default.
    pub fn tap_layers(&self) -> Result<Vec<usize>> {
        if self.taps.is_empty() {
            return self.net().default_taps();
        }
        let known: Vec<usize> = self
            .net()
            .disc_tap_shapes()?
            .iter()
            .map(|(id, _)| *id)
            .collect();
        let mut taps = self.taps.clone();
        taps.sort_unstable();
        taps.dedup();
        if let Some(bad) = taps.iter().find(|t| !known.contains(t)) {
            return Err(Error::Config(format!(
                "tap layer {bad} does not exist (available: {known:?})"
            )));
        }
        Ok(taps)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "lambda1" => self.lambdas.inp = parse_num(key, value)?,
            "lambda2" => self.lambdas.dr = parse_num(key, value)?,
            "lambda3" => self.lambdas.geo = parse_num(key, value)?,
            "adv_loss" => self.adv_form = value.parse()?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "interp_size" | "k" => self.interp_size = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "lr_g" => self.lr_g = parse_num(key, value)?,
            "lr_d" => self.lr_d = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse_num(key, value)?,
            "taps" => {
                self.taps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "dataset" => self.dataset = DatasetSource::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_samples" => self.eval_samples = parse_num(key, value)?,
            "eval_paths" => self.eval_paths = parse_num(key, value)?,
            "eval_k" => self.eval_k = parse_num(key, value)?,
            "fags_on" => self.fags_on = parse_bool(key, value)?,
            "iandr_on" => self.iandr_on = parse_bool(key, value)?,
            "latent_dim" => self.latent_dim = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let DatasetSource::Dir(p) = &cfg.dataset {
            if p.is_relative() {
                if let Some(base) = path.parent() {
                    cfg.dataset = DatasetSource::Dir(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambdas;
        let checks: [(bool, &str); 12] = [
            (
                l.inp >= 0.0 && l.dr >= 0.0 && l.geo >= 0.0,
                "lambdas must be >= 0",
            ),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.interp_size >= 2, "interp_size must be >= 2"),
            (
                self.lr_g > 0.0 && self.lr_d > 0.0,
                "learning rates must be > 0",
            ),
            ((0.0..1.0).contains(&self.beta1), "beta1 must be in [0, 1)"),
            ((0.0..1.0).contains(&self.beta2), "beta2 must be in [0, 1)"),
            (self.dirichlet_alpha > 0.0, "dirichlet_alpha must be > 0"),
            (self.eval_samples >= 2, "eval_samples must be >= 2"),
            (self.eval_paths >= 1, "eval_paths must be >= 1"),
            (self.eval_k >= 3, "eval_k must be >= 3"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (
                self.image_size >= 8 && self.image_size.is_power_of_two(),
                "image_size must be a power of two >= 8",
            ),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config((*msg).to_string()));
        }
        self.tap_layers()?;
        Ok(())
    }

    /// Serializes every key so that `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let taps: Vec<String> = self.taps.iter().map(|t| t.to_string()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("lambda1", self.lambdas.inp.to_string()),
            ("lambda2", self.lambdas.dr.to_string()),
            ("lambda3", self.lambdas.geo.to_string()),
            ("adv_loss", self.adv_form.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("interp_size", self.interp_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr_g", self.lr_g.to_string()),
            ("lr_d", self.lr_d.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("dirichlet_alpha", self.dirichlet_alpha.to_string()),
            ("taps", taps.join(",")),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("eval_paths", self.eval_paths.to_string()),
            ("eval_k", self.eval_k.to_string()),
            ("fags_on", self.fags_on.to_string()),
            ("iandr_on", self.iandr_on.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("image_size", self.image_size.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
