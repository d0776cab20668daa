//! Training hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentRanges;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{DiscriminatorConfig, GeneratorConfig};
use crate::tensor::AdamState;
use crate::transfer::CollisionPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub decay: f64,
    pub batch_size: usize,
    /// `j`: supervised iterations before the adversarial phase.
    pub pretrain_iters: u64,
    /// `k`: value of the shared iteration counter at which training stops.
    /// The adversarial phase runs `max(0, k − j)` iterations.
    pub adversarial_iters: u64,
    pub seed: u64,
    pub non_saturating_g: bool,
    pub include_t_in_d_real: bool,
    pub crop_size: usize,
    pub crop_shift: usize,
    pub augment: bool,
    pub checkpoint_every: u64,
    pub collision_policy: CollisionPolicy,
    pub generator_widths: Vec<usize>,
    pub generator_dilations: Vec<usize>,
    /// Enforce the 100k to 250k generator parameter budget.
    pub param_budget: bool,
    pub discriminator_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            lambda: 0.9,
            beta1: 0.9,
            beta2: 0.9,
            lr: AdamState::<f32>::DEFAULT_LR,
            decay: AdamState::<f32>::DEFAULT_DECAY,
            batch_size: 16,
            pretrain_iters: 300,
            adversarial_iters: 900,
            seed: 0,
            non_saturating_g: false,
            include_t_in_d_real: true,
            crop_size: 224,
            crop_shift: 16,
            augment: true,
            checkpoint_every: 100,
            collision_policy: CollisionPolicy::LastWriter,
            generator_widths: g.widths,
            generator_dilations: g.dilations,
            param_budget: true,
            discriminator_widths: DiscriminatorConfig::default().widths,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta1: self.beta1,
            beta2: self.beta2,
            lambda: self.lambda,
            ..LossWeights::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let d = GeneratorConfig::default();
        GeneratorConfig {
            widths: self.generator_widths.clone(),
            dilations: self.generator_dilations.clone(),
            param_bounds: if self.param_budget {
                d.param_bounds
            } else {
                None
            },
            ..d
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            widths: self.discriminator_widths.clone(),
            ..DiscriminatorConfig::default()
        }
    }

    pub fn augment_ranges(&self) -> AugmentRanges {
        AugmentRanges::default()
    }

    /// Whether pseudo-labeled samples take part in training at all.
    pub fn uses_transfer(&self) -> bool {
        self.lambda < 1.0
    }

    pub fn adversarial_phase_iters(&self) -> u64 {
        self.adversarial_iters.saturating_sub(self.pretrain_iters)
    }

    pub fn total_iters(&self) -> u64 {
        self.pretrain_iters.max(self.adversarial_iters)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        if !(self.lr > 0.0) || !(self.decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_every must be positive".into(),
            ));
        }
        let g = self.generator_config();
        g.validate()?;
        self.discriminator_config().validate()?;
        let m = g.spatial_multiple();
        if self.crop_size == 0 || self.crop_size % m != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {m}",
                self.crop_size
            )));
        }
        if self.crop_size % (1 << self.discriminator_widths.len()) != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be divisible by 2^{} for the discriminator pooling",
                self.crop_size,
                self.discriminator_widths.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("lambda", self.lambda.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("lr", self.lr.to_string());
        kv("decay", self.decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("pretrain_iters", self.pretrain_iters.to_string());
        kv("adversarial_iters", self.adversarial_iters.to_string());
        kv("seed", self.seed.to_string());
        kv("non_saturating_G", self.non_saturating_g.to_string());
        kv("include_T_in_D_real", self.include_t_in_d_real.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("crop_shift", self.crop_shift.to_string());
        kv("augment", self.augment.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv(
            "collision_policy",
            match self.collision_policy {
                CollisionPolicy::LastWriter => "last-writer",
                CollisionPolicy::FirstWriter => "first-writer",
            }
            .into(),
        );
        kv("generator_widths", list(&self.generator_widths));
        kv("generator_dilations", list(&self.generator_dilations));
        kv("param_budget", self.param_budget.to_string());
        kv("discriminator_widths", list(&self.discriminator_widths));
        s
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "lambda" | "λ" => c.lambda = parse(k, v)?,
                "beta1" => c.beta1 = parse(k, v)?,
                "beta2" => c.beta2 = parse(k, v)?,
                "alpha" => {
                    let a: f64 = parse(k, v)?;
                    c.beta1 = a;
                    c.beta2 = a;
                }
                "lr" => c.lr = parse(k, v)?,
                "decay" => c.decay = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "pretrain_iters" | "j" => c.pretrain_iters = parse(k, v)?,
                "adversarial_iters" | "k" => c.adversarial_iters = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "non_saturating_G" | "non_saturating_g" => c.non_saturating_g = parse(k, v)?,
                "include_T_in_D_real" | "include_t_in_d_real" => {
                    c.include_t_in_d_real = parse(k, v)?
                }
                "crop_size" => c.crop_size = parse(k, v)?,
                "crop_shift" => c.crop_shift = parse(k, v)?,
                "augment" => c.augment = parse(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse(k, v)?,
                "collision_policy" => {
                    c.collision_policy = match v {
                        "last-writer" => CollisionPolicy::LastWriter,
                        "first-writer" => CollisionPolicy::FirstWriter,
                        _ => {
                            return Err(Error::Config(format!(
                                "collision_policy {v:?} is not last-writer or first-writer"
                            )))
                        }
                    }
                }
                "generator_widths" => c.generator_widths = parse_list(k, v)?,
                "generator_dilations" => c.generator_dilations = parse_list(k, v)?,
                "param_budget" => c.param_budget = parse(k, v)?,
                "discriminator_widths" => c.discriminator_widths = parse_list(k, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
