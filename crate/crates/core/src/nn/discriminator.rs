//! Conditional mask discriminator: judges an (image, mask) pair.

use serde::{Deserialize, Serialize};

use super::params::{Architecture, Bound, ModelParams, ParamSpec};
use super::residual_block;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Image channels plus mask channels.
    pub input_channels: usize,
    /// One residual block (followed by 2×2 max-pooling) per entry.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 5,
            widths: vec![16, 32, 64],
            kernel_size: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.kernel_size % 2 == 0 {
            return Err(Error::Config(
                "discriminator: need ≥1 positive width and an odd kernel".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn layout(c: &DiscriminatorConfig) -> Vec<ParamSpec> {
    let k = c.kernel_size;
    let mut specs = Vec::new();
    let mut cin = c.input_channels;
    for (i, &w) in c.widths.iter().enumerate() {
        specs.extend(ParamSpec::conv(&format!("block{i}.conv1"), w, cin, k));
        specs.extend(ParamSpec::conv(&format!("block{i}.conv2"), w, w, k));
        if cin != w {
            specs.extend(ParamSpec::conv(&format!("block{i}.skip"), w, cin, 1));
        }
        cin = w;
    }
    specs.extend(ParamSpec::dense("head", cin, 1));
    specs
}

pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<ModelParams> {
    build_discriminator_as(config, seed)
}

pub fn build_discriminator_as<T: Real>(
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<ModelParams<T>> {
    config.validate()?;
    Ok(ModelParams::initialize(
        Architecture::Discriminator(config.clone()),
        seed,
    ))
}

/// Probability `[B, 1]` that each mask is a reference mask for its image.
pub fn discriminator_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_>,
    images: Var,
    mask_probs: Var,
) -> Result<Var> {
    let Architecture::Discriminator(cfg) = params.arch else {
        return Err(Error::InvalidArgument(
            "discriminator_forward given non-discriminator parameters".into(),
        ));
    };
    let x = tape.concat_channels(images, mask_probs)?;
    let c = tape.value(x).shape()[1];
    if c != cfg.input_channels {
        return Err(shape_err!(
            "discriminator: image and mask concatenate to {c} channels, expected {}",
            cfg.input_channels
        ));
    }
    let mut x = x;
    for i in 0..cfg.widths.len() {
        x = residual_block(tape, params, &format!("block{i}"), x, cfg.kernel_size, 1)?;
        x = tape.maxpool2x2(x)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let logit = tape.dense(pooled, params.var("head.weight")?, params.var("head.bias")?)?;
    Ok(tape.sigmoid(logit))
}
