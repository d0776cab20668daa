//! Dilated residual U-shape segmentation network.
//!
//! ```text
//! stem 3x3 ─ enc0 ─────────────────────────────── concat ─ dec0 ─ head 1x1
//!              └ down(s2) ─ enc1 ───────── concat ─ dec1 ┘
//!                             └ down(s2) ─ enc2 … up ┘
//! ```
//!
//! Each encoder/decoder stage is a residual block of two dilated 3×3 convolutions.
//! Decoder stages upsample by nearest-neighbour 2× followed by a 3×3 convolution,
//! then concatenate the encoder skip before their residual block.

use serde::{Deserialize, Serialize};

use super::params::{Architecture, Bound, ModelParams, ParamSpec};
use super::residual_block;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Conv2dOptions, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    /// Channel width of each level, shallow to deep.
    pub widths: Vec<usize>,
    /// Dilation of each level's convolutions, shallow to deep.
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    /// Inclusive bounds enforced on the parameter count when building; `None` disables the check.
    pub param_bounds: Option<(usize, usize)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            num_classes: 4,
            widths: vec![16, 24, 32, 40],
            dilations: vec![1, 1, 2, 4],
            kernel_size: 3,
            param_bounds: Some((100_000, 250_000)),
        }
    }
}

impl GeneratorConfig {
    /// A config with no parameter budget, for small test networks.
    pub fn unbounded(widths: Vec<usize>, dilations: Vec<usize>) -> Self {
        Self {
            widths,
            dilations,
            param_bounds: None,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial extents must be a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.dilations.len() {
            return Err(Error::Config(format!(
                "generator: {} widths but {} dilations",
                self.widths.len(),
                self.dilations.len()
            )));
        }
        if self.kernel_size % 2 == 0 || self.widths.contains(&0) || self.dilations.contains(&0) {
            return Err(Error::Config(
                "generator: kernel size must be odd, widths and dilations positive".into(),
            ));
        }
        if self.input_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "generator: need ≥1 input channel and ≥2 classes".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn layout(c: &GeneratorConfig) -> Vec<ParamSpec> {
    let k = c.kernel_size;
    let w = &c.widths;
    let levels = c.levels();
    let mut specs = Vec::new();
    specs.extend(ParamSpec::conv("stem", w[0], c.input_channels, k));
    for l in 0..levels {
        specs.extend(ParamSpec::conv(&format!("enc{l}.conv1"), w[l], w[l], k));
        specs.extend(ParamSpec::conv(&format!("enc{l}.conv2"), w[l], w[l], k));
        if l + 1 < levels {
            specs.extend(ParamSpec::conv(&format!("down{l}"), w[l + 1], w[l], k));
        }
    }
    for l in (0..levels.saturating_sub(1)).rev() {
        specs.extend(ParamSpec::conv(&format!("up{l}"), w[l], w[l + 1], k));
        specs.extend(ParamSpec::conv(&format!("dec{l}.conv1"), w[l], 2 * w[l], k));
        specs.extend(ParamSpec::conv(&format!("dec{l}.conv2"), w[l], w[l], k));
        specs.extend(ParamSpec::conv(&format!("dec{l}.skip"), w[l], 2 * w[l], 1));
    }
    specs.extend(ParamSpec::conv("head", c.num_classes, w[0], 1));
    specs
}

/// Deterministically initialized generator parameters.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<ModelParams> {
    build_generator_as(config, seed)
}

pub fn build_generator_as<T: Real>(config: &GeneratorConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let params = ModelParams::initialize(Architecture::Generator(config.clone()), seed);
    if let Some((lo, hi)) = config.param_bounds {
        let n = params.count_parameters();
        if n < lo || n > hi {
            return Err(Error::Config(format!(
                "generator has {n} trainable parameters, outside the allowed [{lo}, {hi}]"
            )));
        }
    }
    Ok(params)
}

/// Per-pixel class logits `[B, classes, H, W]` for images `[B, C, H, W]`.
pub fn generator_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_>,
    images: Var,
) -> Result<Var> {
    let Architecture::Generator(cfg) = params.arch else {
        return Err(Error::InvalidArgument(
            "generator_forward given non-generator parameters".into(),
        ));
    };
    let [_, c, h, w] = tape.value(images).dims4()?;
    if c != cfg.input_channels {
        return Err(shape_err!(
            "generator: expected {} input channels, got {c}",
            cfg.input_channels
        ));
    }
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!(
            "generator: spatial extents {h}x{w} must be divisible by {m} for {} levels",
            cfg.levels()
        ));
    }
    let k = cfg.kernel_size;
    let conv = |tape: &mut Tape<T>, name: &str, x: Var, opts: Conv2dOptions| -> Result<Var> {
        let wv = params.var(&format!("{name}.weight"))?;
        let bv = params.var(&format!("{name}.bias"))?;
        tape.conv2d(x, wv, bv, opts)
    };

    let x = conv(tape, "stem", images, Conv2dOptions::same(k, 1))?;
    let mut x = tape.relu(x);
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        x = residual_block(tape, params, &format!("enc{l}"), x, k, cfg.dilations[l])?;
        if l + 1 < cfg.levels() {
            skips.push(x);
            let d = conv(
                tape,
                &format!("down{l}"),
                x,
                Conv2dOptions::new(2, 1, k / 2),
            )?;
            x = tape.relu(d);
        }
    }
    for l in (0..cfg.levels() - 1).rev() {
        let u = tape.upsample2x_nearest(x)?;
        let u = conv(tape, &format!("up{l}"), u, Conv2dOptions::same(k, 1))?;
        let u = tape.relu(u);
        let merged = tape.concat_channels(skips[l], u)?;
        x = residual_block(
            tape,
            params,
            &format!("dec{l}"),
            merged,
            k,
            cfg.dilations[l],
        )?;
    }
    conv(tape, "head", x, Conv2dOptions::default())
}
