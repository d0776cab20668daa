//! Generator and discriminator networks built on the autodiff tape.

pub mod checkpoint;
mod discriminator;
mod generator;
mod params;

pub use discriminator::{
    build_discriminator, build_discriminator_as, discriminator_forward, DiscriminatorConfig,
};
pub use generator::{build_generator, build_generator_as, generator_forward, GeneratorConfig};
pub use params::{count_parameters, Architecture, Bound, ModelParams};

use crate::error::Result;
use crate::tensor::{Conv2dOptions, Real, Tape, Var};

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`; the shortcut is a 1×1 convolution
/// when `{prefix}.skip` exists, identity otherwise.
pub(crate) fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_>,
    prefix: &str,
    x: Var,
    kernel: usize,
    dilation: usize,
) -> Result<Var> {
    let opts = Conv2dOptions::same(kernel, dilation);
    let w1 = params.var(&format!("{prefix}.conv1.weight"))?;
    let b1 = params.var(&format!("{prefix}.conv1.bias"))?;
    let w2 = params.var(&format!("{prefix}.conv2.weight"))?;
    let b2 = params.var(&format!("{prefix}.conv2.bias"))?;
    let h = tape.conv2d(x, w1, b1, opts)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, w2, b2, opts)?;
    let shortcut = if params.has(&format!("{prefix}.skip.weight")) {
        let ws = params.var(&format!("{prefix}.skip.weight"))?;
        let bs = params.var(&format!("{prefix}.skip.bias"))?;
        tape.conv2d(x, ws, bs, Conv2dOptions::default())?
    } else {
        x
    };
    let sum = tape.add(h, shortcut)?;
    Ok(tape.relu(sum))
}
