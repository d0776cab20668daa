//! Single optimization steps: supervised pretraining and the alternating D/G update.

use super::config::TrainConfig;
use super::samples::PreparedBatch;
use super::state::{LossRecord, TrainEvent, TrainState};
use crate::error::{Error, Result};
use crate::losses::{
    generator_adversarial_term, loss_adv, loss_d, loss_g, DiscriminatorOutputs, GeneratorLoss,
    Supervision,
};
use crate::nn::{discriminator_forward, generator_forward, Bound, ModelParams};
use crate::tensor::{AdamState, Tape, Tensor, Var};

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

/// Rows of `v` holding samples with `tag`, or `None` when there are none.
fn group(tape: &mut Tape, v: Var, tags: &[Supervision], tag: Supervision) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..tags.len()).filter(|&i| tags[i] == tag).collect();
    if rows.is_empty() {
        Ok(None)
    } else if rows.len() == tags.len() {
        Ok(Some(v))
    } else {
        tape.select_rows(v, &rows).map(Some)
    }
}

/// Per-pixel class probabilities from G.
fn generator_probs(tape: &mut Tape, g: &Bound<'_>, images: Var) -> Result<Var> {
    let logits = generator_forward(tape, g, images)?;
    tape.softmax_channels(logits)
}

struct SegTerms {
    ce: f64,
    dice: f64,
    id: f64,
    dt: f64,
    g: f64,
}

fn seg_terms(tape: &Tape, l: &GeneratorLoss) -> SegTerms {
    let (ce, dice, id) =
        l.id.map(|s| {
            (
                scalar(tape, s.ce),
                scalar(tape, s.dice),
                scalar(tape, s.total),
            )
        })
        .unwrap_or((0.0, 0.0, 0.0));
    SegTerms {
        ce,
        dice,
        id,
        dt: l.dt.map(|s| scalar(tape, s.total)).unwrap_or(0.0),
        g: scalar(tape, l.total),
    }
}

fn apply_update(
    adam: &mut AdamState,
    params: &mut ModelParams,
    grads: &[Tensor],
    events: &mut Vec<TrainEvent>,
    iteration: u64,
    what: &str,
) -> bool {
    match adam.step(params.tensors_mut(), grads) {
        Ok(()) => true,
        Err(e) => {
            events.push(TrainEvent {
                iteration,
                message: format!("{what} update skipped: {e}"),
            });
            false
        }
    }
}

/// One Adam step of G on `L_G` with D untouched.
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    let gb = state.g.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let y = tape.constant(batch.targets.clone());
    let probs = generator_probs(&mut tape, &gb, x)?;
    let l = loss_g(&mut tape, probs, y, &batch.tags, &cfg.loss_weights())?;
    let t = seg_terms(&tape, &l);
    if !t.g.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite L_G at iteration {} (batch tags {:?})",
            state.iteration, batch.tags
        )));
    }
    tape.backward(l.total)?;
    let grads = gb.grads(&tape);
    drop(gb);
    state
        .g_adam
        .step(state.g.tensors_mut(), &grads)
        .map_err(|e| Error::Numerical(format!("iteration {}: {e}", state.iteration)))?;
    Ok(LossRecord {
        iteration: state.iteration,
        l_ce: t.ce,
        l_dice: t.dice,
        l_id: t.id,
        l_dt: t.dt,
        l_g: t.g,
        l_d: 0.0,
        l_adv: t.g,
    })
}

/// Outcome of a discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    /// `L_D` before the update (the quantity D ascends).
    pub l_d: f64,
    pub out_of_range: usize,
    pub applied: bool,
}

/// Builds the four `L_D` groups for D on real masks and on `fake_probs`.
fn discriminator_loss(
    tape: &mut Tape,
    db: &Bound<'_>,
    batch: &PreparedBatch,
    fake_probs: Var,
    cfg: &TrainConfig,
) -> Result<crate::losses::DiscriminatorLoss> {
    let x = tape.constant(batch.images.clone());
    let y = tape.constant(batch.targets.clone());
    let real = discriminator_forward(tape, db, x, y)?;
    let fake = discriminator_forward(tape, db, x, fake_probs)?;
    let outputs = DiscriminatorOutputs {
        real_s: group(tape, real, &batch.tags, Supervision::Expert)?,
        real_t: if cfg.include_t_in_d_real {
            group(tape, real, &batch.tags, Supervision::Pseudo)?
        } else {
            None
        },
        fake_s: group(tape, fake, &batch.tags, Supervision::Expert)?,
        fake_t: group(tape, fake, &batch.tags, Supervision::Pseudo)?,
    };
    loss_d(tape, &outputs)
}

/// `L_D` for the current G and D without changing either.
pub fn discriminator_objective(
    state: &TrainState,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let gb = state.g.bind(&mut tape, false);
    let x = tape.constant(batch.images.clone());
    let probs = generator_probs(&mut tape, &gb, x)?;
    let db = state.d.bind(&mut tape, false);
    let l = discriminator_loss(&mut tape, &db, batch, probs, cfg)?;
    Ok(scalar(&tape, l.value))
}

/// Gradient ascent on `L_D` (descent on `−L_D`) with G's output detached.
fn update_discriminator(
    state: &mut TrainState,
    batch: &PreparedBatch,
    fake_probs: &Tensor,
    cfg: &TrainConfig,
) -> Result<DiscriminatorStep> {
    let mut tape = Tape::new();
    let db = state.d.bind(&mut tape, true);
    let f = tape.constant(fake_probs.clone());
    let l = discriminator_loss(&mut tape, &db, batch, f, cfg)?;
    let l_d = scalar(&tape, l.value);
    let mut step = DiscriminatorStep {
        l_d,
        out_of_range: l.out_of_range,
        applied: false,
    };
    if !l_d.is_finite() {
        state.events.push(TrainEvent {
            iteration: state.iteration,
            message: format!("D update skipped: L_D = {l_d}"),
        });
        return Ok(step);
    }
    let objective = tape.affine(l.value, -1.0, 0.0);
    tape.backward(objective)?;
    let grads = db.grads(&tape);
    drop(db);
    step.applied = apply_update(
        &mut state.d_adam,
        &mut state.d,
        &grads,
        &mut state.events,
        state.iteration,
        "D",
    );
    Ok(step)
}

/// One D step with G frozen.
pub fn discriminator_step(
    state: &mut TrainState,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<DiscriminatorStep> {
    let fake = {
        let mut tape = Tape::new();
        let gb = state.g.bind(&mut tape, false);
        let x = tape.constant(batch.images.clone());
        let p = generator_probs(&mut tape, &gb, x)?;
        tape.value(p).clone()
    };
    update_discriminator(state, batch, &fake, cfg)
}

/// Outcome of a generator update inside the adversarial phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_id: f64,
    pub l_dt: f64,
    pub l_g: f64,
    /// The fake-sample terms of `L_D` as seen by G.
    pub adversarial: f64,
    pub applied: bool,
    /// Whether any discriminator parameter received a gradient (must stay false).
    pub frozen_grad_materialized: bool,
}

/// Finishes a G step on a tape that already holds G's forward pass.
fn update_generator(
    tape: &mut Tape,
    g_vars: &[Var],
    probs: Var,
    images: Var,
    state_d: &ModelParams,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<(GeneratorStep, Option<Vec<Tensor>>)> {
    let y = tape.constant(batch.targets.clone());
    let l = loss_g(tape, probs, y, &batch.tags, &cfg.loss_weights())?;
    let t = seg_terms(tape, &l);
    let db = state_d.bind(tape, false);
    let d_fake = discriminator_forward(tape, &db, images, probs)?;
    let fs = group(tape, d_fake, &batch.tags, Supervision::Expert)?;
    let ft = group(tape, d_fake, &batch.tags, Supervision::Pseudo)?;
    let adv = generator_adversarial_term(tape, fs, ft, cfg.non_saturating_g)?;
    let total = match adv {
        Some(a) => tape.add(l.total, a)?,
        None => l.total,
    };
    let adversarial = adv.map(|a| scalar(tape, a)).unwrap_or(0.0);
    let mut step = GeneratorStep {
        l_ce: t.ce,
        l_dice: t.dice,
        l_id: t.id,
        l_dt: t.dt,
        l_g: t.g,
        adversarial,
        applied: false,
        frozen_grad_materialized: false,
    };
    if !scalar(tape, total).is_finite() {
        return Ok((step, None));
    }
    tape.backward(total)?;
    step.frozen_grad_materialized = db.vars().iter().any(|&v| tape.grad_materialized(v));
    let grads = g_vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    Ok((step, Some(grads)))
}

fn finish_generator(state: &mut TrainState, step: &mut GeneratorStep, grads: Option<Vec<Tensor>>) {
    match grads {
        Some(g) => {
            step.applied = apply_update(
                &mut state.g_adam,
                &mut state.g,
                &g,
                &mut state.events,
                state.iteration,
                "G",
            )
        }
        None => state.events.push(TrainEvent {
            iteration: state.iteration,
            message: format!(
                "G update skipped: L_G = {}, adversarial term = {}",
                step.l_g, step.adversarial
            ),
        }),
    }
}

/// One G step on `L_G` plus the fake terms of `L_D`, with D frozen.
pub fn generator_step(
    state: &mut TrainState,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<GeneratorStep> {
    let mut tape = Tape::new();
    let gb = state.g.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let probs = generator_probs(&mut tape, &gb, x)?;
    let g_vars = gb.vars().to_vec();
    drop(gb);
    let (mut step, grads) = update_generator(&mut tape, &g_vars, probs, x, &state.d, batch, cfg)?;
    finish_generator(state, &mut step, grads);
    Ok(step)
}

/// D ascent step with G frozen, then G descent step with D frozen. G's forward pass
/// is computed once and reused by both sub-steps.
pub fn adversarial_step(
    state: &mut TrainState,
    batch: &PreparedBatch,
    cfg: &TrainConfig,
) -> Result<(LossRecord, DiscriminatorStep, GeneratorStep)> {
    let mut tape = Tape::new();
    let gb = state.g.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let probs = generator_probs(&mut tape, &gb, x)?;
    let g_vars = gb.vars().to_vec();
    drop(gb);
    let fake = tape.value(probs).clone();

    let d_step = update_discriminator(state, batch, &fake, cfg)?;
    let (mut g_step, grads) = update_generator(&mut tape, &g_vars, probs, x, &state.d, batch, cfg)?;
    finish_generator(state, &mut g_step, grads);

    let l_adv = {
        let mut t = Tape::<f64>::new();
        let d = t.constant(Tensor::scalar(d_step.l_d));
        let g = t.constant(Tensor::scalar(g_step.l_g));
        match loss_adv(&mut t, d, g) {
            Ok(v) => t.value(v).data()[0],
            Err(e) => {
                state.events.push(TrainEvent {
                    iteration: state.iteration,
                    message: e.to_string(),
                });
                f64::NAN
            }
        }
    };
    let record = LossRecord {
        iteration: state.iteration,
        l_ce: g_step.l_ce,
        l_dice: g_step.l_dice,
        l_id: g_step.l_id,
        l_dt: g_step.l_dt,
        l_g: g_step.l_g,
        l_d: d_step.l_d,
        l_adv,
    };
    Ok((record, d_step, g_step))
}
