//! Two-phase training: supervised pretraining of G, then alternating D/G updates.

mod config;
mod samples;
mod state;
mod step;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::TrainConfig;
pub(crate) use samples::mix_seed;
pub use samples::{prepare_batch, PreparedBatch, Sample, TrainingData};
pub use state::{LossRecord, Phase, TrainEvent, TrainState};
pub use step::{
    adversarial_step, discriminator_objective, discriminator_step, generator_step, pretrain_step,
    DiscriminatorStep, GeneratorStep,
};

use crate::data::BatchIterator;
use crate::error::{Error, Result};

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("iter_{iteration:06}"))
    }
    pub fn generator(&self) -> PathBuf {
        self.root.join("generator.ckpt")
    }
    pub fn discriminator(&self) -> PathBuf {
        self.root.join("discriminator.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.log")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    /// The most advanced checkpoint directory, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(n) = name
                .to_str()
                .and_then(|s| s.strip_prefix("iter_"))
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            if entry.path().join("state.json").exists() && best.as_ref().is_none_or(|(b, _)| n > *b)
            {
                best = Some((n, entry.path()));
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

/// Per-iteration callback; return `false` to stop after the current iteration.
pub type Progress<'a> = &'a mut dyn FnMut(&TrainState, &LossRecord) -> bool;

/// Runs one iteration at `state.iteration` and advances the counter.
pub fn run_iteration(
    state: &mut TrainState,
    data: &TrainingData,
    batches: &mut BatchIterator,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    batches.seek(state.iteration);
    let batch = batches.next_batch();
    let prepared = prepare_batch(data, &batch, cfg, state.iteration)?;
    let record = if state.iteration < cfg.pretrain_iters {
        pretrain_step(state, &prepared, cfg)?
    } else {
        let (r, _, g) = adversarial_step(state, &prepared, cfg)?;
        if g.frozen_grad_materialized {
            return Err(Error::Numerical(format!(
                "iteration {}: discriminator received gradients during the generator update",
                state.iteration
            )));
        }
        r
    };
    state.history.push(record);
    state.iteration += 1;
    state.update_phase(cfg);
    Ok(record)
}

pub fn batch_iterator(data: &TrainingData, cfg: &TrainConfig) -> Result<BatchIterator> {
    BatchIterator::new(
        data.s.len(),
        data.t.len(),
        cfg.batch_size,
        mix_seed(&[cfg.seed, 0xBA7C]),
    )
}

/// Trains until the shared counter reaches `cfg.total_iters()`, checkpointing along the way.
/// With `resume`, continues from the latest checkpoint under `out`.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainingData,
    out: impl AsRef<Path>,
    resume: bool,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainState> {
    cfg.validate()?;
    let layout = RunLayout::new(out.as_ref());
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let mut state = match (resume, layout.latest_checkpoint()?) {
        (true, Some(dir)) => TrainState::load(dir, cfg)?,
        _ => TrainState::new(cfg)?,
    };
    cfg.save(layout.config())?;
    let mut batches = batch_iterator(data, cfg)?;
    while state.iteration < cfg.total_iters() {
        let record = run_iteration(&mut state, data, &mut batches, cfg)?;
        if state.iteration % cfg.checkpoint_every == 0 || state.iteration == cfg.total_iters() {
            state.save(layout.checkpoint(state.iteration), cfg)?;
            write_outputs(&state, &layout)?;
        }
        if let Some(p) = progress.as_mut() {
            if !p(&state, &record) {
                break;
            }
        }
    }
    write_outputs(&state, &layout)?;
    Ok(state)
}

fn write_outputs(state: &TrainState, layout: &RunLayout) -> Result<()> {
    state.g.save(layout.generator())?;
    state.d.save(layout.discriminator())?;
    let log = layout.log();
    fs::write(&log, state.log_csv()).map_err(|e| Error::io(&log, e))?;
    let events: String = state
        .events
        .iter()
        .map(|e| format!("{}\t{}\n", e.iteration, e.message))
        .collect();
    let path = layout.events();
    fs::write(&path, events).map_err(|e| Error::io(&path, e))
}
