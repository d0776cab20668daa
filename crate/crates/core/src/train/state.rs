//! Mutable training state and its on-disk checkpoint.
//!
//! A checkpoint directory holds `generator.ckpt`, `discriminator.ckpt`, `optimizer.ckpt`
//! (Adam moments of both networks) and `state.json` (counters, loss history, events).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::checkpoint::NamedTensors;
use crate::nn::{build_discriminator, build_generator, Architecture, ModelParams};
use crate::tensor::{AdamState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adversarial,
    Done,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_id: f64,
    pub l_dt: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_adv: f64,
}

impl LossRecord {
    pub const HEADER: [&'static str; 8] = [
        "iteration",
        "L_ce",
        "L_Dice",
        "L_ID",
        "L_DT",
        "L_G",
        "L_D",
        "L_adv",
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub iteration: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Iterations completed; shared by both phases.
    pub iteration: u64,
    pub phase: Phase,
    pub g: ModelParams,
    pub g_adam: AdamState,
    pub d: ModelParams,
    pub d_adam: AdamState,
    pub history: Vec<LossRecord>,
    pub events: Vec<TrainEvent>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    iteration: u64,
    phase: Phase,
    g_adam_step: u64,
    d_adam_step: u64,
    config: String,
    history: Vec<LossRecord>,
    events: Vec<TrainEvent>,
}

pub(crate) fn discriminator_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5851_F42D_4C95_7F2D)
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = build_generator(&cfg.generator_config(), cfg.seed)?;
        let d = build_discriminator(&cfg.discriminator_config(), discriminator_seed(cfg.seed))?;
        let g_adam = AdamState::for_params(g.tensors(), cfg.lr, cfg.decay);
        let d_adam = AdamState::for_params(d.tensors(), cfg.lr, cfg.decay);
        let mut s = Self {
            iteration: 0,
            phase: Phase::Pretrain,
            g,
            g_adam,
            d,
            d_adam,
            history: Vec::new(),
            events: Vec::new(),
        };
        s.update_phase(cfg);
        Ok(s)
    }

    pub fn update_phase(&mut self, cfg: &TrainConfig) {
        self.phase = if self.iteration < cfg.pretrain_iters {
            Phase::Pretrain
        } else if self.iteration < cfg.total_iters() {
            Phase::Adversarial
        } else {
            Phase::Done
        };
    }

    pub fn save(&self, dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.g.save(dir.join("generator.ckpt"))?;
        self.d.save(dir.join("discriminator.ckpt"))?;

        let mut entries = Vec::new();
        for (tag, params, adam) in [("g", &self.g, &self.g_adam), ("d", &self.d, &self.d_adam)] {
            let (first, second) = adam.moments();
            for ((name, t), (m, v)) in params
                .names()
                .iter()
                .zip(params.tensors())
                .zip(first.iter().zip(second))
            {
                entries.push((
                    format!("{tag}.m/{name}"),
                    Tensor::new(t.shape().to_vec(), m.clone())?,
                ));
                entries.push((
                    format!("{tag}.v/{name}"),
                    Tensor::new(t.shape().to_vec(), v.clone())?,
                ));
            }
        }
        NamedTensors {
            fingerprint: self.g.fingerprint() ^ self.d.fingerprint(),
            seed: self.g.seed(),
            entries,
        }
        .write(dir.join("optimizer.ckpt"))?;

        let state = StateFile {
            iteration: self.iteration,
            phase: self.phase,
            g_adam_step: self.g_adam.step_count(),
            d_adam_step: self.d_adam.step_count(),
            config: cfg.to_text(),
            history: self.history.clone(),
            events: self.events.clone(),
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Restores a state saved by [`TrainState::save`] for the same configuration.
    pub fn load(dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: StateFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        let saved = TrainConfig::from_text(&state.config)?;
        if saved.generator_config() != cfg.generator_config()
            || saved.discriminator_config() != cfg.discriminator_config()
        {
            return Err(Error::Config(format!(
                "checkpoint {} was written for different network architectures",
                dir.display()
            )));
        }
        let g = ModelParams::load(
            dir.join("generator.ckpt"),
            &Architecture::Generator(cfg.generator_config()),
        )?;
        let d = ModelParams::load(
            dir.join("discriminator.ckpt"),
            &Architecture::Discriminator(cfg.discriminator_config()),
        )?;

        let opt_path = dir.join("optimizer.ckpt");
        let opt = NamedTensors::read(&opt_path)?;
        let mut moments = opt.entries.into_iter();
        let mut restore = |tag: &str, params: &ModelParams, step: u64| -> Result<AdamState> {
            let mut adam = AdamState::for_params(params.tensors(), cfg.lr, cfg.decay);
            let (mut first, mut second) = (Vec::new(), Vec::new());
            for name in params.names() {
                for (kind, dst) in [("m", &mut first), ("v", &mut second)] {
                    let want = format!("{tag}.{kind}/{name}");
                    match moments.next() {
                        Some((n, t)) if n == want => dst.push(t.into_data()),
                        _ => {
                            return Err(Error::format(
                                &opt_path,
                                format!("missing optimizer entry {want}"),
                            ))
                        }
                    }
                }
            }
            adam.restore(step, first, second)?;
            Ok(adam)
        };
        let g_adam = restore("g", &g, state.g_adam_step)?;
        let d_adam = restore("d", &d, state.d_adam_step)?;
        Ok(Self {
            iteration: state.iteration,
            phase: state.phase,
            g,
            g_adam,
            d,
            d_adam,
            history: state.history,
            events: state.events,
        })
    }

    /// The loss log as CSV text.
    pub fn log_csv(&self) -> String {
        let mut s = LossRecord::HEADER.join(",");
        s.push('\n');
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration, r.l_ce, r.l_dice, r.l_id, r.l_dt, r.l_g, r.l_d, r.l_adv
            ));
        }
        s
    }
}
