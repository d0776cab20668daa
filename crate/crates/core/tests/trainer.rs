use std::fs;

use aseg::data::{synth_phantom, Case, Modality, PhantomConfig, Plane, Split};
use aseg::error::Error;
use aseg::losses::Supervision;
use aseg::nn::GeneratorConfig;
use aseg::predict::{argmax_channels, load_generator, predict_volume, PredictOptions};
use aseg::tensor::Tensor;
use aseg::train::{
    adversarial_step, batch_iterator, discriminator_objective, discriminator_step, generator_step,
    prepare_batch, pretrain_step, run_iteration, train, LossRecord, Phase, RunLayout, Sample,
    TrainConfig, TrainState, TrainingData,
};
use aseg::visualize::{export_overlays, grayscale, overlay, plot_loss_log, Rgb, OVERLAY_ALPHA};

fn tiny(crop: usize) -> TrainConfig {
    TrainConfig {
        crop_size: crop,
        crop_shift: 4,
        batch_size: 4,
        generator_widths: vec![4, 8],
        generator_dilations: vec![1, 2],
        param_budget: false,
        discriminator_widths: vec![4, 8],
        lr: 1e-3,
        checkpoint_every: 3,
        ..TrainConfig::default()
    }
}

fn phantom() -> Vec<Case> {
    synth_phantom(&PhantomConfig {
        patients: 3,
        lge_labeled: 1,
        height: 32,
        width: 32,
        slices: [4, 3, 5],
        ..PhantomConfig::default()
    })
    .unwrap()
}

fn expert_slices(cases: &[Case], count: usize) -> Vec<Sample> {
    let mut out = Vec::new();
    for c in cases.iter().filter(|c| c.modality() == Modality::Bssfp) {
        let m = c.mask.as_ref().unwrap();
        let (h, w) = m.plane();
        for s in (0..m.slices()).filter(|&s| m.slice_is_annotated(s)) {
            if out.len() == count {
                return out;
            }
            out.push(Sample {
                image: Plane::new(h, w, c.volume.slice(s).to_vec()).unwrap(),
                mask: Plane::new(h, w, m.slice(s).to_vec()).unwrap(),
            });
        }
    }
    out
}

fn mixed_data(cfg: &TrainConfig) -> TrainingData {
    let cases = phantom();
    let data = TrainingData::from_cases(&cases, cfg).unwrap();
    assert!(!data.s.is_empty() && !data.t.is_empty());
    data
}

fn first_batch(data: &TrainingData, cfg: &TrainConfig) -> aseg::train::PreparedBatch {
    let mut it = batch_iterator(data, cfg).unwrap();
    let b = it.next_batch();
    prepare_batch(data, &b, cfg, 0).unwrap()
}

#[test]
fn default_config_values() {
    let c = TrainConfig::default();
    let text = c.to_text();
    for line in [
        "lambda = 0.9",
        "beta1 = 0.9",
        "beta2 = 0.9",
        "lr = 0.0002",
        "decay = 0.00000001",
        "batch_size = 16",
        "pretrain_iters = 300",
        "adversarial_iters = 900",
        "non_saturating_G = false",
        "include_T_in_D_real = true",
    ] {
        assert!(
            text.lines().any(|l| l == line),
            "missing {line:?} in\n{text}"
        );
    }
    assert_eq!(TrainConfig::from_text(&text).unwrap(), c);
    let aliased = TrainConfig::from_text("λ = 1\nj = 5\nk = 7\nalpha = 0.8").unwrap();
    assert_eq!(
        (
            aliased.lambda,
            aliased.pretrain_iters,
            aliased.adversarial_iters
        ),
        (1.0, 5, 7)
    );
    assert_eq!((aliased.beta1, aliased.beta2), (0.8, 0.8));
    assert_eq!(
        (aliased.adversarial_phase_iters(), aliased.total_iters()),
        (2, 7)
    );
}

#[test]
fn zero_iterations_only_advance_phase() {
    let cfg = TrainConfig {
        pretrain_iters: 0,
        adversarial_iters: 0,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let out = tempfile::tempdir().unwrap();
    let fresh = TrainState::new(&cfg).unwrap();
    let done = train(&cfg, &data, out.path(), false, None).unwrap();
    assert_eq!(done.phase, Phase::Done);
    assert_eq!((done.iteration, done.history.len()), (0, 0));
    assert_eq!(done.g, fresh.g);
    assert_eq!(done.d, fresh.d);
}

#[test]
fn pretraining_lowers_l_id_window_by_window() {
    let cfg = TrainConfig {
        lambda: 1.0,
        pretrain_iters: 200,
        adversarial_iters: 0,
        augment: false,
        ..tiny(32)
    };
    let data = TrainingData::from_samples(expert_slices(&phantom(), 8), vec![]);
    assert_eq!(data.s.len(), 8);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut it = batch_iterator(&data, &cfg).unwrap();
    let d0 = state.d.clone();
    while state.iteration < 200 {
        run_iteration(&mut state, &data, &mut it, &cfg).unwrap();
    }
    assert_eq!(state.d, d0, "pretraining must not touch D");
    let means: Vec<f64> = state
        .history
        .chunks(50)
        .map(|w| w.iter().map(|r| r.l_id).sum::<f64>() / w.len() as f64)
        .collect();
    assert_eq!(means.len(), 4);
    assert!(means.windows(2).all(|p| p[1] < p[0]), "{means:?}");
    for r in &state.history {
        assert_eq!((r.l_d, r.l_dt), (0.0, 0.0));
        assert_eq!(r.l_adv, r.l_g);
    }
}

#[test]
fn lambda_one_never_builds_a_transfer_set() {
    let cases = phantom();
    let on = TrainConfig {
        lambda: 0.9,
        ..tiny(32)
    };
    let off = TrainConfig {
        lambda: 1.0,
        ..tiny(32)
    };
    let a = TrainingData::from_cases(&cases, &on).unwrap();
    let b = TrainingData::from_cases(&cases, &off).unwrap();
    assert!(!a.t.is_empty() && b.t.is_empty());
    assert_eq!(a.s, b.s);
    // Only training-split cases contribute; P001 is validation.
    assert_eq!(b.s.len(), 2 * (4 + 3) * 5);
}

#[test]
fn sub_steps_freeze_the_other_network() {
    let cfg = TrainConfig {
        pretrain_iters: 0,
        adversarial_iters: 4,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let batch = first_batch(&data, &cfg);
    assert!(batch.tags.contains(&Supervision::Pseudo));

    let mut state = TrainState::new(&cfg).unwrap();
    let g0 = state.g.clone();
    let d0 = state.d.clone();
    let ds = discriminator_step(&mut state, &batch, &cfg).unwrap();
    assert!(ds.applied);
    assert_eq!(state.g, g0, "D step changed G");
    assert_ne!(state.d, d0);
    let d1 = state.d.clone();
    let gs = generator_step(&mut state, &batch, &cfg).unwrap();
    assert!(gs.applied && !gs.frozen_grad_materialized);
    assert_eq!(state.d, d1, "G step changed D");
    assert_ne!(state.g, g0);

    // The fused step is the two halves in sequence.
    let mut fused = TrainState::new(&cfg).unwrap();
    adversarial_step(&mut fused, &batch, &cfg).unwrap();
    assert_eq!(fused.g, state.g);
    assert_eq!(fused.d, state.d);
    assert_eq!(fused.g_adam, state.g_adam);
    assert_eq!(fused.d_adam, state.d_adam);
}

#[test]
fn discriminator_steps_ascend_its_objective() {
    let cfg = TrainConfig {
        pretrain_iters: 0,
        adversarial_iters: 50,
        lr: 2e-4,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut it = batch_iterator(&data, &cfg).unwrap();
    let mut ascents = 0;
    for i in 0..50 {
        let b = prepare_batch(&data, &it.next_batch(), &cfg, i).unwrap();
        let before = discriminator_objective(&state, &b, &cfg).unwrap();
        let step = discriminator_step(&mut state, &b, &cfg).unwrap();
        assert_eq!(step.l_d, before);
        if discriminator_objective(&state, &b, &cfg).unwrap() >= before {
            ascents += 1;
        }
    }
    assert!(ascents >= 40, "{ascents}/50");
}

#[test]
fn non_finite_losses() {
    let cfg = TrainConfig {
        pretrain_iters: 1,
        adversarial_iters: 3,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let batch = first_batch(&data, &cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    state.g.get_mut("head.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = pretrain_step(&mut state, &batch, &cfg).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert!(err.to_string().contains("Expert"), "{err}");

    // Adversarial: both halves skip, the counter still advances.
    state.iteration = 1;
    state.update_phase(&cfg);
    let (g0, d0) = (state.g.clone(), state.d.clone());
    let mut it = batch_iterator(&data, &cfg).unwrap();
    let r = run_iteration(&mut state, &data, &mut it, &cfg).unwrap();
    assert_eq!(state.iteration, 2);
    assert!(r.l_g.is_nan());
    assert_eq!(state.d, d0);
    assert_eq!(state.g.tensors().len(), g0.tensors().len());
    assert!(state
        .events
        .iter()
        .any(|e| e.message.contains("D update skipped")));
    assert!(state
        .events
        .iter()
        .any(|e| e.message.contains("G update skipped")));
}

fn file_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in [
        "generator.ckpt",
        "discriminator.ckpt",
        "train_log.csv",
        "events.log",
        "config.txt",
    ] {
        out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    out
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = TrainConfig {
        pretrain_iters: 3,
        adversarial_iters: 7,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let sa = train(&cfg, &data, a.path(), false, None).unwrap();
    train(&cfg, &data, b.path(), false, None).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    assert_eq!(sa.iteration, 7);
    assert_eq!(sa.phase, Phase::Done);

    // Interrupt after 4 iterations (checkpoint at 3), then resume.
    let mut stop = |s: &TrainState, _: &LossRecord| s.iteration < 4;
    train(&cfg, &data, c.path(), false, Some(&mut stop)).unwrap();
    let layout = RunLayout::new(c.path());
    assert!(layout
        .latest_checkpoint()
        .unwrap()
        .unwrap()
        .ends_with("iter_000003"));
    let resumed = train(&cfg, &data, c.path(), true, None).unwrap();
    assert_eq!(resumed, sa);
    assert_eq!(file_bytes(a.path()), file_bytes(c.path()));
    for it in [3, 6, 7] {
        let p = RunLayout::new(a.path()).checkpoint(it);
        for f in [
            "generator.ckpt",
            "discriminator.ckpt",
            "optimizer.ckpt",
            "state.json",
        ] {
            assert_eq!(
                fs::read(p.join(f)).unwrap(),
                fs::read(layout.checkpoint(it).join(f)).unwrap()
            );
        }
    }
}

#[test]
fn resume_rejects_other_architecture() {
    let cfg = TrainConfig {
        pretrain_iters: 3,
        adversarial_iters: 3,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let out = tempfile::tempdir().unwrap();
    train(&cfg, &data, out.path(), false, None).unwrap();
    let other = TrainConfig {
        generator_widths: vec![6, 8],
        ..cfg.clone()
    };
    let dir = RunLayout::new(out.path())
        .latest_checkpoint()
        .unwrap()
        .unwrap();
    assert!(TrainState::load(dir, &other).is_err());
}

#[test]
fn no_adversarial_phase_leaves_d_untouched() {
    let cfg = TrainConfig {
        pretrain_iters: 4,
        adversarial_iters: 0,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let out = tempfile::tempdir().unwrap();
    let s = train(&cfg, &data, out.path(), false, None).unwrap();
    assert_eq!(s.d, TrainState::new(&cfg).unwrap().d);
    assert_eq!(s.d_adam.step_count(), 0);
    assert_eq!(s.g_adam.step_count(), 4);
}

#[test]
fn smoke_run_writes_full_log() {
    let cfg = TrainConfig {
        pretrain_iters: 2,
        adversarial_iters: 5,
        ..tiny(32)
    };
    let data = mixed_data(&cfg);
    let out = tempfile::tempdir().unwrap();
    train(&cfg, &data, out.path(), false, None).unwrap();
    let mut reader = csv::Reader::from_path(out.path().join("train_log.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        LossRecord::HEADER.to_vec()
    );
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        assert!(row.iter().all(|v| v.is_finite()));
    }
    for row in &rows[2..] {
        assert!(row[6] < 0.0, "L_D should be a sum of logs");
        assert!((row[7] - (row[6] + row[5])).abs() < 1e-9);
    }
    let saved = TrainConfig::load(out.path().join("config.txt")).unwrap();
    assert_eq!(saved, cfg);

    let plots = tempfile::tempdir().unwrap();
    let files = plot_loss_log(out.path().join("train_log.csv"), plots.path()).unwrap();
    assert_eq!(files.len(), 7);
    let img = Rgb::read(&files[0]).unwrap();
    assert!(img.pixels.iter().any(|p| *p == [200, 30, 30]));
}

#[test]
fn prediction_contract() {
    let cfg = TrainConfig {
        pretrain_iters: 2,
        adversarial_iters: 0,
        ..tiny(32)
    };
    let cases = phantom();
    let data = TrainingData::from_cases(&cases, &cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    train(&cfg, &data, out.path(), false, None).unwrap();
    let g = load_generator(out.path().join("generator.ckpt"), &cfg.generator_config()).unwrap();
    let lge = cases
        .iter()
        .find(|c| c.modality() == Modality::Lge && c.split == Split::Val)
        .unwrap();
    for crop in [16, 32, 48] {
        let m = predict_volume(
            &g,
            &lge.volume,
            PredictOptions {
                crop_size: crop,
                batch: 2,
            },
        )
        .unwrap();
        assert_eq!(m.extents, lge.volume.extents);
        assert!(m.labels.iter().all(|&l| l < 4));
        if crop == 16 {
            // Outside the center window everything is background.
            let (h, w) = m.plane();
            assert!((0..h * w).filter(|k| k % w < 8).all(|k| m.slice(0)[k] == 0));
        }
    }
    assert!(predict_volume(
        &g,
        &lge.volume,
        PredictOptions {
            crop_size: 15,
            batch: 2
        }
    )
    .is_err());

    let other = GeneratorConfig::unbounded(vec![4, 6], vec![1, 2]);
    let err = load_generator(out.path().join("generator.ckpt"), &other).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    // Equal logits everywhere: ties resolve to background.
    let mut flat = g.clone();
    for name in ["head.weight", "head.bias"] {
        flat.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let m = predict_volume(
        &flat,
        &lge.volume,
        PredictOptions {
            crop_size: 32,
            batch: 4,
        },
    )
    .unwrap();
    assert!(m.labels.iter().all(|&l| l == 0));
    let scores = Tensor::new(
        [1, 4, 1, 3],
        vec![1.0, 0.0, 2.0, 1.0, 3.0, 2.0, 0.0, 3.0, 5.0, 0.0, 0.0, 0.0],
    )
    .unwrap();
    assert_eq!(argmax_channels(&scores).unwrap(), vec![0, 1, 2]);
}

#[test]
fn overlay_contract() {
    let cases = phantom();
    let case = cases.iter().find(|c| c.mask.is_some()).unwrap();
    let mask = case.mask.as_ref().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_overlays(&case.volume, mask, dir.path()).unwrap();
    assert_eq!(files.len(), case.volume.slices());

    let base = grayscale(&case.volume, 0);
    let empty = vec![0u8; base.pixels.len()];
    assert_eq!(overlay(&base, &empty).unwrap(), base);

    let mut labels = empty.clone();
    labels[..3].copy_from_slice(&[1, 2, 3]);
    let o = overlay(&base, &labels).unwrap();
    for (k, ch) in [(0usize, 0usize), (1, 1), (2, 2)] {
        let g = base.pixels[k][ch] as f64;
        assert_eq!(
            o.pixels[k][ch],
            ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * 255.0).round() as u8
        );
    }
    let written = Rgb::read(&files[0]).unwrap();
    assert_eq!(
        written,
        overlay(&grayscale(&case.volume, 0), mask.slice(0)).unwrap()
    );

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert!(export_overlays(&case.volume, mask, blocker.join("sub")).is_err());
}
