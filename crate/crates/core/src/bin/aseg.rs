use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use aseg::data::nifti::{default_label_table, read_nifti_mask, read_nifti_volume};
use aseg::data::{
    load_mask, load_volume, save_mask, save_volume, synth_phantom, write_dataset, DatasetManifest,
    MaskVolume, Modality, PhantomConfig,
};
use aseg::metrics::evaluate;
use aseg::predict::{load_generator, predict_volume, PredictOptions, DEFAULT_PREDICT_CROP};
use aseg::train::{train, TrainConfig, TrainingData};
use aseg::transfer::{assemble_transfer_set, pseudo_mask_volume, CollisionPolicy};
use aseg::visualize::{export_overlays, plot_loss_log};
use aseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "aseg",
    version,
    about = "Adversarial multi-sequence cardiac MR segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Last,
    First,
}

#[derive(Subcommand)]
enum Command {
    /// Train G (and D) on a dataset manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint under --out.
        #[arg(long)]
        resume: bool,
        /// Print a progress line every this many iterations (0 = silent).
        #[arg(long, default_value_t = 10)]
        every: u64,
    },
    /// Segment one volume with a trained generator.
    Predict {
        /// A generator checkpoint, or a run directory containing generator.ckpt.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config describing the architecture; defaults to the nearest config.txt.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PREDICT_CROP)]
        crop: usize,
        /// Also write per-slice overlay images here.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Score predicted masks against references, pairing by patient and sequence.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only consider masks of this sequence.
        #[arg(long)]
        modality: Option<Modality>,
    },
    /// Copy bSSFP/T2 expert masks onto unlabeled LGE slices.
    TransferMasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Policy::Last)]
        policy: Policy,
    },
    /// Write a synthetic multi-sequence phantom dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 15)]
        patients: usize,
        /// Slices per volume: one count for all sequences, or bSSFP,T2,LGE.
        #[arg(long, value_delimiter = ',', default_values_t = [10, 5, 12])]
        slices: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        lge_labeled_fraction: f64,
        #[arg(long, default_value_t = 144)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot every loss column of a training log.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Defaults to a `plots` directory next to the log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert NIfTI-1 image (and mask) files to the native format.
    Convert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default training config.
    Defaults,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            manifest,
            out,
            resume,
            every,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let cases = DatasetManifest::load(&manifest)?.load_all()?;
            let data = TrainingData::from_cases(&cases, &cfg)?;
            println!(
                "training on {} expert and {} pseudo samples, {} iterations ({} adversarial)",
                data.s.len(),
                data.t.len(),
                cfg.total_iters(),
                cfg.adversarial_phase_iters()
            );
            let mut report = |s: &aseg::train::TrainState, r: &aseg::train::LossRecord| {
                if every > 0 && (s.iteration % every == 0 || s.iteration == cfg.total_iters()) {
                    println!(
                        "iter {:>6}  {:?}  L_ID {:.4}  L_DT {:.4}  L_D {:.4}  L_adv {:.4}",
                        r.iteration, s.phase, r.l_id, r.l_dt, r.l_d, r.l_adv
                    );
                }
                true
            };
            let state = train(&cfg, &data, &out, resume, Some(&mut report))?;
            println!(
                "done at iteration {}; outputs in {}",
                state.iteration,
                out.display()
            );
            if !state.events.is_empty() {
                println!("{} events logged, see events.log", state.events.len());
            }
            Ok(())
        }
        Command::Predict {
            checkpoint,
            volume,
            out,
            config,
            crop,
            overlays,
        } => {
            let ckpt = if checkpoint.is_dir() {
                checkpoint.join("generator.ckpt")
            } else {
                checkpoint
            };
            let cfg = match config.or_else(|| find_config(&ckpt)) {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let g = load_generator(&ckpt, &cfg.generator_config())?;
            let v = load_volume(&volume)?;
            let mask = predict_volume(
                &g,
                &v,
                PredictOptions {
                    crop_size: crop,
                    batch: 4,
                },
            )?;
            save_mask(&mask, &out)?;
            if let Some(dir) = overlays {
                let files = export_overlays(&v, &mask, &dir)?;
                println!("{} overlays in {}", files.len(), dir.display());
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            pred,
            reference,
            out,
            modality,
        } => {
            let keep = |m: &MaskVolume| modality.is_none_or(|x| m.modality == x);
            let preds: Vec<_> = masks_in(&pred)?.into_iter().filter(keep).collect();
            let refs: Vec<_> = masks_in(&reference)?
                .into_iter()
                .filter(|m| keep(m) && m.provenance == aseg::data::Provenance::Expert)
                .collect();
            let report = evaluate(&preds, &refs)?;
            report.write(&out)?;
            for r in &report.mean {
                println!(
                    "mean {:<4} dice {:.4}  jaccard {:.4}  asd {:.2} mm  hd {:.2} mm",
                    r.class, r.dice, r.jaccard, r.asd_mm, r.hd_mm
                );
            }
            println!(
                "wrote {} and {}",
                out.display(),
                out.with_extension("json").display()
            );
            Ok(())
        }
        Command::TransferMasks { manifest, policy } => {
            let policy = match policy {
                Policy::Last => CollisionPolicy::LastWriter,
                Policy::First => CollisionPolicy::FirstWriter,
            };
            let m = DatasetManifest::load(&manifest)?;
            let cases = m.load_all()?;
            let refs: Vec<_> = cases.iter().collect();
            let (pseudo, summary) = assemble_transfer_set(&refs, policy)?;
            println!(
                "{:<10} {:<6} {:>8} {:>8} {:>10}",
                "patient", "source", "source_n", "target_n", "collisions"
            );
            for s in &summary {
                println!(
                    "{:<10} {:<6} {:>8} {:>8} {:>10}",
                    s.patient_id,
                    s.source,
                    s.stats.source_slices,
                    s.stats.target_slices,
                    s.stats.collisions
                );
            }
            for (entry, case) in m.cases.iter().zip(&cases) {
                if case.modality() != Modality::Lge {
                    continue;
                }
                for source in [Modality::Bssfp, Modality::T2] {
                    let mine: Vec<_> = pseudo
                        .iter()
                        .filter(|p| {
                            p.patient_id == case.patient_id() && p.source_modality == source
                        })
                        .cloned()
                        .collect();
                    if mine.is_empty() {
                        continue;
                    }
                    let vol = pseudo_mask_volume(&case.volume, &mine)?;
                    let image = m.resolve(&entry.image);
                    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("lge");
                    let path = image.with_file_name(format!("{stem}_pseudo_{source}.msk"));
                    save_mask(&vol, &path)?;
                    println!("wrote {}", path.display());
                }
            }
            Ok(())
        }
        Command::Synth {
            seed,
            patients,
            slices,
            lge_labeled_fraction,
            size,
            out,
        } => {
            let slices = match slices.as_slice() {
                [n] => [*n; 3],
                [a, b, c] => [*a, *b, *c],
                _ => {
                    return Err(Error::Config(
                        "--slices takes one count or three (bSSFP,T2,LGE)".into(),
                    ))
                }
            };
            if !(0.0..=1.0).contains(&lge_labeled_fraction) {
                return Err(Error::Config(
                    "--lge-labeled-fraction must lie in [0, 1]".into(),
                ));
            }
            let cfg = PhantomConfig {
                seed,
                patients,
                slices,
                lge_labeled: (lge_labeled_fraction * patients as f64).round() as usize,
                height: size,
                width: size,
                ..PhantomConfig::default()
            };
            let cases = synth_phantom(&cfg)?;
            write_dataset(&cases, &out)?;
            println!(
                "wrote {} volumes for {} patients ({} with LGE labels) to {}",
                cases.len(),
                patients,
                cfg.lge_labeled,
                out.display()
            );
            Ok(())
        }
        Command::Report { log, out } => {
            let out = out.unwrap_or_else(|| log.parent().unwrap_or(Path::new(".")).join("plots"));
            for f in plot_loss_log(&log, &out)? {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Convert {
            image,
            mask,
            modality,
            patient,
            out,
        } => {
            fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let stem = format!("{patient}_{modality}");
            let v = read_nifti_volume(&image, modality, &patient)?;
            save_volume(&v, out.join(format!("{stem}.vol")))?;
            if let Some(m) = mask {
                let table: BTreeMap<i64, u8> = default_label_table();
                let mv = read_nifti_mask(&m, modality, &patient, &table)?;
                if mv.extents != v.extents {
                    return Err(Error::Data(format!(
                        "mask extents {:?} differ from image {:?}",
                        mv.extents, v.extents
                    )));
                }
                save_mask(&mv, out.join(format!("{stem}_gt.msk")))?;
            }
            println!("wrote {stem} to {}", out.display());
            Ok(())
        }
        Command::Defaults => {
            print!("{}", TrainConfig::default().to_text());
            Ok(())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// The closest `config.txt` in the checkpoint's directory or its ancestors.
fn find_config(ckpt: &Path) -> Option<PathBuf> {
    ckpt.ancestors()
        .skip(1)
        .map(|d| d.join("config.txt"))
        .find(|p| p.is_file())
}

fn masks_in(dir: &Path) -> Result<Vec<MaskVolume>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "msk"))
        .collect();
    paths.sort();
    paths.iter().map(load_mask).collect()
}
