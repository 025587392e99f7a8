//! `alft`: dataset generation, training, evaluation, ablations, noise sweeps
//! and reports for the anchor-based pose lifter on the synthetic gym.

mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alft::model::Variant;
use alft::skeleton::{Pose2D, SkeletonTopology};
use alft::synthgym::{
    ablation_rows, evaluate, evaluate_predictor, generate_dataset, load_checkpoint, noise_sweep, run_arm, save_checkpoint, sweep_csv,
    synthesize_features, train, Dataset, ExperimentConfig, Scene, Split, Suite,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "alft", version, about = "Anchor-based 2D-to-3D pose lifting on a synthetic gym")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the JSON config file,
/// which overrides the built-in defaults.
#[derive(Args, Clone, Debug)]
struct Common {
    /// Directory that receives every output.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON experiment config; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; falls back to ALFT_SEED, then the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples.
    #[arg(long)]
    n: Option<usize>,
    /// Test samples.
    #[arg(long)]
    test_n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Input noise of generated datasets, in pixels.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant and write its checkpoint and training curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on one test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// full, challenging, non or high_occlusion.
        #[arg(long, default_value = "full")]
        split: Split,
        /// Score the ground truth itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Evaluate a checkpoint on the test scenes re-noised at several sigmas.
    SweepNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        sigmas: Vec<f64>,
    },
    /// Train and evaluate every arm of an ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// anchors, depth, sampling or bins.
        #[arg(long)]
        suite: Suite,
    },
    /// Lift one 2D pose to 3D and print the prediction as JSON.
    Lift {
        #[command(flatten)]
        common: Common,
        /// JSON file with `pose2d` (pixels) and optional `depths` and `occlusion`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate every CSV under the output directory into `report.md`.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::SweepNoise { .. } => "sweep-noise",
            Command::Ablate { .. } => "ablate",
            Command::Lift { .. } => "lift",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::SweepNoise { common, .. }
            | Command::Ablate { common, .. }
            | Command::Lift { common, .. }
            | Command::Report { common } => common,
        }
    }
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    let env_seed = match std::env::var("ALFT_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("ALFT_SEED `{s}` is not an unsigned integer"))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = c.seed.or(env_seed) {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(n) = c.n {
        cfg.synth.sample_count = n;
    }
    if let Some(n) = c.test_n {
        cfg.test_count = n;
    }
    if let Some(e) = c.epochs {
        cfg.train.optimizer.epochs = e;
    }
    if let Some(lr) = c.lr {
        cfg.train.optimizer.learning_rate = lr;
    }
    if let Some(b) = c.batch_size {
        cfg.train.optimizer.batch_size = b;
    }
    if let Some(s) = c.noise {
        cfg.synth.noise_sigma = s;
    }
    cfg.synth.validate()?;
    cfg.model.validate()?;
    cfg.train.optimizer.validate()?;
    Ok(cfg)
}

/// Load `<out>/data/<stem>` when it was generated with the same config,
/// otherwise generate and save it.
fn dataset(out: &Path, stem: &str, synth: &alft::synthgym::SynthConfig, written: &mut Vec<PathBuf>) -> Result<Dataset> {
    let dir = out.join("data");
    if dir.join(format!("{stem}.json")).exists() {
        if let Ok(d) = Dataset::load(&dir, stem) {
            if &d.config == synth {
                return Ok(d);
            }
        }
    }
    let d = generate_dataset(synth, &SkeletonTopology::h36m())?;
    d.save(&dir, stem)?;
    written.push(dir.join(format!("{stem}.json")));
    written.push(dir.join(format!("{stem}.alft")));
    Ok(d)
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

const EVAL_HEADER: &str = "split,mpjpe,pa_mpjpe,pck,auc,n";

#[derive(Deserialize)]
struct LiftInput {
    pose2d: Vec<[f64; 2]>,
    #[serde(default)]
    depths: Option<Vec<f64>>,
    #[serde(default)]
    occlusion: f64,
}

fn run(cmd: &Command, cfg: &ExperimentConfig, written: &mut Vec<PathBuf>) -> Result<()> {
    let out = &cmd.common().out;
    match cmd {
        Command::Gen { .. } => {
            dataset(out, "train", &cfg.synth, written)?;
            dataset(out, "test", &cfg.test_synth(), written)?;
        }
        Command::Train { variant, .. } => {
            let train_set = dataset(out, "train", &cfg.synth, written)?;
            let outcome = train(&cfg.model, *variant, &train_set, None, &cfg.train)?;
            let ckpt = out.join("checkpoints").join(format!("{variant}.alft"));
            std::fs::create_dir_all(ckpt.parent().expect("has parent"))?;
            save_checkpoint(&outcome.model, *variant, &ckpt)?;
            written.push(ckpt.clone());
            write(out.join("curves").join(format!("{variant}.csv")), &outcome.curve_csv(), written)?;
            println!("{}", ckpt.display());
        }
        Command::Eval {
            checkpoint, split, oracle, ..
        } => {
            let test_set = dataset(out, "test", &cfg.test_synth(), written)?;
            let (name, ev) = if *oracle {
                (
                    "oracle".to_string(),
                    evaluate_predictor(&test_set, cfg.train.pck_threshold, |_, s| Ok(s.gt3d.clone()))?,
                )
            } else {
                let path = checkpoint.as_ref().expect("clap requires a checkpoint without --oracle");
                let (model, _) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                (stem(path), evaluate(&model, &test_set, cfg.train.pck_threshold)?)
            };
            let label = serde_json::to_value(split)?.as_str().unwrap_or("split").to_string();
            let mut csv = format!("{EVAL_HEADER}\n");
            match ev.split(*split) {
                Some(r) => {
                    csv.push_str(&format!("{label},{}\n", r.csv_row()));
                    println!(
                        "{label}: mpjpe {:.6} pa_mpjpe {:.6} pck {:.2} auc {:.2} n {}",
                        r.mpjpe, r.pa_mpjpe, r.pck, r.auc, r.sample_count
                    );
                }
                None => eprintln!("split `{label}` is empty; no metrics reported"),
            }
            write(out.join("eval").join(format!("{name}_{label}.csv")), &csv, written)?;
        }
        Command::SweepNoise { checkpoint, sigmas, .. } => {
            if sigmas.iter().any(|s| s.is_nan() || *s < 0.0) {
                bail!("noise sigmas must be non-negative");
            }
            let test_set = dataset(out, "test", &cfg.test_synth(), written)?;
            let (model, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let rows = noise_sweep(&model, &test_set, sigmas, cfg.train.pck_threshold)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            write(out.join("sweeps").join(format!("{}.csv", stem(checkpoint))), &csv, written)?;
        }
        Command::Ablate { suite, .. } => {
            let train_set = dataset(out, "train", &cfg.synth, written)?;
            let test_set = dataset(out, "test", &cfg.test_synth(), written)?;
            let label = serde_json::to_value(suite)?.as_str().unwrap_or("suite").to_string();
            let mut results = Vec::new();
            for arm in suite.arms(&cfg.model) {
                eprintln!("training {}", arm.name);
                let r = run_arm(&arm, &train_set, &test_set, &cfg.train)?;
                let ckpt = out.join("checkpoints").join(format!("{label}_{}.alft", arm.name));
                std::fs::create_dir_all(ckpt.parent().expect("has parent"))?;
                save_checkpoint(&r.outcome.model, arm.variant, &ckpt)?;
                written.push(ckpt);
                write(
                    out.join("curves").join(format!("{label}_{}.csv", arm.name)),
                    &r.outcome.curve_csv(),
                    written,
                )?;
                results.push(r);
            }
            let csv = ablation_rows(&results);
            print!("{csv}");
            write(out.join("ablations").join(format!("{label}.csv")), &csv, written)?;
        }
        Command::Lift { input, checkpoint, .. } => {
            let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let li: LiftInput = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
            let (model, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let joints = model.cfg.joints;
            if li.pose2d.len() != joints {
                bail!("expected {joints} joints in pose2d, found {}", li.pose2d.len());
            }
            let depths = li.depths.unwrap_or_else(|| vec![0.0; joints]);
            if depths.len() != joints {
                bail!("expected {joints} depths, found {}", depths.len());
            }
            let pixels = Pose2D::pixels(li.pose2d);
            let size = cfg.synth.image_size;
            let pyramid = synthesize_features(&Scene {
                joints2d: &pixels,
                depths: &depths,
                occlusion: li.occlusion,
                image_size: size,
                blob_sigma: cfg.synth.blob_sigma,
                depth_range: (-1.0, 1.0),
            });
            let (normalized, clamped) = pixels.normalize(size[1], size[0])?;
            if clamped > 0 {
                eprintln!("{clamped} joints lay outside the image and were clamped");
            }
            let (pose, detail) = model.predict_detailed(&pyramid, &normalized, cfg.synth.seed)?;
            let json = match detail {
                Some(d) => d.dump_json(),
                None => serde_json::json!({ "pose3d": pose.coords }),
            };
            let text = serde_json::to_string_pretty(&json)?;
            println!("{text}");
            write(out.join("lift").join(format!("{}.json", stem(input))), &text, written)?;
        }
        Command::Report { .. } => {
            let md = report::build(out)?;
            write(out.join("report.md"), &md, written)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cmd = &cli.command;
    let result = resolve_config(cmd.common()).and_then(|cfg| {
        let mut m = RunManifest::start(cmd.name(), &cfg, &cmd.common().out)?;
        let mut written = Vec::new();
        let r = run(cmd, &cfg, &mut written);
        m.finish(&written, r.is_ok())?;
        r
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
