//! Command-line harness: dataset generation, the two training stages,
//! evaluation, the ablation suite, gradient checks, and the warp demo.
//!
//! Every run directory receives the exact serialized configuration and seed
//! that produced it. Exit codes: 0 success, 2 input error, 3 configuration
//! error, 4 contract violation, 5 corrupt data, 6 io.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{Precision, RunConfig};
use crate::data::{self, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::fisheye::{self, FisheyeIntrinsics, PinholeIntrinsics, WarpDirection};
use crate::metrics::{self, AblationRow};
use crate::model::Ablation;
use crate::tensor::{Scalar, Tensor4};
use crate::train::{self, TrainOutcome};
use crate::{bmp, gradcheck};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "gti3d",
    version,
    about = "Guided-transformer two-stream classifier for distorted fisheye clips"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Plain-text configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed applied to data generation, splits, and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision of the run.
    #[arg(long, value_parser = Precision::parse)]
    precision: Option<Precision>,
    /// Overwrite existing non-empty output directories.
    #[arg(long)]
    force: bool,
}

impl CommonOpts {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        if let Some(p) = self.precision {
            cfg.run.precision = p;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired flat/fisheye dataset with cross-subject splits.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the flat reference stream with cross-entropy.
    PretrainRgb {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fisheye stream under an ablation mode.
    TrainFisheye {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// plain | guidance | transformer | full
        #[arg(long, default_value = "full", value_parser = Ablation::parse)]
        ablation: Ablation,
        /// Pretrained reference checkpoint (required for guidance and full).
        #[arg(long)]
        rgb_checkpoint: Option<PathBuf>,
    },
    /// Report accuracy of a checkpoint over a stored split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train all four ablations over the configured seeds and tabulate.
    AblationSuite {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every analytic backward pass against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Warp a checkerboard (or BMP) through the fisheye model and back.
    WarpDemo {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
        /// Optional 24-bit BMP to warp instead of the checkerboard.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Full fisheye view angle in radians.
        #[arg(long)]
        fov: Option<f64>,
        /// Checkerboard image extent in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Checkerboard cell extent in pixels.
        #[arg(long, default_value_t = 16)]
        cell: usize,
    },
}

/// Entry point used by the binary: parses arguments, runs, maps errors to
/// exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            cmd_gen_data(&cfg, &out, common.force)
        }
        Command::PretrainRgb { common, data, out } => {
            let cfg = common.load()?;
            match cfg.run.precision {
                Precision::F32 => cmd_pretrain_rgb::<f32>(&cfg, &data, &out),
                Precision::F64 => cmd_pretrain_rgb::<f64>(&cfg, &data, &out),
            }
        }
        Command::TrainFisheye {
            common,
            data,
            out,
            ablation,
            rgb_checkpoint,
        } => {
            let cfg = common.load()?;
            match cfg.run.precision {
                Precision::F32 => {
                    cmd_train_fisheye::<f32>(&cfg, &data, &out, ablation, rgb_checkpoint.as_deref())
                }
                Precision::F64 => {
                    cmd_train_fisheye::<f64>(&cfg, &data, &out, ablation, rgb_checkpoint.as_deref())
                }
            }
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => {
            let cfg = common.load()?;
            match cfg.run.precision {
                Precision::F32 => cmd_eval::<f32>(&checkpoint, &data, &split),
                Precision::F64 => cmd_eval::<f64>(&checkpoint, &data, &split),
            }
        }
        Command::AblationSuite { common, out } => {
            let cfg = common.load()?;
            match cfg.run.precision {
                Precision::F32 => cmd_ablation_suite::<f32>(&cfg, &out, common.force),
                Precision::F64 => cmd_ablation_suite::<f64>(&cfg, &out, common.force),
            }
        }
        Command::Gradcheck { common } => cmd_gradcheck(common.seed.unwrap_or(17)),
        Command::WarpDemo {
            common,
            out,
            input,
            fov,
            size,
            cell,
        } => cmd_warp_demo(&out, input.as_deref(), fov, size, cell, common.force),
    }
}

fn ensure_output_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = out.read_dir()?.next().is_some();
        if non_empty && !force {
            return Err(Error::Input(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_echo(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::write(out.join("config.echo"), cfg.echo()?)?;
    Ok(())
}

fn load_split(data: &Path) -> Result<SplitSpec> {
    let path = data.join("splits.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Input(format!("cannot read split file {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::corrupt(&path, format!("bad split file: {e}")))
}

fn split_ids<'a>(split: &'a SplitSpec, tag: &str) -> Result<&'a [usize]> {
    match tag {
        "train" => Ok(&split.train_clips),
        "test" => Ok(&split.test_clips),
        other => Err(Error::Input(format!("unknown split '{other}' (expected train or test)"))),
    }
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    ensure_output_dir(out, force)?;
    let manifest = data::generate(&cfg.data, out)?;
    let split = data::split_cross_subject(&manifest, cfg.split.train_subjects, cfg.split.seed)?;
    let split_text = toml::to_string_pretty(&split)
        .map_err(|e| Error::Config(format!("split serialization failed: {e}")))?;
    std::fs::write(out.join("splits.toml"), split_text)?;
    write_echo(cfg, out)?;
    println!(
        "generated {} paired clips ({} classes, {} subjects) under {}",
        manifest.clips.len(),
        cfg.data.classes,
        cfg.data.subjects,
        out.display()
    );
    println!(
        "split: {} train / {} test clips ({} / {} subjects)",
        split.train_clips.len(),
        split.test_clips.len(),
        split.train_subjects.len(),
        split.test_subjects.len()
    );
    Ok(())
}

struct RunArtifacts {
    checkpoint: PathBuf,
    train_accuracy: f64,
    test_accuracy: f64,
}

/// Writes metrics, checkpoint, summary, and config echo for one training
/// run. Final accuracies are computed from the reloaded checkpoint so a
/// later eval reproduces them exactly.
fn persist_run<S: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    outcome: &TrainOutcome<S>,
    ds: &Dataset,
    split: &SplitSpec,
    ablation: Option<Ablation>,
    wall: f64,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out)?;
    write_echo(cfg, out)?;
    metrics::write_metrics_csv(&out.join("metrics.csv"), &outcome.rows, outcome.weights.spec.gt_modules)?;
    let name = match ablation {
        None => "rgb.ckpt".to_string(),
        Some(a) => format!("fisheye-{a}.ckpt"),
    };
    let ckpt_path = out.join(name);
    let meta = CheckpointMeta {
        kind: outcome.weights.kind,
        ablation,
        seed: cfg.train.seed,
        iterations: outcome.rows.len(),
        spec: outcome.weights.spec.clone(),
    };
    checkpoint::save(&ckpt_path, &outcome.weights, &meta)?;

    // Accuracy of the persisted weights (f32 on disk), so eval agrees.
    let (weights, meta) = checkpoint::load::<S>(&ckpt_path)?;
    let eval_ablation = meta.ablation.unwrap_or(Ablation::Plain);
    let train_accuracy =
        train::evaluate(ds, &split.train_clips, &weights, meta.spec.frames, eval_ablation)?;
    let test_accuracy =
        train::evaluate(ds, &split.test_clips, &weights, meta.spec.frames, eval_ablation)?;
    let summary = format!(
        "kind = \"{}\"\nablation = \"{}\"\nseed = {}\niterations = {}\ntrain_accuracy = {}\ntest_accuracy = {}\nwall_time_seconds = {}\n",
        meta.kind,
        ablation.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
        cfg.train.seed,
        meta.iterations,
        train_accuracy,
        test_accuracy,
        wall,
    );
    std::fs::write(out.join("summary.toml"), summary)?;
    Ok(RunArtifacts {
        checkpoint: ckpt_path,
        train_accuracy,
        test_accuracy,
    })
}

fn check_network_matches_data(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let d = &ds.manifest.config;
    let n = &cfg.network;
    if n.classes != d.classes {
        return Err(Error::Config(format!(
            "network expects {} classes but the dataset has {}",
            n.classes, d.classes
        )));
    }
    if n.channels != d.channels || n.height != d.height || n.width != d.width {
        return Err(Error::Config(format!(
            "network input {}x{}x{} does not match dataset {}x{}x{}",
            n.channels, n.height, n.width, d.channels, d.height, d.width
        )));
    }
    Ok(())
}

fn cmd_pretrain_rgb<S: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    check_network_matches_data(cfg, &ds)?;
    let split = load_split(data)?;
    let t0 = Instant::now();
    let outcome = train::pretrain_rgb::<S>(&ds, &split, &cfg.network, &cfg.train)?;
    let wall = t0.elapsed().as_secs_f64();
    let arts = persist_run(cfg, out, &outcome, &ds, &split, None, wall)?;
    println!(
        "flat stream: train accuracy {:.4}, test accuracy {:.4} ({} iterations, {:.1}s)",
        arts.train_accuracy,
        arts.test_accuracy,
        cfg.train.iterations,
        wall
    );
    println!("checkpoint: {}", arts.checkpoint.display());
    Ok(())
}

fn cmd_train_fisheye<S: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    ablation: Ablation,
    rgb_checkpoint: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::open(data)?;
    check_network_matches_data(cfg, &ds)?;
    let split = load_split(data)?;
    if ablation.uses_guidance() && rgb_checkpoint.is_none() {
        return Err(Error::Config(format!(
            "ablation '{ablation}' requires --rgb-checkpoint"
        )));
    }
    // Plain ignores the reference stream entirely.
    let reference = match (ablation, rgb_checkpoint) {
        (Ablation::Plain, _) | (_, None) => None,
        (_, Some(path)) => Some(checkpoint::load::<S>(path)?.0),
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.init_from_rgb = cfg.train.init_from_rgb && reference.is_some();
    let t0 = Instant::now();
    let outcome = train::train_fisheye::<S>(
        &ds,
        &split,
        reference.as_ref(),
        &cfg.network,
        &train_cfg,
        ablation,
    )?;
    let wall = t0.elapsed().as_secs_f64();
    let mut echo_cfg = cfg.clone();
    echo_cfg.train = train_cfg;
    let arts = persist_run(&echo_cfg, out, &outcome, &ds, &split, Some(ablation), wall)?;
    println!(
        "fisheye stream ({ablation}): train accuracy {:.4}, test accuracy {:.4} ({} iterations, {:.1}s)",
        arts.train_accuracy,
        arts.test_accuracy,
        cfg.train.iterations,
        wall
    );
    println!("checkpoint: {}", arts.checkpoint.display());
    Ok(())
}

fn cmd_eval<S: Scalar>(ckpt: &Path, data: &Path, split_tag: &str) -> Result<()> {
    let (weights, meta) = checkpoint::load::<S>(ckpt)?;
    let ds = Dataset::open(data)?;
    let split = load_split(data)?;
    let ids = split_ids(&split, split_tag)?;
    let ablation = meta.ablation.unwrap_or(Ablation::Plain);
    let accuracy = train::evaluate(&ds, ids, &weights, meta.spec.frames, ablation)?;
    let correct = (accuracy * ids.len() as f64).round() as usize;
    println!(
        "split={split_tag} stream={} ablation={} total={} correct={} accuracy={}",
        meta.kind,
        ablation,
        ids.len(),
        correct,
        accuracy
    );
    Ok(())
}

fn cmd_ablation_suite<S: Scalar>(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    ensure_output_dir(out, force)?;
    write_echo(cfg, out)?;
    let seeds = cfg.suite.seeds.clone();
    if seeds.is_empty() {
        return Err(Error::Config("ablation suite needs at least one seed".into()));
    }
    let mut flat_row = AblationRow {
        name: "rgb_flat".into(),
        accuracies: Vec::new(),
    };
    let mut rows: Vec<AblationRow> = Ablation::ALL
        .iter()
        .map(|a| AblationRow {
            name: a.to_string(),
            accuracies: Vec::new(),
        })
        .collect();

    for &seed in &seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.override_seed(seed);
        seed_cfg.suite.seeds = seeds.clone();
        let seed_dir = out.join(format!("seed_{seed}"));
        let data_dir = seed_dir.join("data");
        std::fs::create_dir_all(&data_dir)?;
        cmd_gen_data(&seed_cfg, &data_dir, true)?;
        let ds = Dataset::open(&data_dir)?;
        let split = load_split(&data_dir)?;

        let t0 = Instant::now();
        let rgb = train::pretrain_rgb::<S>(&ds, &split, &seed_cfg.network, &seed_cfg.train)?;
        let wall = t0.elapsed().as_secs_f64();
        let arts = persist_run(&seed_cfg, &seed_dir.join("rgb"), &rgb, &ds, &split, None, wall)?;
        println!("seed {seed}: rgb_flat test accuracy {:.4}", arts.test_accuracy);
        flat_row.accuracies.push(arts.test_accuracy);
        let rgb_ckpt = arts.checkpoint;

        for (row, &ablation) in rows.iter_mut().zip(Ablation::ALL.iter()) {
            let reference = match ablation {
                Ablation::Plain => None,
                _ => Some(checkpoint::load::<S>(&rgb_ckpt)?.0),
            };
            let mut train_cfg = seed_cfg.train.clone();
            train_cfg.init_from_rgb = seed_cfg.train.init_from_rgb && reference.is_some();
            let t0 = Instant::now();
            let outcome = train::train_fisheye::<S>(
                &ds,
                &split,
                reference.as_ref(),
                &seed_cfg.network,
                &train_cfg,
                ablation,
            )?;
            let wall = t0.elapsed().as_secs_f64();
            let mut echo_cfg = seed_cfg.clone();
            echo_cfg.train = train_cfg;
            let arts = persist_run(
                &echo_cfg,
                &seed_dir.join(ablation.to_string()),
                &outcome,
                &ds,
                &split,
                Some(ablation),
                wall,
            )?;
            println!("seed {seed}: {ablation} test accuracy {:.4}", arts.test_accuracy);
            row.accuracies.push(arts.test_accuracy);
        }
    }

    let mut table = vec![flat_row];
    table.extend(rows);
    let csv = metrics::ablation_to_csv(&table, &seeds);
    std::fs::write(out.join("ablation.csv"), &csv)?;
    println!("\n{csv}");
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let reports = gradcheck::run_suite(seed, None)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:>16}  max_rel_err {:>10.3e}  tolerance {:.0e}  {status}",
            r.op,
            r.max_rel_err,
            gradcheck::TOLERANCE
        );
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        println!("all {} operations verified", reports.len());
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_warp_demo(
    out: &Path,
    input: Option<&Path>,
    fov: Option<f64>,
    size: usize,
    cell: usize,
    force: bool,
) -> Result<()> {
    let fov = fov.unwrap_or(std::f64::consts::PI);
    if !(fov > 0.0 && fov <= std::f64::consts::PI) {
        return Err(Error::Input(format!(
            "fov must be in (0, pi] radians, got {fov}"
        )));
    }
    ensure_output_dir(out, force)?;
    let flat_frame: Tensor4<f64> = match input {
        Some(path) => {
            let (pixels, w, h) = bmp::read_gray(path)?;
            Tensor4::from_fn(crate::tensor::Dims4::new(1, 1, h, w), |_, _, y, x| {
                pixels[y * w + x]
            })
        }
        None => {
            if size < 16 || cell < 2 {
                return Err(Error::Input("checkerboard needs size >= 16 and cell >= 2".into()));
            }
            fisheye::checkerboard(size, size, cell, 1.5)
        }
    };
    let dims = flat_frame.dims();
    let pin = PinholeIntrinsics::centered(dims.width as f64 / 2.0, dims.width, dims.height);
    let fe = FisheyeIntrinsics::disc_filling(fov, dims.width * 2, dims.height * 2);
    let fish = fisheye::warp_frame(&flat_frame, WarpDirection::FlatToFisheye, &pin, &fe, 0.0)?;
    let back = fisheye::warp_frame(&fish, WarpDirection::FisheyeToFlat, &pin, &fe, 0.0)?;

    let to_f64 = |t: &Tensor4<f64>| t.slice(0, 0).to_vec();
    bmp::write_gray(&out.join("flat.bmp"), &to_f64(&flat_frame), dims.width, dims.height)?;
    bmp::write_gray(&out.join("fisheye.bmp"), &to_f64(&fish), fe.width, fe.height)?;
    bmp::write_gray(&out.join("rectified.bmp"), &to_f64(&back), dims.width, dims.height)?;

    // Interior PSNR: flat pixels within 0.8 of the half-extent.
    let cx = (dims.width as f64 - 1.0) / 2.0;
    let cy = (dims.height as f64 - 1.0) / 2.0;
    let max_r = 0.8 * cx.min(cy);
    let mask: Vec<bool> = (0..dims.height * dims.width)
        .map(|i| {
            let (y, x) = (i / dims.width, i % dims.width);
            (x as f64 - cx).hypot(y as f64 - cy) <= max_r
        })
        .collect();
    let psnr = fisheye::psnr_masked(flat_frame.slice(0, 0), back.slice(0, 0), &mask);
    std::fs::write(out.join("psnr.txt"), format!("interior_psnr_db = {psnr}\n"))?;
    println!("interior roundtrip PSNR: {psnr:.2} dB (radius <= 0.8 of half-extent)");
    println!("wrote flat.bmp, fisheye.bmp, rectified.bmp under {}", out.display());
    Ok(())
}
