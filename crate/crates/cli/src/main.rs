use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchseg::atlas::{build_atlas, ProbAtlas};
use patchseg::eval::{evaluate_pair_with, write_metrics_csv, PointSet};
use patchseg::model::{build_model, grad_check_model, Model};
use patchseg::nn::gradcheck::{check_layer, layer_cases, DEFAULT_EPS};
use patchseg::phantom::{generate_phantom, PhantomSpec};
use patchseg::pipeline::{lr_csv, predict_with_checkpoint, train_model, Checkpoint, PredictOptions, TrainConfig};
use patchseg::rng::Rng;
use patchseg::sampling::{PatchSample, PATCH, PATCH_3D};
use patchseg::volume::{export_slice_pgm, load_labels, load_volume, save_labels, save_volume, Dims};
use patchseg::{Error, Result};

#[derive(Parser)]
#[command(name = "patchseg", version, about = "Patch-based CNN segmentation of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms as <out>/phantom_<i>_img.mrv and phantom_<i>_lab.mrv.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cube side, or NXxNYxNZ.
        #[arg(long, default_value = "64")]
        dims: String,
        #[arg(long, default_value_t = 8)]
        classes: u16,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a probabilistic atlas from label maps.
    Atlas {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long, default_value_t = patchseg::atlas::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt and history.csv to the configured output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment an image with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Required when the model uses the atlas branch.
        #[arg(long)]
        atlas: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Classify every voxel instead of only nonzero-intensity voxels.
        #[arg(long)]
        no_mask: bool,
    },
    /// Compare a prediction with ground truth. CSV columns:
    /// volume_id,class_id,dice,hausdorff_mm,msd_mm,valid (plus one `mean` row).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        /// Distances between full voxel sets instead of boundaries.
        #[arg(long)]
        fullset_distances: bool,
    },
    /// Finite-difference check of every layer kind and the configured network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Check in double precision (single precision otherwise).
        #[arg(long)]
        double: bool,
    },
    /// Write the per-epoch learning rate as CSV (epoch,lr).
    LrDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Export one slice as an 8-bit PGM image.
    Slice {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        axis: usize,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> Result<Dims> {
    let parts: Vec<usize> =
        s.split('x').map(|p| p.trim().parse().map_err(|_| Error::invalid(format!("bad dims '{s}'")))).collect::<Result<_>>()?;
    match parts[..] {
        [n] => Ok(Dims::cube(n)),
        [x, y, z] => Ok(Dims::new(x, y, z)),
        _ => Err(Error::invalid(format!("bad dims '{s}' (expected N or NXxNYxNZ)"))),
    }
}

fn probe_sample(num_classes: usize, k: usize, seed: u64) -> PatchSample {
    let mut rng = Rng::new(seed);
    let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f32> { (0..n).map(|_| rng.uniform(lo, hi) as f32).collect() };
    let atlas = draw(num_classes, 0.0, 1.0);
    let total: f32 = atlas.iter().sum();
    PatchSample {
        p25: draw(PATCH * PATCH, -1.5, 1.5),
        p51s: draw(PATCH * PATCH, -1.5, 1.5),
        p71s: draw(PATCH * PATCH, -1.5, 1.5),
        p3d: Some(draw(PATCH_3D.pow(3), -1.5, 1.5)),
        dist: Some(draw(k * k * k, 0.0, 3.0)),
        atlas_prob: Some(atlas.iter().map(|a| a / total).collect()),
        center: [0, 0, 0],
        target: (seed % num_classes as u64) as u16,
    }
}

fn gradcheck(config: PathBuf, double: bool) -> Result<bool> {
    let cfg = TrainConfig::load(config)?;
    let (eps, model_tol) = if double { (1e-4, 1e-4) } else { (1e-2, 5e-2) };
    let mut ok = true;
    for (spec, shapes) in layer_cases() {
        let r = check_layer(&spec, &shapes, cfg.seed, DEFAULT_EPS)?;
        let pass = r.max_rel_error < 1e-6;
        ok &= pass;
        println!("{:<8} max rel error {:.3e} {}", spec.kind(), r.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    let model: Model<f64> = build_model(&cfg.network, cfg.seed)?;
    let sample = probe_sample(cfg.network.num_classes, cfg.network.landmarks_per_axis, cfg.seed);
    let check = if double {
        grad_check_model(&model, &sample, &Rng::new(cfg.seed), eps, 16, cfg.seed)?
    } else {
        grad_check_model(&model.cast::<f32>(), &sample, &Rng::new(cfg.seed), eps, 16, cfg.seed)?
    };
    let r = check.report;
    let pass = r.max_rel_error < model_tol;
    ok &= pass;
    println!(
        "model    max rel error {:.3e} over {} entries ({} skipped at relu kinks), worst {} {}",
        r.max_rel_error,
        r.checked,
        check.skipped_kinks,
        r.worst,
        if pass { "ok" } else { "FAIL" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Phantom { seed, dims, classes, count, out } => {
            let dims = parse_dims(&dims)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let spec = PhantomSpec::new(dims, classes, seed.wrapping_add(i as u64));
                let (v, l) = generate_phantom(&spec)?;
                save_volume(out.join(format!("phantom_{i}_img.mrv")), &v)?;
                save_labels(out.join(format!("phantom_{i}_lab.mrv")), &l)?;
            }
        }
        Command::Atlas { labels, epsilon, out } => {
            let maps = labels.iter().map(load_labels).collect::<Result<Vec<_>>>()?;
            build_atlas(&maps, epsilon)?.save(out)?;
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(config)?;
            let out = train_model(&cfg)?;
            if let Some(last) = out.history.last() {
                println!("epoch {} loss {:.5} val dice {:?}", last.epoch, last.train_loss, last.val_dice);
            }
            println!("wrote {}", cfg.output_dir.join("model.ckpt").display());
        }
        Command::Predict { ckpt, image, atlas, out, no_mask } => {
            let ckpt = Checkpoint::load(ckpt)?;
            let v = load_volume(image)?;
            let atlas = atlas.map(ProbAtlas::load).transpose()?;
            let opts = PredictOptions { use_mask: !no_mask, ..PredictOptions::default() };
            save_labels(out, &predict_with_checkpoint(&ckpt, &v, atlas, opts)?)?;
        }
        Command::Evaluate { pred, gt, csv, fullset_distances } => {
            let set = if fullset_distances { PointSet::Full } else { PointSet::Boundary };
            let id = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = evaluate_pair_with(&load_labels(&pred)?, &load_labels(&gt)?, set)?;
            println!("mean dice {:.4} hausdorff {:?} msd {:?}", report.mean_dice, report.mean_hausdorff_mm, report.mean_msd_mm);
            write_metrics_csv(csv, &[(id, report)])?;
        }
        Command::Gradcheck { config, double } => return gradcheck(config, double),
        Command::LrDump { config, csv } => {
            let cfg = TrainConfig::load(config)?;
            std::fs::write(csv, lr_csv(&cfg)?)?;
        }
        Command::Slice { image, axis, index, out } => {
            export_slice_pgm(&load_volume(image)?, axis, index, out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
