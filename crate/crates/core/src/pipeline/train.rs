use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::{ClassWeighting, TrainConfig};
use super::predict::{classify, Resources};
use crate::atlas::build_atlas;
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::nn::optim::{poly_lr, sgd_step_with_lr, OptimState};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::sampling::CenterSampler;
use crate::spatial::build_grid;
use crate::volume::{compute_norm_stats, load_labels, load_volume, normalize, LabelMap, NormStats, Volume};

/// Raw (unnormalized) training and validation pairs.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<(Volume, LabelMap)>,
    pub val: Vec<(Volume, LabelMap)>,
}

impl Dataset {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let pairs = |images: &[std::path::PathBuf], labels: &[std::path::PathBuf]| -> Result<Vec<(Volume, LabelMap)>> {
            images.iter().zip(labels).map(|(i, l)| Ok((load_volume(i)?, load_labels(l)?))).collect()
        };
        Ok(Dataset { train: pairs(&cfg.train_images, &cfg.train_labels)?, val: pairs(&cfg.val_images, &cfg.val_labels)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean global loss over the epoch's batches (NaN when no batch ran).
    pub train_loss: f64,
    /// Mean foreground Dice on the validation subsample.
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,val_dice";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let val = r.val_dice.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.train_loss, val);
    }
    s
}

/// The learning rate of every epoch `0..=epochs`.
pub fn lr_schedule(cfg: &TrainConfig) -> Result<Vec<(usize, f64)>> {
    let o = cfg.optim();
    o.validate()?;
    (0..=cfg.epochs).map(|e| Ok((e, poly_lr(e, &o)?))).collect()
}

pub fn lr_csv(cfg: &TrainConfig) -> Result<String> {
    let mut s = String::from("epoch,lr\n");
    for (e, lr) in lr_schedule(cfg)? {
        let _ = writeln!(s, "{e},{lr}");
    }
    Ok(s)
}

/// Atlas and landmark grid derived from the training label maps, as the
/// network configuration requires.
pub fn build_resources(cfg: &TrainConfig, train_labels: &[LabelMap]) -> Result<Resources> {
    let first = train_labels.first().ok_or_else(|| Error::invalid("no training label maps"))?;
    let atlas = if cfg.network.use_prob { Some(build_atlas(train_labels, cfg.atlas_epsilon)?) } else { None };
    let grid = if cfg.network.use_dist { Some(build_grid(first.dims(), cfg.network.landmarks_per_axis)?) } else { None };
    Ok(Resources { atlas, grid })
}

fn class_weights(cfg: &TrainConfig, maps: &[LabelMap]) -> Option<Vec<f32>> {
    if cfg.class_weighting == ClassWeighting::None {
        return None;
    }
    let l = cfg.network.num_classes;
    let mut counts = vec![0usize; l];
    for m in maps {
        for (c, n) in m.histogram().into_iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: usize = counts.iter().sum();
    Some(counts.iter().map(|&n| if n == 0 { 0.0 } else { (total as f64 / (l * n) as f64) as f32 }).collect())
}

/// Trains on the files named in `cfg`, then writes `model.ckpt` and
/// `history.csv` into the output directory.
pub fn train_model(cfg: &TrainConfig) -> Result<TrainOutput> {
    let data = Dataset::load(cfg)?;
    let out = train_on(cfg, &data)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    out.checkpoint.save(cfg.output_dir.join("model.ckpt"))?;
    std::fs::write(cfg.output_dir.join("history.csv"), history_csv(&out.history))?;
    Ok(out)
}

/// Training without file output. Deterministic for a given config and data.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let l = cfg.network.num_classes;
    for (v, m) in data.train.iter().chain(&data.val) {
        if v.dims() != m.dims() {
            return Err(Error::DimMismatch(format!("image {:?} vs labels {:?}", v.dims().as_array(), m.dims().as_array())));
        }
        if usize::from(m.num_classes()) != l {
            return Err(Error::Config(format!("label map has {} classes, config says {l}", m.num_classes())));
        }
    }
    let raw: Vec<Volume> = data.train.iter().map(|(v, _)| v.clone()).collect();
    let norm = compute_norm_stats(&raw)?;
    let volumes: Vec<Volume> = raw.iter().map(|v| normalize(v, &norm)).collect();
    let maps: Vec<LabelMap> = data.train.iter().map(|(_, m)| m.clone()).collect();
    let res = build_resources(cfg, &maps)?;
    res.check_dims(volumes[0].dims())?;
    for v in &volumes {
        res.check_dims(v.dims())?;
    }
    let features = res.features(cfg);
    let sampler = CenterSampler::new(&maps, cfg.sampling)?;
    let weights = class_weights(cfg, &maps);

    let mut model: Model<f32> = build_model(&cfg.network, cfg.seed)?;
    let mut state = OptimState::new(cfg.optim(), model.params())?;
    let decay = model.decay_flags();
    let root = Rng::new(cfg.seed);
    let batch_rng = root.split_str("batches");
    let dropout_rng = root.split_str("dropout");
    let validation = ValidationSet::new(cfg, data, &norm)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let scale = 1.0 / cfg.batch_size as f32;
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, &state.config)?;
        let mut loss_sum = 0.0f64;
        for b in 0..cfg.batches_per_epoch {
            let step = (epoch * cfg.batches_per_epoch + b) as u64;
            let batch_seed = batch_rng.split(step).next_u64();
            let samples = sampler.batch(&volumes, &maps, &features, cfg.batch_size, batch_seed, cfg.augment);
            let mut grads = model.zero_grads();
            let step_rng = dropout_rng.split(step);
            let mut batch_loss = 0.0f64;
            for (i, s) in samples.iter().enumerate() {
                let loss = model.loss_and_grad(s, Mode::Train, &step_rng.split(i as u64), weights.as_deref(), scale, &mut grads)?;
                batch_loss += f64::from(loss);
            }
            batch_loss /= cfg.batch_size as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            sgd_step_with_lr(model.params_mut(), &grads, &decay, &mut state, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += batch_loss;
        }
        state.iteration = epoch + 1;
        let val_dice = validation.as_ref().map(|v| v.dice(&model, &res, cfg)).transpose()?;
        history.push(EpochRecord { epoch, lr, train_loss: loss_sum / cfg.batches_per_epoch as f64, val_dice });
    }
    let checkpoint = Checkpoint::from_model(cfg, &model, &state.velocities, state.iteration, norm);
    Ok(TrainOutput { checkpoint, history })
}

/// Fixed subsample of validation voxels inside the nonzero-intensity mask.
struct ValidationSet {
    volumes: Vec<Volume>,
    /// (volume index, voxel index, true label)
    voxels: Vec<(usize, usize, u16)>,
}

impl ValidationSet {
    fn new(cfg: &TrainConfig, data: &Dataset, norm: &NormStats) -> Result<Option<Self>> {
        if cfg.val_voxels == 0 || data.val.is_empty() {
            return Ok(None);
        }
        let candidates: Vec<(usize, usize, u16)> = data
            .val
            .iter()
            .enumerate()
            .flat_map(|(vi, (v, m))| {
                v.data().iter().zip(m.labels()).enumerate().filter(|(_, (&x, _))| x != 0.0).map(move |(i, (_, &l))| (vi, i, l))
            })
            .collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        let mut rng = Rng::new(cfg.seed).split_str("validation");
        let voxels = (0..cfg.val_voxels).map(|_| candidates[rng.below(candidates.len() as u64) as usize]).collect();
        Ok(Some(ValidationSet { volumes: data.val.iter().map(|(v, _)| normalize(v, norm)).collect(), voxels }))
    }

    /// Mean over foreground classes present in truth or prediction of
    /// `2 TP / (|pred| + |truth|)` on the subsample.
    fn dice(&self, model: &Model<f32>, res: &Resources, cfg: &TrainConfig) -> Result<f64> {
        let l = cfg.network.num_classes;
        let features = res.features(cfg);
        let (mut tp, mut np, mut nt) = (vec![0usize; l], vec![0usize; l], vec![0usize; l]);
        for &(vi, idx, truth) in &self.voxels {
            let v = &self.volumes[vi];
            let pred = classify(model, &features, v, v.dims().voxel(idx))?;
            np[pred as usize] += 1;
            nt[truth as usize] += 1;
            if pred == truth {
                tp[truth as usize] += 1;
            }
        }
        let scores: Vec<f64> = (1..l).filter(|&c| np[c] + nt[c] > 0).map(|c| 2.0 * tp[c] as f64 / (np[c] + nt[c]) as f64).collect();
        Ok(if scores.is_empty() { 1.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
    }
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history))?;
    Ok(())
}
