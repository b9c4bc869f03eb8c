use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::atlas::ProbAtlas;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::rng::Rng;
use crate::sampling::{build_sample, FeatureSpec};
use crate::spatial::{build_grid, LandmarkGrid};
use crate::volume::{normalize, Dims, LabelMap, NormStats, Volume, Voxel};

/// Environment variable capping the number of inference workers.
pub const THREADS_ENV: &str = "PATCHSEG_THREADS";

/// Side inputs of the optional branches.
#[derive(Debug, Clone, Default)]
pub struct Resources {
    pub atlas: Option<ProbAtlas>,
    pub grid: Option<LandmarkGrid>,
}

impl Resources {
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        if let Some(a) = &self.atlas {
            if a.dims() != dims {
                return Err(Error::DimMismatch(format!("atlas {:?} vs image {:?}", a.dims().as_array(), dims.as_array())));
            }
        }
        if let Some(g) = &self.grid {
            if g.dims() != dims {
                return Err(Error::DimMismatch(format!("landmark grid {:?} vs image {:?}", g.dims().as_array(), dims.as_array())));
            }
        }
        Ok(())
    }

    pub fn features(&self, cfg: &TrainConfig) -> FeatureSpec<'_> {
        FeatureSpec {
            plane: cfg.plane,
            with_3d: cfg.network.use_3d,
            grid: self.grid.as_ref(),
            atlas: self.atlas.as_ref(),
            physical_distances: cfg.physical_distances,
        }
    }
}

/// Eval-mode argmax class at `center` of an already normalized volume.
/// Ties go to the lowest class index.
pub fn classify(model: &Model<f32>, features: &FeatureSpec<'_>, v: &Volume, center: Voxel) -> Result<u16> {
    let sample = build_sample(features, v, center, 0, None);
    let out = model.forward(&sample, Mode::Eval, &Rng::new(0))?;
    let mut best = 0;
    for (c, &p) in out.probs.iter().enumerate() {
        if p > out.probs[best] {
            best = c;
        }
    }
    Ok(best as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictOptions {
    /// Classify only voxels with nonzero raw intensity; others get class 0.
    pub use_mask: bool,
    /// Worker cap; falls back to `PATCHSEG_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { use_mask: true, threads: None }
    }
}

fn thread_count(opts: &PredictOptions) -> Option<usize> {
    opts.threads.or_else(|| std::env::var(THREADS_ENV).ok()?.trim().parse().ok()).filter(|&n| n > 0)
}

const CHUNK: usize = 4096;

/// Sliding-window segmentation of a raw volume. The volume is normalized
/// with `norm` first.
pub fn predict_volume(
    model: &Model<f32>,
    cfg: &TrainConfig,
    norm: &NormStats,
    raw: &Volume,
    res: &Resources,
    opts: PredictOptions,
) -> Result<LabelMap> {
    let l = cfg.network.num_classes;
    if model.config().num_classes != l {
        return Err(Error::Config("model and config disagree on the class count".into()));
    }
    if cfg.network.use_prob && res.atlas.is_none() {
        return Err(Error::invalid("the probability branch needs an atlas"));
    }
    if let Some(a) = &res.atlas {
        if usize::from(a.num_classes()) != l {
            return Err(Error::DimMismatch(format!("atlas has {} classes, model {l}", a.num_classes())));
        }
    }
    res.check_dims(raw.dims())?;
    let v = normalize(raw, norm);
    let features = res.features(cfg);
    let n = raw.dims().len();
    let run = || -> Result<Vec<u16>> {
        let chunks: Vec<Vec<u16>> =
            (0..n.div_ceil(CHUNK))
                .into_par_iter()
                .map(|ci| {
                    (ci * CHUNK..((ci + 1) * CHUNK).min(n))
                        .map(|i| {
                            if opts.use_mask && raw.data()[i] == 0.0 {
                                Ok(0)
                            } else {
                                classify(model, &features, &v, raw.dims().voxel(i))
                            }
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
        Ok(chunks.concat())
    };
    let labels = match thread_count(&opts) {
        Some(t) => {
            rayon::ThreadPoolBuilder::new().num_threads(t).build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?.install(run)?
        }
        None => run()?,
    };
    LabelMap::new(raw.dims(), raw.spacing(), labels, l as u16)
}

/// Prediction from a checkpoint; the landmark grid is rebuilt for the
/// image dims, the atlas must be supplied when the model uses it.
pub fn predict_with_checkpoint(ckpt: &Checkpoint, raw: &Volume, atlas: Option<ProbAtlas>, opts: PredictOptions) -> Result<LabelMap> {
    let cfg = &ckpt.config;
    let model = ckpt.model()?;
    let grid = if cfg.network.use_dist { Some(build_grid(raw.dims(), cfg.network.landmarks_per_axis)?) } else { None };
    let atlas = if cfg.network.use_prob { atlas } else { None };
    predict_volume(&model, cfg, &ckpt.norm, raw, &Resources { atlas, grid }, opts)
}
