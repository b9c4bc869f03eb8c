//! `key = value` training configuration.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Unknown
//! and repeated keys are errors. Path lists are comma-separated and resolved
//! against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DistMode, NetworkConfig};
use crate::sampling::{Plane, SamplingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    #[default]
    None,
    /// `w_c = N / (l * n_c)` from training label counts.
    InverseFrequency,
}

impl ClassWeighting {
    pub fn name(self) -> &'static str {
        match self {
            ClassWeighting::None => "none",
            ClassWeighting::InverseFrequency => "inverse_frequency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ClassWeighting::None),
            "inverse_frequency" => Ok(ClassWeighting::InverseFrequency),
            _ => Err(Error::Config(format!("unknown class_weighting '{s}' (none|inverse_frequency)"))),
        }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_VAL_VOXELS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    /// Number of epochs, which is also `max_iter` of the poly schedule.
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub sampling: SamplingMode,
    pub augment: bool,
    pub plane: Plane,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
    /// Landmark distances in millimetres instead of voxels.
    pub physical_distances: bool,
    pub atlas_epsilon: f64,
    /// Validation voxels scored after every epoch (0 disables validation).
    pub val_voxels: usize,
    pub train_images: Vec<PathBuf>,
    pub train_labels: Vec<PathBuf>,
    pub val_images: Vec<PathBuf>,
    pub val_labels: Vec<PathBuf>,
    pub output_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(network: NetworkConfig) -> Self {
        TrainConfig {
            network,
            epochs: 10,
            batches_per_epoch: 50,
            batch_size: DEFAULT_BATCH_SIZE,
            lr0: crate::nn::optim::DEFAULT_LR0,
            momentum: crate::nn::optim::DEFAULT_MOMENTUM,
            lr_power: crate::nn::optim::DEFAULT_POWER,
            sampling: SamplingMode::default(),
            augment: false,
            plane: Plane::Axial,
            seed: 0,
            class_weighting: ClassWeighting::None,
            physical_distances: false,
            atlas_epsilon: crate::atlas::DEFAULT_EPSILON,
            val_voxels: DEFAULT_VAL_VOXELS,
            train_images: Vec::new(),
            train_labels: Vec::new(),
            val_images: Vec::new(),
            val_labels: Vec::new(),
            output_dir: PathBuf::from("."),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_images.len() != self.train_labels.len() || self.val_images.len() != self.val_labels.len() {
            return Err(Error::Config("image and label lists must have the same length".into()));
        }
        self.optim().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn optim(&self) -> crate::nn::OptimConfig {
        crate::nn::OptimConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.network.weight_decay,
            power: self.lr_power,
            max_iter: self.epochs,
        }
    }

    /// Canonical text form; `parse` of the output gives back `self`.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let paths = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("num_classes", n.num_classes.to_string());
        kv("conv1_channels", n.conv1_channels.to_string());
        kv("conv2_channels", n.conv2_channels.to_string());
        kv("mix_channels", n.mix_channels.to_string());
        kv("conv3d_channels", n.conv3d_channels.to_string());
        kv("fc1_units", n.fc1_units.to_string());
        kv("fc2_units", n.fc2_units.to_string());
        kv("dist_channels", n.dist_channels.to_string());
        kv("dist_units", n.dist_units.to_string());
        kv("landmarks_per_axis", n.landmarks_per_axis.to_string());
        kv("use_3d", n.use_3d.to_string());
        kv("use_dist", n.use_dist.to_string());
        kv("use_prob", n.use_prob.to_string());
        kv("use_aux", n.use_aux.to_string());
        kv("dist_mode", n.dist_mode.name().to_string());
        kv("use_rbf", n.use_rbf.to_string());
        kv("rbf_alpha", n.rbf_alpha.to_string());
        kv("aux_weight_base", n.aux_weights.0.to_string());
        kv("aux_weight_dist", n.aux_weights.1.to_string());
        kv("dropout", n.dropout.to_string());
        kv("weight_decay", n.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batches_per_epoch", self.batches_per_epoch.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr0", self.lr0.to_string());
        kv("momentum", self.momentum.to_string());
        kv("lr_power", self.lr_power.to_string());
        kv("sampling", self.sampling.name().to_string());
        kv("augment", self.augment.to_string());
        kv("plane", self.plane.name().to_string());
        kv("seed", self.seed.to_string());
        kv("class_weighting", self.class_weighting.name().to_string());
        kv("physical_distances", self.physical_distances.to_string());
        kv("atlas_epsilon", self.atlas_epsilon.to_string());
        kv("val_voxels", self.val_voxels.to_string());
        kv("train_images", paths(&self.train_images));
        kv("train_labels", paths(&self.train_labels));
        kv("val_images", paths(&self.val_images));
        kv("val_labels", paths(&self.val_labels));
        kv("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let (cfg, extra) = parse_with_extra(text, base_dir, "")?;
        debug_assert!(extra.is_empty());
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        TrainConfig::parse(&text, path.parent())
    }
}

/// Parses like [`TrainConfig::parse`] but sets aside keys starting with
/// `extra_prefix` (when non-empty) instead of rejecting them.
pub(crate) fn parse_with_extra(text: &str, base_dir: Option<&Path>, extra_prefix: &str) -> Result<(TrainConfig, BTreeMap<String, String>)> {
    let mut entries = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got '{raw}'", lineno + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let target = if !extra_prefix.is_empty() && k.starts_with(extra_prefix) { &mut extra } else { &mut entries };
        if target.insert(k.clone(), (lineno + 1, v)).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
        }
    }
    let mut cfg = TrainConfig::new(NetworkConfig::new(2));
    let mut class_count_set = false;
    for (k, (line, v)) in &entries {
        let ctx = |e: Error| Error::Config(format!("line {line}: {k}: {e}"));
        let n = &mut cfg.network;
        match k.as_str() {
            "num_classes" => {
                n.num_classes = num(v).map_err(ctx)?;
                class_count_set = true;
            }
            "conv1_channels" => n.conv1_channels = num(v).map_err(ctx)?,
            "conv2_channels" => n.conv2_channels = num(v).map_err(ctx)?,
            "mix_channels" => n.mix_channels = num(v).map_err(ctx)?,
            "conv3d_channels" => n.conv3d_channels = num(v).map_err(ctx)?,
            "fc1_units" => n.fc1_units = num(v).map_err(ctx)?,
            "fc2_units" => n.fc2_units = num(v).map_err(ctx)?,
            "dist_channels" => n.dist_channels = num(v).map_err(ctx)?,
            "dist_units" => n.dist_units = num(v).map_err(ctx)?,
            "landmarks_per_axis" => n.landmarks_per_axis = num(v).map_err(ctx)?,
            "use_3d" => n.use_3d = flag(v).map_err(ctx)?,
            "use_dist" => n.use_dist = flag(v).map_err(ctx)?,
            "use_prob" => n.use_prob = flag(v).map_err(ctx)?,
            "use_aux" => n.use_aux = flag(v).map_err(ctx)?,
            "dist_mode" => n.dist_mode = DistMode::parse(v).map_err(ctx)?,
            "use_rbf" => n.use_rbf = flag(v).map_err(ctx)?,
            "rbf_alpha" => n.rbf_alpha = num(v).map_err(ctx)?,
            "aux_weight_base" => n.aux_weights.0 = num(v).map_err(ctx)?,
            "aux_weight_dist" => n.aux_weights.1 = num(v).map_err(ctx)?,
            "dropout" => n.dropout = num(v).map_err(ctx)?,
            "weight_decay" => n.weight_decay = num(v).map_err(ctx)?,
            "epochs" => cfg.epochs = num(v).map_err(ctx)?,
            "batches_per_epoch" => cfg.batches_per_epoch = num(v).map_err(ctx)?,
            "batch_size" => cfg.batch_size = num(v).map_err(ctx)?,
            "lr0" => cfg.lr0 = num(v).map_err(ctx)?,
            "momentum" => cfg.momentum = num(v).map_err(ctx)?,
            "lr_power" => cfg.lr_power = num(v).map_err(ctx)?,
            "sampling" => cfg.sampling = SamplingMode::parse(v).map_err(ctx)?,
            "augment" => cfg.augment = flag(v).map_err(ctx)?,
            "plane" => cfg.plane = Plane::parse(v).map_err(ctx)?,
            "seed" => cfg.seed = num(v).map_err(ctx)?,
            "class_weighting" => cfg.class_weighting = ClassWeighting::parse(v).map_err(ctx)?,
            "physical_distances" => cfg.physical_distances = flag(v).map_err(ctx)?,
            "atlas_epsilon" => cfg.atlas_epsilon = num(v).map_err(ctx)?,
            "val_voxels" => cfg.val_voxels = num(v).map_err(ctx)?,
            "train_images" => cfg.train_images = path_list(v, base_dir),
            "train_labels" => cfg.train_labels = path_list(v, base_dir),
            "val_images" => cfg.val_images = path_list(v, base_dir),
            "val_labels" => cfg.val_labels = path_list(v, base_dir),
            "output_dir" => cfg.output_dir = resolve(v, base_dir),
            _ => return Err(Error::Config(format!("line {line}: unknown key '{k}'"))),
        }
    }
    if !class_count_set {
        return Err(Error::Config("missing required key 'num_classes'".into()));
    }
    cfg.validate()?;
    Ok((cfg, extra.into_iter().map(|(k, (_, v))| (k, v)).collect()))
}

fn num<T: FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse '{v}'")))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean, got '{v}'"))),
    }
}

fn resolve(v: &str, base: Option<&Path>) -> PathBuf {
    let p = PathBuf::from(v);
    match base {
        Some(b) if p.is_relative() && !b.as_os_str().is_empty() => b.join(p),
        _ => p,
    }
}

fn path_list(v: &str, base: Option<&Path>) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| resolve(s, base)).collect()
}
