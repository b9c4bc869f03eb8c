//! Per-voxel patch extraction, augmentation and batch assembly.
//!
//! 2D patches are 25×25, stored row-major (`p[row * 25 + col]`). For the
//! axial plane columns run along x and rows along y; coronal uses (x, z) and
//! sagittal (y, z). Pixel (12, 12) is the centre voxel. The two coarse
//! patches resample the 51² and 71² windows onto a 25×25 grid with bilinear
//! interpolation; positions outside the volume read as zero.

use crate::atlas::ProbAtlas;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::spatial::{distance_image, distance_image_scaled, LandmarkGrid};
use crate::volume::{LabelMap, Volume, Voxel};

pub const PATCH: usize = 25;
pub const PATCH_AREA: usize = PATCH * PATCH;
pub const MID_WINDOW: usize = 51;
pub const WIDE_WINDOW: usize = 71;
pub const PATCH_3D: usize = 15;
pub const PATCH_3D_LEN: usize = PATCH_3D * PATCH_3D * PATCH_3D;
/// Side of the source window transformed by augmentation.
pub const AUGMENT_WINDOW: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Plane {
    #[default]
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    /// (column axis, row axis).
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Axial => (0, 1),
            Plane::Coronal => (0, 2),
            Plane::Sagittal => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            _ => Err(Error::Config(format!("unknown plane {s:?} (axial|coronal|sagittal)"))),
        }
    }
}

/// Three 25×25 patches at native, 51²→25² and 71²→25² scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScale {
    pub p25: Vec<f32>,
    pub p51s: Vec<f32>,
    pub p71s: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub p25: Vec<f32>,
    pub p51s: Vec<f32>,
    pub p71s: Vec<f32>,
    pub p3d: Option<Vec<f32>>,
    /// Distance image in grid order (k channels of k×k).
    pub dist: Option<Vec<f32>>,
    pub atlas_prob: Option<Vec<f32>>,
    pub center: Voxel,
    pub target: u16,
}

/// Integer-offset accessor for the plane through `center`.
struct PlaneView<'a> {
    v: &'a Volume,
    center: [i64; 3],
    col: usize,
    row: usize,
}

impl<'a> PlaneView<'a> {
    fn new(v: &'a Volume, center: Voxel, plane: Plane) -> Self {
        let (col, row) = plane.axes();
        PlaneView { v, center: center.map(|c| c as i64), col, row }
    }

    #[inline]
    fn at(&self, du: i64, dw: i64) -> f32 {
        let mut p = self.center;
        p[self.col] += du;
        p[self.row] += dw;
        self.v.get_padded(p[0], p[1], p[2])
    }
}

#[inline]
fn bilinear(at: impl Fn(i64, i64) -> f32, u: f64, w: f64) -> f32 {
    let (u0, w0) = (u.floor(), w.floor());
    let (fu, fw) = (u - u0, w - w0);
    let (iu, iw) = (u0 as i64, w0 as i64);
    let a = f64::from(at(iu, iw));
    if fu == 0.0 && fw == 0.0 {
        return a as f32;
    }
    let b = f64::from(at(iu + 1, iw));
    let c = f64::from(at(iu, iw + 1));
    let d = f64::from(at(iu + 1, iw + 1));
    (a * (1.0 - fu) * (1.0 - fw) + b * fu * (1.0 - fw) + c * (1.0 - fu) * fw + d * fu * fw) as f32
}

/// Offsets at which a `window`-wide patch is resampled to 25 pixels.
pub fn resample_offsets(window: usize) -> [f64; PATCH] {
    let half = (window - 1) as f64 / 2.0;
    let step = (window - 1) as f64 / (PATCH - 1) as f64;
    std::array::from_fn(|i| -half + i as f64 * step)
}

fn multiscale_from(at: impl Fn(i64, i64) -> f32 + Copy) -> MultiScale {
    let native = |at: &dyn Fn(i64, i64) -> f32| {
        let h = (PATCH / 2) as i64;
        let mut p = Vec::with_capacity(PATCH_AREA);
        for r in 0..PATCH as i64 {
            for c in 0..PATCH as i64 {
                p.push(at(c - h, r - h));
            }
        }
        p
    };
    let resampled = |window: usize| {
        let off = resample_offsets(window);
        let mut p = Vec::with_capacity(PATCH_AREA);
        for r in off {
            for c in off {
                p.push(bilinear(at, c, r));
            }
        }
        p
    };
    MultiScale { p25: native(&at), p51s: resampled(MID_WINDOW), p71s: resampled(WIDE_WINDOW) }
}

pub fn extract_multiscale_2d(v: &Volume, center: Voxel, plane: Plane) -> MultiScale {
    let view = PlaneView::new(v, center, plane);
    multiscale_from(|u, w| view.at(u, w))
}

/// 15³ window around `center`, zero padded, x fastest.
pub fn extract_patch_3d(v: &Volume, center: Voxel) -> Vec<f32> {
    let h = (PATCH_3D / 2) as i64;
    let c = center.map(|x| x as i64);
    let mut out = Vec::with_capacity(PATCH_3D_LEN);
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                out.push(v.get_padded(c[0] + dx, c[1] + dy, c[2] + dz));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    scale: f64,
    angle_deg: f64,
}

impl AugmentParams {
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
    pub const ANGLE_RANGE: (f64, f64) = (-10.0, 10.0);

    pub fn new(scale: f64, angle_deg: f64) -> Result<Self> {
        let (s0, s1) = Self::SCALE_RANGE;
        let (a0, a1) = Self::ANGLE_RANGE;
        if !(s0..=s1).contains(&scale) || !(a0..=a1).contains(&angle_deg) {
            return Err(Error::invalid(format!("augmentation scale {scale} / angle {angle_deg} outside [{s0}, {s1}] / [{a0}, {a1}]")));
        }
        Ok(AugmentParams { scale, angle_deg })
    }

    pub fn identity() -> Self {
        AugmentParams { scale: 1.0, angle_deg: 0.0 }
    }

    /// Uniform draw over both ranges.
    pub fn sample(rng: &mut Rng) -> Self {
        let scale = rng.uniform(Self::SCALE_RANGE.0, Self::SCALE_RANGE.1);
        let angle_deg = rng.uniform(Self::ANGLE_RANGE.0, Self::ANGLE_RANGE.1);
        AugmentParams { scale, angle_deg }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }
}

/// Rotate and rescale a 101² window around `center`, then cut the three
/// scales out of the transformed window.
pub fn augment(v: &Volume, center: Voxel, plane: Plane, params: AugmentParams) -> MultiScale {
    let view = PlaneView::new(v, center, plane);
    let n = AUGMENT_WINDOW as i64;
    let h = n / 2;
    let (sin, cos) = params.angle_deg.to_radians().sin_cos();
    let inv = 1.0 / params.scale;
    let mut window = vec![0f32; AUGMENT_WINDOW * AUGMENT_WINDOW];
    for r in 0..n {
        for c in 0..n {
            let (u, w) = ((c - h) as f64, (r - h) as f64);
            let su = (cos * u + sin * w) * inv;
            let sw = (-sin * u + cos * w) * inv;
            window[(r * n + c) as usize] = bilinear(|a, b| view.at(a, b), su, sw);
        }
    }
    let at = |u: i64, w: i64| {
        let (c, r) = (u + h, w + h);
        if (0..n).contains(&c) && (0..n).contains(&r) {
            window[(r * n + c) as usize]
        } else {
            0.0
        }
    };
    multiscale_from(at)
}

/// Which optional inputs a sample carries.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSpec<'a> {
    pub plane: Plane,
    pub with_3d: bool,
    pub grid: Option<&'a LandmarkGrid>,
    pub atlas: Option<&'a ProbAtlas>,
    /// Scale landmark distances by voxel spacing.
    pub physical_distances: bool,
}

impl<'a> FeatureSpec<'a> {
    pub fn base(plane: Plane) -> Self {
        FeatureSpec { plane, with_3d: false, grid: None, atlas: None, physical_distances: false }
    }
}

pub fn build_sample(
    features: &FeatureSpec<'_>,
    v: &Volume,
    center: Voxel,
    target: u16,
    augmentation: Option<AugmentParams>,
) -> PatchSample {
    let ms = match augmentation {
        Some(p) => augment(v, center, features.plane, p),
        None => extract_multiscale_2d(v, center, features.plane),
    };
    let p3d = features.with_3d.then(|| extract_patch_3d(v, center));
    let dist = features.grid.map(|g| {
        let x = center.map(|c| c as f64);
        let d = if features.physical_distances { distance_image_scaled(g, x, v.spacing().map(f64::from)) } else { distance_image(g, x) };
        d.values.iter().map(|&x| x as f32).collect()
    });
    let atlas_prob = features.atlas.map(|a| a.query(center.map(|c| c as i64)).to_vec());
    PatchSample { p25: ms.p25, p51s: ms.p51s, p71s: ms.p71s, p3d, dist, atlas_prob, center, target }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Centres uniform over all voxels.
    #[default]
    Natural,
    /// Class uniform over [0, ℓ), then a voxel of that class uniformly.
    ClassUniform,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Natural => "natural",
            SamplingMode::ClassUniform => "class-uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "natural" => Ok(SamplingMode::Natural),
            "class-uniform" => Ok(SamplingMode::ClassUniform),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?} (natural|class-uniform)"))),
        }
    }
}

/// Draws sample centres from a fixed set of label maps.
#[derive(Debug, Clone)]
pub struct CenterSampler {
    mode: SamplingMode,
    sizes: Vec<usize>,
    /// Per class: (map index, voxel index) pairs; filled in class-uniform mode.
    by_class: Vec<Vec<(u32, u32)>>,
}

impl CenterSampler {
    pub fn new(labelmaps: &[LabelMap], mode: SamplingMode) -> Result<Self> {
        let first = labelmaps.first().ok_or_else(|| Error::invalid("sampling needs at least one label map"))?;
        let l = first.num_classes() as usize;
        let sizes: Vec<usize> = labelmaps.iter().map(|m| m.labels().len()).collect();
        let mut by_class = Vec::new();
        if mode == SamplingMode::ClassUniform {
            by_class = vec![Vec::new(); l];
            for (mi, m) in labelmaps.iter().enumerate() {
                if m.num_classes() as usize != l {
                    return Err(Error::DimMismatch("label maps disagree on the class count".into()));
                }
                for (i, &lab) in m.labels().iter().enumerate() {
                    by_class[lab as usize].push((mi as u32, i as u32));
                }
            }
            let missing: Vec<u16> = by_class.iter().enumerate().filter(|(_, v)| v.is_empty()).map(|(c, _)| c as u16).collect();
            if !missing.is_empty() {
                return Err(Error::MissingClasses(missing));
            }
        }
        Ok(CenterSampler { mode, sizes, by_class })
    }

    /// `n` (map index, voxel index) pairs.
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
        let total: usize = self.sizes.iter().sum();
        (0..n)
            .map(|_| match self.mode {
                SamplingMode::Natural => {
                    let mut g = rng.below(total as u64) as usize;
                    let mut mi = 0;
                    while g >= self.sizes[mi] {
                        g -= self.sizes[mi];
                        mi += 1;
                    }
                    (mi, g)
                }
                SamplingMode::ClassUniform => {
                    let c = rng.below(self.by_class.len() as u64) as usize;
                    let list = &self.by_class[c];
                    let (m, i) = list[rng.below(list.len() as u64) as usize];
                    (m as usize, i as usize)
                }
            })
            .collect()
    }

    /// A batch of samples; with `augment`, every sample draws its own
    /// augmentation parameters.
    pub fn batch(
        &self,
        volumes: &[Volume],
        labelmaps: &[LabelMap],
        features: &FeatureSpec<'_>,
        n: usize,
        seed: u64,
        augment: bool,
    ) -> Vec<PatchSample> {
        let rng = Rng::new(seed);
        let centers = self.draw(n, &mut rng.split_str("centers"));
        let aug_rng = rng.split_str("augment");
        centers
            .into_iter()
            .enumerate()
            .map(|(k, (mi, idx))| {
                let lm = &labelmaps[mi];
                let center = lm.dims().voxel(idx);
                let params = augment.then(|| AugmentParams::sample(&mut aug_rng.split(k as u64)));
                build_sample(features, &volumes[mi], center, lm.labels()[idx], params)
            })
            .collect()
    }
}

pub fn sample_batch(
    volumes: &[Volume],
    labelmaps: &[LabelMap],
    n: usize,
    mode: SamplingMode,
    seed: u64,
    features: &FeatureSpec<'_>,
) -> Result<Vec<PatchSample>> {
    if n == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if volumes.is_empty() || volumes.len() != labelmaps.len() {
        return Err(Error::invalid("need matching, non-empty lists of volumes and label maps"));
    }
    for (v, l) in volumes.iter().zip(labelmaps) {
        if v.dims() != l.dims() {
            return Err(Error::DimMismatch(format!("volume {:?} vs label map {:?}", v.dims(), l.dims())));
        }
    }
    let sampler = CenterSampler::new(labelmaps, mode)?;
    Ok(sampler.batch(volumes, labelmaps, features, n, seed, false))
}
