//! Dice, Hausdorff and mean surface distance between label maps.
//!
//! Distances are measured between boundary voxels by default (voxels with a
//! face neighbour outside the mask, the volume exterior counting as outside),
//! or between full voxel sets. Coordinates are voxel centres scaled by the
//! spacing, so results are in millimetres. Directed distances use an exact
//! separable Euclidean distance transform; [`directed_distances_bruteforce`]
//! is the all-pairs reference.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Voxel};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!("mask of {} voxels for dims {:?}", data.len(), dims.as_array())));
        }
        Ok(BinaryMask { dims, spacing, data })
    }

    pub fn from_fn(dims: Dims, spacing: [f32; 3], f: impl Fn(Voxel) -> bool) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.voxel(i))).collect();
        BinaryMask { dims, spacing, data }
    }

    /// Voxels labelled `class`.
    pub fn from_labels(map: &LabelMap, class: u16) -> Self {
        BinaryMask { dims: map.dims(), spacing: map.spacing(), data: map.labels().iter().map(|&l| l == class).collect() }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    fn inside(&self, p: [i64; 3]) -> bool {
        self.dims.contains(p) && self.data[self.dims.index([p[0] as usize, p[1] as usize, p[2] as usize])]
    }

    fn is_boundary(&self, v: Voxel) -> bool {
        let p = v.map(|c| c as i64);
        const FACES: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        FACES.iter().any(|d| !self.inside([p[0] + d[0], p[1] + d[1], p[2] + d[2]]))
    }

    fn mm(&self, v: Voxel) -> [f64; 3] {
        [0, 1, 2].map(|a| v[a] as f64 * f64::from(self.spacing[a]))
    }
}

fn check_same(x: &BinaryMask, y: &BinaryMask) -> Result<()> {
    if x.dims != y.dims {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", x.dims.as_array(), y.dims.as_array())));
    }
    Ok(())
}

/// `2|X ∩ Y| / (|X| + |Y|)`, with two empty masks scoring 1.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    check_same(x, y)?;
    let (mut both, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data.iter().zip(&y.data) {
        nx += usize::from(a);
        ny += usize::from(b);
        both += usize::from(a && b);
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (nx + ny) as f64)
}

/// Which voxels of a mask stand for its surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointSet {
    #[default]
    Boundary,
    Full,
}

impl PointSet {
    pub fn name(self) -> &'static str {
        match self {
            PointSet::Boundary => "boundary",
            PointSet::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "boundary" | "surface" => Ok(PointSet::Boundary),
            "full" => Ok(PointSet::Full),
            _ => Err(Error::Config(format!("unknown point set '{s}' (expected boundary or full)"))),
        }
    }
}

/// Boundary voxels as a mask.
pub fn boundary_mask(x: &BinaryMask) -> BinaryMask {
    let data = (0..x.data.len()).map(|i| x.data[i] && x.is_boundary(x.dims.voxel(i))).collect();
    BinaryMask { dims: x.dims, spacing: x.spacing, data }
}

/// Boundary voxel centres in millimetres, in voxel order.
pub fn extract_boundary(x: &BinaryMask) -> Result<Vec<[f64; 3]>> {
    if x.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(voxels(&boundary_mask(x)).into_iter().map(|v| x.mm(v)).collect())
}

fn voxels(x: &BinaryMask) -> Vec<Voxel> {
    x.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| x.dims.voxel(i)).collect()
}

fn point_mask(x: &BinaryMask, set: PointSet) -> BinaryMask {
    match set {
        PointSet::Boundary => boundary_mask(x),
        PointSet::Full => x.clone(),
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// voxel of `target`. `target` must be nonempty.
pub fn squared_distance_transform(target: &BinaryMask) -> Vec<f64> {
    let [nx, ny, nz] = target.dims.as_array();
    let mut f: Vec<f64> = target.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    let sizes = [nx, ny, nz];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = sizes[axis];
        let s = f64::from(target.spacing[axis]);
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..sizes[o1] {
            for b in 0..sizes[o2] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|i| f[base + i * strides[axis]]));
                lower_envelope(&line, s, &mut out);
                for (i, &v) in out.iter().enumerate() {
                    f[base + i * strides[axis]] = v;
                }
            }
        }
    }
    f
}

/// One-dimensional transform `out[p] = min_q f[q] + (s (p - q))²`.
fn lower_envelope(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let s2 = s * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let (qf, rf) = (q as f64, r as f64);
                    let cross = ((f[q] + s2 * qf * qf) - (f[r] + s2 * rf * rf)) / (2.0 * s2 * (qf - rf));
                    if cross <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(cross);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = f[v[k]] + s2 * d * d;
    }
}

/// `d(p, Y)` for each point `p` of `x` (in voxel order).
pub fn directed_distances(x: &BinaryMask, y: &BinaryMask, set: PointSet) -> Result<Vec<f64>> {
    check_same(x, y)?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyMask);
    }
    let from = point_mask(x, set);
    let dt = squared_distance_transform(&point_mask(y, set));
    Ok(from.data.iter().zip(&dt).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()).collect())
}

/// All-pairs reference for [`directed_distances`].
pub fn directed_distances_bruteforce(x: &BinaryMask, y: &BinaryMask, set: PointSet) -> Result<Vec<f64>> {
    check_same(x, y)?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyMask);
    }
    let a: Vec<[f64; 3]> = voxels(&point_mask(x, set)).into_iter().map(|v| x.mm(v)).collect();
    let b: Vec<[f64; 3]> = voxels(&point_mask(y, set)).into_iter().map(|v| y.mm(v)).collect();
    Ok(a.iter()
        .map(|p| {
            b.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
        })
        .collect())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Hausdorff and mean surface distance from the two directed distance lists.
fn hd_msd(xy: &[f64], yx: &[f64]) -> (f64, f64) {
    (max_of(xy).max(max_of(yx)), 0.5 * (mean_of(xy) + mean_of(yx)))
}

pub fn hausdorff(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    hausdorff_with(x, y, PointSet::Boundary)
}

pub fn hausdorff_with(x: &BinaryMask, y: &BinaryMask, set: PointSet) -> Result<f64> {
    Ok(hd_msd(&directed_distances(x, y, set)?, &directed_distances(y, x, set)?).0)
}

pub fn msd(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    msd_with(x, y, PointSet::Boundary)
}

pub fn msd_with(x: &BinaryMask, y: &BinaryMask, set: PointSet) -> Result<f64> {
    Ok(hd_msd(&directed_distances(x, y, set)?, &directed_distances(y, x, set)?).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u16,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hausdorff_mm: Option<f64>,
    pub msd_mm: Option<f64>,
}

impl ClassMetrics {
    pub fn valid(&self) -> bool {
        self.hausdorff_mm.is_some()
    }
}

/// Per-class metrics for classes `1..num_classes`. Dice is averaged over
/// every class; distances over the valid ones (`None` if none are valid).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hausdorff_mm: Option<f64>,
    pub mean_msd_mm: Option<f64>,
}

impl MetricReport {
    pub fn class(&self, class_id: u16) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

pub fn evaluate_pair(pred: &LabelMap, gt: &LabelMap) -> Result<MetricReport> {
    evaluate_pair_with(pred, gt, PointSet::Boundary)
}

pub fn evaluate_pair_with(pred: &LabelMap, gt: &LabelMap, set: PointSet) -> Result<MetricReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims().as_array(), gt.dims().as_array())));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::DimMismatch(format!("prediction has {} classes, ground truth {}", pred.num_classes(), gt.num_classes())));
    }
    let classes = (1..gt.num_classes())
        .into_par_iter()
        .map(|c| {
            let x = BinaryMask::from_labels(pred, c);
            let y = BinaryMask::from_labels(gt, c).with_spacing(pred.spacing());
            let d = dice(&x, &y)?;
            let (hausdorff_mm, msd_mm) = if x.is_empty() || y.is_empty() {
                (None, None)
            } else {
                let (h, m) = hd_msd(&directed_distances(&x, &y, set)?, &directed_distances(&y, &x, set)?);
                (Some(h), Some(m))
            };
            Ok(ClassMetrics { class_id: c, dice: if x.is_empty() && y.is_empty() { 1.0 } else { d }, hausdorff_mm, msd_mm })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| mean_of(&vals));
    Ok(MetricReport {
        mean_dice: mean(classes.iter().map(|c| c.dice).collect()).unwrap_or(1.0),
        mean_hausdorff_mm: mean(classes.iter().filter_map(|c| c.hausdorff_mm).collect()),
        mean_msd_mm: mean(classes.iter().filter_map(|c| c.msd_mm).collect()),
        classes,
    })
}

pub const METRICS_HEADER: &str = "volume_id,class_id,dice,hausdorff_mm,msd_mm,valid";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per class and a `mean` row per volume; undefined distances are
/// written as empty fields.
pub fn metrics_csv(reports: &[(String, MetricReport)]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (id, r) in reports {
        for c in &r.classes {
            let _ = writeln!(s, "{id},{},{},{},{},{}", c.class_id, c.dice, opt(c.hausdorff_mm), opt(c.msd_mm), u8::from(c.valid()));
        }
        let all_valid = r.classes.iter().all(ClassMetrics::valid);
        let _ = writeln!(s, "{id},mean,{},{},{},{}", r.mean_dice, opt(r.mean_hausdorff_mm), opt(r.mean_msd_mm), u8::from(all_valid));
    }
    s
}

pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[(String, MetricReport)]) -> Result<()> {
    std::fs::write(path, metrics_csv(reports))?;
    Ok(())
}
