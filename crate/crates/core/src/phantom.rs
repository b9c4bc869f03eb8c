//! Deterministic synthetic phantoms standing in for registered brain scans.
//!
//! Layout (axis `m` is the mirror axis, `a`/`b` the two other axes):
//!
//! - class 1: a large outer ellipsoid;
//! - class 2: a flattened ellipsoid nested inside class 1, centred on the
//!   mid-plane of `m`;
//! - classes 3.. : small ellipsoids on a ring inside class 2;
//! - with `ambiguous_pair`, the last two classes are identical ellipsoids on
//!   either side of the mid-plane of `m`. They share one intensity level, and
//!   the noise field is reflected across the mid-plane, so the intensity image
//!   is exactly mirror-symmetric while the labels are not. Any classifier
//!   that only sees planes orthogonal to `m` cannot tell the pair apart.
//!
//! Every non-pair structure is centred on the mid-plane of `m`. Background is
//! exactly zero; structure voxels are `level + noise_sigma * N(0, 1)`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, LabelMap, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub num_classes: u16,
    pub seed: u64,
    pub noise_sigma: f64,
    pub ambiguous_pair: bool,
    pub mirror_axis: usize,
}

impl PhantomSpec {
    pub fn new(dims: Dims, num_classes: u16, seed: u64) -> Self {
        PhantomSpec { dims, num_classes, seed, noise_sigma: 0.1, ambiguous_pair: true, mirror_axis: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::invalid(format!("phantom needs at least 4 classes, got {}", self.num_classes)));
        }
        if self.dims.as_array().iter().any(|&n| n < 32) {
            return Err(Error::invalid(format!("phantom dims must each be >= 32, got {:?}", self.dims)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.mirror_axis > 2 {
            return Err(Error::invalid(format!("mirror_axis must be 0, 1 or 2, got {}", self.mirror_axis)));
        }
        Ok(())
    }

    /// Spacing between consecutive class intensity levels.
    pub fn level_step(&self) -> f64 {
        (3.5 * self.noise_sigma).max(0.5)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    label: u16,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

fn layout(spec: &PhantomSpec, rng: &mut Rng) -> Result<Vec<Ellipsoid>> {
    let d = spec.dims.as_array().map(|n| n as f64);
    let m = spec.mirror_axis;
    let (a, b) = match m {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mid = (d[m] - 1.0) / 2.0;
    let plane = d[a].min(d[b]);
    let too_small =
        |what: &str| Error::invalid(format!("dims {:?} too small to fit {} structures ({what})", spec.dims, spec.num_classes - 1));
    let mut jitter = |scale: f64| rng.uniform(-scale, scale);

    let mut shapes = Vec::new();
    let mut put = |center_ab: [f64; 2], center_m: f64, r_ab: [f64; 2], r_m: f64, label: u16| {
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        center[a] = center_ab[0];
        center[b] = center_ab[1];
        center[m] = center_m;
        radii[a] = r_ab[0];
        radii[b] = r_ab[1];
        radii[m] = r_m;
        shapes.push(Ellipsoid { center, radii, label });
    };

    let c1 = [(d[a] - 1.0) / 2.0 + jitter(0.03 * d[a]), (d[b] - 1.0) / 2.0 + jitter(0.03 * d[b])];
    let r1 = [0.38 * d[a] * (1.0 + jitter(0.04)), 0.40 * d[b] * (1.0 + jitter(0.04))];
    let r1m = 0.42 * d[m] * (1.0 + jitter(0.03));
    put(c1, mid, r1, r1m, 1);

    let n_pair = if spec.ambiguous_pair { 2 } else { 0 };
    let n_inner = spec.num_classes as usize - 2 - n_pair;

    let r2 = [0.26 * d[a] * (1.0 + jitter(0.04)), 0.26 * d[b] * (1.0 + jitter(0.04))];
    let r2m = 0.12 * d[m] * (1.0 + jitter(0.04));
    if n_inner >= 1 {
        let c2 = [c1[0] + jitter(0.02 * d[a]), c1[1] + jitter(0.02 * d[b])];
        put(c2, mid, r2, r2m, 2);
        let ring = n_inner - 1;
        if ring > 0 {
            let ring_r = 0.13 * plane;
            let per = std::f64::consts::PI * ring_r / ring as f64 - 1.0;
            let r = (0.07 * plane).min(per);
            if r < 2.0 || ring_r + r * 1.08 + 1.0 >= r2[0].min(r2[1]) {
                return Err(too_small("ring structures do not fit inside class 2"));
            }
            let phase = jitter(std::f64::consts::PI);
            for k in 0..ring {
                let t = phase + std::f64::consts::TAU * k as f64 / ring as f64;
                let s = 1.0 + jitter(0.08);
                let rm = (0.07 * d[m]).min(r2m - 1.5) * (1.0 + jitter(0.08)).min(1.0);
                if rm < 1.5 {
                    return Err(too_small("ring structures are too thin"));
                }
                put([c2[0] + ring_r * t.cos(), c2[1] + ring_r * t.sin()], mid, [r * s, r * s], rm, 3 + k as u16);
            }
        }
    }

    if spec.ambiguous_pair {
        let offset = 0.25 * d[m];
        let rp_m = 0.085 * d[m];
        let rp = [0.16 * d[a] * (1.0 + jitter(0.05)), 0.16 * d[b] * (1.0 + jitter(0.05))];
        let cp = [c1[0] + jitter(0.03 * d[a]), c1[1] + jitter(0.03 * d[b])];
        if r2m * 1.04 + 1.0 >= offset - rp_m || offset + rp_m + 1.0 >= r1m {
            return Err(too_small("mirrored pair does not fit"));
        }
        let first = spec.num_classes - 2;
        put(cp, mid - offset, rp, rp_m, first);
        put(cp, mid + offset, rp, rp_m, first + 1);
    }
    Ok(shapes)
}

/// Intensity level per class; the mirrored pair shares one level.
/// Mean intensity of every class. Levels depend only on the class index, so
/// a class looks the same in every phantom of a suite.
pub fn class_levels(spec: &PhantomSpec) -> Vec<f64> {
    let l = spec.num_classes as usize;
    let step = spec.level_step();
    (0..l)
        .map(|c| match c {
            0 => 0.0,
            _ if spec.ambiguous_pair && c == l - 1 => 1.0 + step * (l - 3) as f64,
            _ => 1.0 + step * (c - 1) as f64,
        })
        .collect()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let shapes = layout(spec, &mut root.split_str("layout"))?;
    let levels = class_levels(spec);
    let dims = spec.dims;
    let m = spec.mirror_axis;
    let nm = dims.as_array()[m];
    let noise = root.split_str("noise");

    let mut labels = vec![0u16; dims.len()];
    let mut data = vec![0f32; dims.len()];
    for (i, (lab, val)) in labels.iter_mut().zip(data.iter_mut()).enumerate() {
        let v = dims.voxel(i);
        let p = v.map(|c| c as f64);
        if let Some(s) = shapes.iter().rev().find(|s| s.contains(p)) {
            *lab = s.label;
            let mut key = v;
            if spec.ambiguous_pair {
                key[m] = key[m].min(nm - 1 - key[m]);
            }
            let z = if spec.noise_sigma > 0.0 { noise.split(dims.index(key) as u64).normal() } else { 0.0 };
            *val = (levels[s.label as usize] + spec.noise_sigma * z) as f32;
        }
    }
    let lm = LabelMap::new(dims, [1.0; 3], labels, spec.num_classes)?;
    let missing: Vec<u16> = lm.histogram().iter().enumerate().filter(|(_, &n)| n == 0).map(|(c, _)| c as u16).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("dims {:?} too small: classes {missing:?} vanished after rasterization", spec.dims)));
    }
    Ok((Volume::new(dims, [1.0; 3], data)?, lm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn components(lm: &LabelMap, class: u16) -> usize {
        let d = lm.dims();
        let mut seen = vec![false; d.len()];
        let mut count = 0;
        for start in 0..d.len() {
            if seen[start] || lm.labels()[start] != class {
                continue;
            }
            count += 1;
            let mut q = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = q.pop_front() {
                let v = d.voxel(i).map(|c| c as i64);
                for (ax, s) in [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
                    let mut n = v;
                    n[ax] += s;
                    if d.contains(n) {
                        let j = d.index(n.map(|c| c as usize));
                        if !seen[j] && lm.labels()[j] == class {
                            seen[j] = true;
                            q.push_back(j);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::new(Dims::cube(40), 6, 11);
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_phantom(&spec).unwrap().0, generate_phantom(&other).unwrap().0);
    }

    #[test]
    fn noiseless_components_are_connected_and_constant() {
        let spec = PhantomSpec { noise_sigma: 0.0, ambiguous_pair: false, ..PhantomSpec::new(Dims::cube(48), 6, 3) };
        let (v, lm) = generate_phantom(&spec).unwrap();
        for c in 1..6u16 {
            assert_eq!(components(&lm, c), 1, "class {c}");
            let vals: Vec<f32> = lm.labels().iter().zip(v.data()).filter(|(l, _)| **l == c).map(|(_, x)| *x).collect();
            assert!(vals.iter().all(|x| *x == vals[0]));
        }
    }

    #[test]
    fn default_eight_class_phantom() {
        let (v, lm) = generate_phantom(&PhantomSpec::new(Dims::cube(64), 8, 1)).unwrap();
        let h = lm.histogram();
        assert!(h.iter().all(|&n| n > 0));
        let bg = h[0] as f64 / lm.labels().len() as f64;
        assert!((0.4..=0.9).contains(&bg), "{bg}");
        // background is exactly zero, structures never are
        for (l, x) in lm.labels().iter().zip(v.data()) {
            assert_eq!(*l == 0, *x == 0.0);
        }
    }

    #[test]
    fn mirrored_pair_intensities_match() {
        let spec = PhantomSpec::new(Dims::cube(64), 8, 5);
        let (v, lm) = generate_phantom(&spec).unwrap();
        let stats = |c: u16| {
            let xs: Vec<f64> = lm.labels().iter().zip(v.data()).filter(|(l, _)| **l == c).map(|(_, x)| f64::from(*x)).collect();
            (xs.len(), xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let (na, ma) = stats(6);
        let (nb, mb) = stats(7);
        assert!(na >= 1000 && nb >= 1000, "{na} {nb}");
        assert!((ma - mb).abs() < 0.05 * spec.noise_sigma);
        let d = v.dims();
        for i in 0..d.len() {
            let [x, y, z] = d.voxel(i);
            assert_eq!(v.data()[i], v.get([x, y, 63 - z]));
        }
    }

    #[test]
    fn nesting_present() {
        let (_, lm) = generate_phantom(&PhantomSpec::new(Dims::cube(64), 8, 9)).unwrap();
        let bbox = |c: u16| {
            let mut lo = [usize::MAX; 3];
            let mut hi = [0; 3];
            for (i, &l) in lm.labels().iter().enumerate() {
                if l == c {
                    let v = lm.dims().voxel(i);
                    for k in 0..3 {
                        lo[k] = lo[k].min(v[k]);
                        hi[k] = hi[k].max(v[k]);
                    }
                }
            }
            (lo, hi)
        };
        let (lo1, hi1) = bbox(1);
        let (lo2, hi2) = bbox(2);
        assert!((0..3).all(|k| lo1[k] < lo2[k] && hi2[k] < hi1[k]));
    }

    #[test]
    fn levels_are_separated() {
        let spec = PhantomSpec { noise_sigma: 0.3, ..PhantomSpec::new(Dims::cube(64), 8, 2) };
        let lv = class_levels(&spec);
        assert_eq!(lv[6], lv[7]);
        for i in 1..7 {
            for j in (i + 1)..7 {
                assert!((lv[i] - lv[j]).abs() >= 3.0 * spec.noise_sigma);
            }
        }
    }

    #[test]
    fn levels_do_not_depend_on_seed() {
        let a = class_levels(&PhantomSpec::new(Dims::cube(64), 8, 1));
        let b = class_levels(&PhantomSpec::new(Dims::cube(64), 8, 77));
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_or_invalid() {
        assert!(generate_phantom(&PhantomSpec::new(Dims::cube(16), 8, 0)).is_err());
        assert!(generate_phantom(&PhantomSpec::new(Dims::cube(32), 3, 0)).is_err());
        assert!(generate_phantom(&PhantomSpec::new(Dims::cube(32), 40, 0)).is_err());
    }
}
