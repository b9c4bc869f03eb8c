//! Probabilistic atlas built from registered training label maps.

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, VolumeFile};

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Per-voxel class probabilities, stored voxel-major (`probs[i * ℓ + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbAtlas {
    dims: Dims,
    spacing: [f32; 3],
    num_classes: u16,
    probs: Vec<f32>,
    uniform: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasOptions {
    /// Laplace smoothing pseudo-count.
    pub epsilon: f64,
    /// Optional Gaussian blur of the class frequency maps, in voxels.
    pub blur_sigma: Option<f64>,
}

impl Default for AtlasOptions {
    fn default() -> Self {
        AtlasOptions { epsilon: DEFAULT_EPSILON, blur_sigma: None }
    }
}

/// `p(c | v) = (count_c(v) + ε) / (N + ℓ ε)`.
pub fn build_atlas(labelmaps: &[LabelMap], epsilon: f64) -> Result<ProbAtlas> {
    build_atlas_with(labelmaps, AtlasOptions { epsilon, blur_sigma: None })
}

pub fn build_atlas_with(labelmaps: &[LabelMap], opts: AtlasOptions) -> Result<ProbAtlas> {
    let first = labelmaps.first().ok_or_else(|| Error::invalid("atlas needs at least one label map"))?;
    if !(opts.epsilon.is_finite() && opts.epsilon >= 0.0) {
        return Err(Error::invalid(format!("atlas epsilon must be >= 0, got {}", opts.epsilon)));
    }
    let (dims, l) = (first.dims(), first.num_classes());
    for (i, m) in labelmaps.iter().enumerate() {
        if m.dims() != dims || m.num_classes() != l {
            return Err(Error::DimMismatch(format!(
                "label map {i} has dims {:?} / {} classes, expected {dims:?} / {l}",
                m.dims(),
                m.num_classes()
            )));
        }
    }
    let lc = l as usize;
    let n = dims.len();
    let mut counts = vec![0f64; n * lc];
    for m in labelmaps {
        for (i, &lab) in m.labels().iter().enumerate() {
            counts[i * lc + lab as usize] += 1.0;
        }
    }
    if let Some(sigma) = opts.blur_sigma {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("blur sigma must be > 0, got {sigma}")));
        }
        blur_counts(&mut counts, dims, lc, sigma);
    }
    let eps = opts.epsilon;
    let mut probs = vec![0f32; n * lc];
    for i in 0..n {
        let row = &counts[i * lc..(i + 1) * lc];
        let total: f64 = row.iter().sum::<f64>() + lc as f64 * eps;
        if total <= 0.0 {
            return Err(Error::invalid("epsilon = 0 with blurred-away counts leaves an empty voxel"));
        }
        for c in 0..lc {
            probs[i * lc + c] = ((row[c] + eps) / total) as f32;
        }
    }
    Ok(ProbAtlas { dims, spacing: first.spacing(), num_classes: l, probs, uniform: vec![1.0 / lc as f32; lc] })
}

fn blur_counts(counts: &mut [f64], dims: Dims, lc: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let d = dims.as_array();
    let mut buf = vec![0f64; counts.len()];
    for axis in 0..3 {
        for i in 0..dims.len() {
            let v = dims.voxel(i);
            let mut wsum = 0.0;
            let out = &mut buf[i * lc..(i + 1) * lc];
            out.iter_mut().for_each(|x| *x = 0.0);
            for (t, w) in (-radius..=radius).zip(&kernel) {
                let p = v[axis] as i64 + t;
                if p < 0 || p >= d[axis] as i64 {
                    continue;
                }
                let mut u = v;
                u[axis] = p as usize;
                let j = dims.index(u);
                wsum += w;
                for c in 0..lc {
                    out[c] += w * counts[j * lc + c];
                }
            }
            out.iter_mut().for_each(|x| *x /= wsum);
        }
        counts.copy_from_slice(&buf);
    }
}

impl ProbAtlas {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Stored vector for an in-bounds voxel, the uniform vector `1/ℓ`
    /// otherwise.
    pub fn query(&self, v: [i64; 3]) -> &[f32] {
        if self.dims.contains(v) {
            let i = self.dims.index(v.map(|c| c as usize));
            let l = self.num_classes as usize;
            &self.probs[i * l..(i + 1) * l]
        } else {
            &self.uniform
        }
    }

    /// Class with the highest probability at an in-bounds voxel; ties go to
    /// the lowest index.
    pub fn argmax(&self, v: [usize; 3]) -> u16 {
        let p = self.query(v.map(|c| c as i64));
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best as u16
    }

    pub fn to_file(&self) -> VolumeFile {
        let (n, l) = (self.dims.len(), self.num_classes as usize);
        let mut planes = vec![0f32; n * l];
        for i in 0..n {
            for c in 0..l {
                planes[c * n + i] = self.probs[i * l + c];
            }
        }
        VolumeFile::Probabilities { dims: self.dims, spacing: self.spacing, num_classes: self.num_classes, planes }
    }

    pub fn from_file(file: VolumeFile) -> Result<Self> {
        let VolumeFile::Probabilities { dims, spacing, num_classes, planes } = file else {
            return Err(Error::Header("expected a probability atlas (payload code 2)".into()));
        };
        let (n, l) = (dims.len(), num_classes as usize);
        let mut probs = vec![0f32; n * l];
        for i in 0..n {
            let mut s = 0f64;
            for c in 0..l {
                let p = planes[c * n + i];
                probs[i * l + c] = p;
                s += f64::from(p);
            }
            if (s - 1.0).abs() > 1e-4 {
                return Err(Error::Header(format!("atlas voxel {i} sums to {s}, expected 1")));
            }
        }
        Ok(ProbAtlas { dims, spacing, num_classes, probs, uniform: vec![1.0 / l as f32; l] })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::volume::save(path, &self.to_file())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_file(crate::volume::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(labels: Vec<u16>, l: u16) -> LabelMap {
        let n = labels.len();
        LabelMap::new(Dims::new(n, 1, 1), [1.0; 3], labels, l).unwrap()
    }

    #[test]
    fn smoothing_formula() {
        let a = build_atlas(&[map(vec![0; 3], 4)], 1e-3).unwrap();
        let p = a.query([1, 0, 0]);
        assert!((f64::from(p[0]) - 1.001 / 1.004).abs() < 1e-7);
        assert!((f64::from(p[0]) - 0.997012).abs() < 1e-6);
        for &q in &p[1..] {
            assert!((f64::from(q) - 0.001 / 1.004).abs() < 1e-9);
        }
    }

    #[test]
    fn disagreement_and_fallback() {
        let a = build_atlas(&[map(vec![1, 0], 4), map(vec![2, 0], 4)], 0.0).unwrap();
        assert_eq!(a.query([0, 0, 0]), &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(a.query([-1, 0, 0]), &[0.25; 4]);
        assert_eq!(a.query([2, 0, 0]), &[0.25; 4]);
        assert_eq!(a.query([1, 0, 0]), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(build_atlas(&[map(vec![0; 3], 4), map(vec![0; 4], 4)], 0.0), Err(Error::DimMismatch(_))));
        assert!(build_atlas(&[], 0.0).is_err());
    }

    #[test]
    fn blur_keeps_distributions() {
        let maps: Vec<LabelMap> = (0..3)
            .map(|s| {
                let d = Dims::cube(6);
                let labels = (0..d.len()).map(|i| ((d.voxel(i)[0] + s) % 3) as u16).collect();
                LabelMap::new(d, [1.0; 3], labels, 3).unwrap()
            })
            .collect();
        let a = build_atlas_with(&maps, AtlasOptions { epsilon: 1e-3, blur_sigma: Some(1.0) }).unwrap();
        for row in a.probs().chunks(3) {
            assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn file_roundtrip() {
        let a = build_atlas(&[map(vec![0, 1, 2, 3], 4), map(vec![0, 1, 1, 3], 4)], 1e-3).unwrap();
        let bytes = crate::volume::encode(&a.to_file());
        assert_eq!(ProbAtlas::from_file(crate::volume::decode(&bytes).unwrap()).unwrap(), a);
    }

    fn maps_strategy() -> impl Strategy<Value = Vec<Vec<u16>>> {
        prop::collection::vec(prop::collection::vec(0u16..5, 12), 1..6)
    }

    proptest! {
        #[test]
        fn sums_to_one_and_permutation_invariant(raw in maps_strategy(), eps in 0.0f64..0.1) {
            let maps: Vec<LabelMap> = raw.iter().map(|r| map(r.clone(), 5)).collect();
            let a = build_atlas(&maps, eps).unwrap();
            for row in a.probs().chunks(5) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let mut rev = maps.clone();
            rev.reverse();
            prop_assert_eq!(build_atlas(&rev, eps).unwrap(), a);
        }

        #[test]
        fn argmax_is_strict_majority(raw in maps_strategy()) {
            let maps: Vec<LabelMap> = raw.iter().map(|r| map(r.clone(), 5)).collect();
            let n = maps.len() as f64;
            let a = build_atlas(&maps, 0.99 / (2.0 * n)).unwrap();
            for v in 0..12 {
                let mut counts = [0usize; 5];
                for m in &maps {
                    counts[m.labels()[v] as usize] += 1;
                }
                let top = *counts.iter().max().unwrap();
                if counts.iter().filter(|&&c| c == top).count() == 1 {
                    let major = counts.iter().position(|&c| c == top).unwrap() as u16;
                    prop_assert_eq!(a.argmax([v, 0, 0]), major);
                }
            }
        }

        #[test]
        fn single_map_argmax_reproduces_it(r in prop::collection::vec(0u16..5, 12)) {
            let m = map(r.clone(), 5);
            let a = build_atlas(std::slice::from_ref(&m), 0.0).unwrap();
            for (v, &expected) in r.iter().enumerate() {
                prop_assert_eq!(a.argmax([v, 0, 0]), expected);
            }
        }
    }
}
