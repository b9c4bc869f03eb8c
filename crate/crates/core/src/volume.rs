//! Dense 3D volumes and label maps, the `MRVOL001` container format, slice
//! export, and training-set intensity normalization.
//!
//! Voxel `(x, y, z)` lives at linear index `x + nx * (y + ny * z)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRVOL001";
const MAGIC_FAMILY: &[u8; 5] = b"MRVOL";

pub const CODE_INTENSITY: u8 = 0;
pub const CODE_LABELS: u8 = 1;
pub const CODE_PROBABILITIES: u8 = 2;

/// Voxel coordinate inside a volume.
pub type Voxel = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, v: Voxel) -> usize {
        v[0] + self.nx * (v[1] + self.ny * v[2])
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> Voxel {
        let x = index % self.nx;
        let r = index / self.nx;
        [x, r % self.ny, r / self.ny]
    }

    #[inline]
    pub fn contains(&self, v: [i64; 3]) -> bool {
        v[0] >= 0 && v[1] >= 0 && v[2] >= 0 && (v[0] as usize) < self.nx && (v[1] as usize) < self.ny && (v[2] as usize) < self.nz
    }
}

fn check_geometry(dims: Dims, spacing: [f32; 3]) -> Result<()> {
    if dims.nx == 0 || dims.ny == 0 || dims.nz == 0 {
        return Err(Error::Header(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Header(format!("spacing must be strictly positive, got {spacing:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!("volume {dims:?} needs {} values, got {}", dims.len(), data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("intensity at voxel {i}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume::new(dims, [1.0; 3], vec![value; dims.len()]).expect("valid constant volume")
    }

    pub fn from_fn(dims: Dims, spacing: [f32; 3], f: impl Fn(Voxel) -> f32) -> Result<Self> {
        let data = (0..dims.len()).map(|i| f(dims.voxel(i))).collect();
        Volume::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> f32 {
        self.data[self.dims.index(v)]
    }

    /// Value at a possibly out-of-bounds voxel; zero outside.
    #[inline]
    pub fn get_padded(&self, x: i64, y: i64, z: i64) -> f32 {
        if self.dims.contains([x, y, z]) {
            self.data[self.dims.index([x as usize, y as usize, z as usize])]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: [f32; 3],
    labels: Vec<u16>,
    num_classes: u16,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: [f32; 3], labels: Vec<u16>, num_classes: u16) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if labels.len() != dims.len() {
            return Err(Error::DimMismatch(format!("label map {dims:?} needs {} labels, got {}", dims.len(), labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::Header("num_classes must be positive".into()));
        }
        if let Some(index) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: labels[index], index, num_classes });
        }
        Ok(LabelMap { dims, spacing, labels, num_classes })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> u16 {
        self.labels[self.dims.index(v)]
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Decoded contents of an `MRVOL001` file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Labels(LabelMap),
    /// Class-major probability planes: `planes[c * n + i]`.
    Probabilities {
        dims: Dims,
        spacing: [f32; 3],
        num_classes: u16,
        planes: Vec<f32>,
    },
}

fn write_header(out: &mut Vec<u8>, dims: Dims, spacing: [f32; 3], code: u8) {
    out.extend_from_slice(MAGIC);
    for n in dims.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(code);
}

pub fn encode(file: &VolumeFile) -> Vec<u8> {
    let mut out = Vec::new();
    match file {
        VolumeFile::Intensity(v) => {
            write_header(&mut out, v.dims, v.spacing, CODE_INTENSITY);
            out.reserve(v.data.len() * 4);
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeFile::Labels(l) => {
            write_header(&mut out, l.dims, l.spacing, CODE_LABELS);
            out.extend_from_slice(&l.num_classes.to_le_bytes());
            out.reserve(l.labels.len() * 2);
            for x in &l.labels {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeFile::Probabilities { dims, spacing, num_classes, planes } => {
            write_header(&mut out, *dims, *spacing, CODE_PROBABILITIES);
            out.extend_from_slice(&num_classes.to_le_bytes());
            out.reserve(planes.len() * 4);
            for x in planes {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { expected: self.pos + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile> {
    let head = &bytes[..bytes.len().min(8)];
    if head != MAGIC {
        if head.len() == 8 && &head[..5] == MAGIC_FAMILY {
            return Err(Error::UnsupportedVersion(String::from_utf8_lossy(head).into_owned()));
        }
        return Err(Error::BadMagic { found: String::from_utf8_lossy(head).into_owned(), expected: "MRVOL001" });
    }
    let mut c = Cursor { bytes, pos: 8 };
    let dims = Dims::new(c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let spacing = [c.f32()?, c.f32()?, c.f32()?];
    check_geometry(dims, spacing)?;
    let code = c.take(1)?[0];
    let n = dims.len();
    match code {
        CODE_INTENSITY => {
            let raw = c.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(VolumeFile::Intensity(Volume::new(dims, spacing, data)?))
        }
        CODE_LABELS => {
            let num_classes = c.u16()?;
            let raw = c.take(n * 2)?;
            let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect();
            Ok(VolumeFile::Labels(LabelMap::new(dims, spacing, labels, num_classes)?))
        }
        CODE_PROBABILITIES => {
            let num_classes = c.u16()?;
            if num_classes == 0 {
                return Err(Error::Header("num_classes must be positive".into()));
            }
            let raw = c.take(n * num_classes as usize * 4)?;
            let planes: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if let Some(i) = planes.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::NonFinite(format!("probability entry {i} is {}", planes[i])));
            }
            Ok(VolumeFile::Probabilities { dims, spacing, num_classes, planes })
        }
        other => Err(Error::PayloadCode(other)),
    }
}

pub fn save(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    fs::write(path, encode(file))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<VolumeFile> {
    decode(&fs::read(path)?)
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    save(path, &VolumeFile::Intensity(v.clone()))
}

pub fn save_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    save(path, &VolumeFile::Labels(l.clone()))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match load(path)? {
        VolumeFile::Intensity(v) => Ok(v),
        _ => Err(Error::Header("expected an intensity volume (payload code 0)".into())),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match load(path)? {
        VolumeFile::Labels(l) => Ok(l),
        _ => Err(Error::Header("expected a label map (payload code 1)".into())),
    }
}

/// Export one slice as an 8-bit binary PGM, min-max windowed.
/// `axis` is the slicing axis (0 = x, 1 = y, 2 = z).
pub fn export_slice_pgm(v: &Volume, axis: usize, index: usize, path: impl AsRef<Path>) -> Result<()> {
    let d = v.dims.as_array();
    if axis > 2 {
        return Err(Error::invalid(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= d[axis] {
        return Err(Error::invalid(format!("slice {index} outside axis of length {}", d[axis])));
    }
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (d[a], d[b]);
    let mut values = Vec::with_capacity(w * h);
    for r in 0..h {
        for col in 0..w {
            let mut p = [0usize; 3];
            p[axis] = index;
            p[a] = col;
            p[b] = r;
            values.push(v.get(p));
        }
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|x| (((x - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Global intensity statistics of the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0 && mean.is_finite()) {
            return Err(Error::invalid(format!("invalid normalization stats mean={mean} std={std}")));
        }
        Ok(NormStats { mean, std })
    }

    /// Stats whose normalization undoes normalization by `self`.
    pub fn inverse(&self) -> NormStats {
        NormStats { mean: -self.mean / self.std, std: 1.0 / self.std }
    }
}

/// Mean and population standard deviation over every voxel of every volume.
pub fn compute_norm_stats(volumes: &[Volume]) -> Result<NormStats> {
    let n: usize = volumes.iter().map(|v| v.data.len()).sum();
    if n == 0 {
        return Err(Error::invalid("at least one training volume is required"));
    }
    let sum: f64 = volumes.iter().flat_map(|v| v.data.iter()).map(|&x| f64::from(x)).sum();
    let mean = sum / n as f64;
    let ss: f64 = volumes
        .iter()
        .flat_map(|v| v.data.iter())
        .map(|&x| {
            let d = f64::from(x) - mean;
            d * d
        })
        .sum();
    let std = (ss / n as f64).sqrt();
    if std <= 0.0 {
        return Err(Error::DegenerateIntensity);
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(v: &Volume, s: &NormStats) -> Volume {
    let data = v.data.iter().map(|&x| ((f64::from(x) - s.mean) / s.std) as f32).collect();
    Volume { dims: v.dims, spacing: v.spacing, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<f32>) -> Volume {
        let n = data.len();
        Volume::new(Dims::new(n, 1, 1), [1.0; 3], data).unwrap()
    }

    #[test]
    fn norm_stats_hand_values() {
        let s = compute_norm_stats(&[vol(vec![0.0, 2.0])]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        let s = compute_norm_stats(&[vol(vec![-1.0]), vol(vec![0.0, 1.0])]).unwrap();
        assert!(s.mean.abs() < 1e-15);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std - 0.816497).abs() < 1e-6);
    }

    #[test]
    fn constant_data_is_degenerate() {
        let err = compute_norm_stats(&[vol(vec![5.0; 10])]).unwrap_err();
        assert!(matches!(err, Error::DegenerateIntensity));
        assert!(err.to_string().contains("degenerate intensity distribution"));
    }

    #[test]
    fn normalize_examples() {
        let s = NormStats::new(1.0, 2.0).unwrap();
        assert_eq!(normalize(&vol(vec![3.0]), &s).data(), &[1.0]);
        assert_eq!(normalize(&vol(vec![1.0, 1.0]), &s).data(), &[0.0, 0.0]);
        let v = vol(vec![0.25, -3.5, 7.0]);
        assert_eq!(normalize(&v, &NormStats::new(0.0, 1.0).unwrap()), v);
    }

    #[test]
    fn inverse_stats_roundtrip() {
        let v = vol((0..50).map(|i| (i as f32 * 0.37).sin() * 3.0 + 2.0).collect());
        let s = compute_norm_stats(std::slice::from_ref(&v)).unwrap();
        let back = normalize(&normalize(&v, &s), &s.inverse());
        for (a, b) in v.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let renorm = compute_norm_stats(&[normalize(&v, &s)]).unwrap();
        assert!(renorm.mean.abs() < 1e-6 && (renorm.std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn magic_errors_are_distinct() {
        let v = vol(vec![1.0, 2.0]);
        let mut bytes = encode(&VolumeFile::Intensity(v));
        bytes[7] = b'0';
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(_))));
        assert!(decode(&bytes).unwrap_err().to_string().contains("unsupported version"));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_and_out_of_range() {
        let v = vol(vec![1.0, 2.0, 3.0]);
        let bytes = encode(&VolumeFile::Intensity(v));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));

        let l = LabelMap::new(Dims::new(2, 1, 1), [1.0; 3], vec![0, 1], 2).unwrap();
        let mut bytes = encode(&VolumeFile::Labels(l));
        let n = bytes.len();
        bytes[n - 2] = 9;
        assert!(matches!(decode(&bytes), Err(Error::LabelOutOfRange { label: 9, .. })));
        bytes[8 + 24] = 7;
        assert!(matches!(decode(&bytes), Err(Error::PayloadCode(7))));
    }

    #[test]
    fn golden_bytes_layout() {
        // 2x2x2 file assembled byte by byte, independent of `encode`
        let mut b = Vec::new();
        b.extend_from_slice(b"MRVOL001");
        for n in [2u32, 2, 2] {
            b.extend_from_slice(&n.to_le_bytes());
        }
        for s in [1.0f32, 1.5, 2.0] {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.push(0);
        let vals = [0.0f32, 1.0, -2.5, 3.25, 4.0, 5.5, -6.0, 7.75];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let VolumeFile::Intensity(v) = decode(&b).unwrap() else { panic!() };
        assert_eq!(v.data(), &vals);
        assert_eq!(v.get([1, 0, 0]), 1.0);
        assert_eq!(v.get([0, 1, 0]), -2.5);
        assert_eq!(v.get([0, 0, 1]), 4.0);
        assert_eq!(v.spacing(), [1.0, 1.5, 2.0]);
        assert_eq!(encode(&VolumeFile::Intensity(v)), b);
    }
}
