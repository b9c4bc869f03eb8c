//! Landmark grid and distance-image features.
//!
//! Landmarks sit on a `k × k × k` lattice spanning the volume, endpoints
//! included, so axis `i` uses coordinates `t * (N_i - 1) / (k - 1)` for
//! `t = 0..k`. Landmark `(i, j, m)` is stored at index `i + k * (j + k * m)`,
//! which is also the `[channel = m][row = j][col = i]` layout consumed by
//! the 2D distance branch.

use crate::error::{Error, Result};
use crate::volume::Dims;

pub const DEFAULT_LANDMARKS_PER_AXIS: usize = 7;
pub const DEFAULT_RBF_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkGrid {
    k: usize,
    dims: Dims,
    axes: [Vec<f64>; 3],
    positions: Vec<[f64; 3]>,
}

impl LandmarkGrid {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Coordinates along one axis.
    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }
}

pub fn build_grid(dims: Dims, k: usize) -> Result<LandmarkGrid> {
    if k < 2 {
        return Err(Error::invalid(format!("landmarks per axis must be >= 2, got {k}")));
    }
    if dims.as_array().iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!("grid dims must each be >= 2, got {dims:?}")));
    }
    let axes = dims.as_array().map(|n| {
        let step = (n - 1) as f64 / (k - 1) as f64;
        (0..k).map(|t| if t == k - 1 { (n - 1) as f64 } else { t as f64 * step }).collect::<Vec<_>>()
    });
    let mut positions = Vec::with_capacity(k * k * k);
    for m in 0..k {
        for j in 0..k {
            for i in 0..k {
                positions.push([axes[0][i], axes[1][j], axes[2][m]]);
            }
        }
    }
    Ok(LandmarkGrid { k, dims, axes, positions })
}

/// Euclidean distances from a query point to every landmark, `k³` entries in
/// grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceImage {
    pub k: usize,
    pub values: Vec<f64>,
}

impl DistanceImage {
    pub fn get(&self, i: usize, j: usize, m: usize) -> f64 {
        self.values[i + self.k * (j + self.k * m)]
    }
}

/// Distances in voxel units.
pub fn distance_image(grid: &LandmarkGrid, x: [f64; 3]) -> DistanceImage {
    distance_image_scaled(grid, x, [1.0; 3])
}

/// Distances with each axis scaled by `spacing` (millimetres when `spacing`
/// is the voxel size).
pub fn distance_image_scaled(grid: &LandmarkGrid, x: [f64; 3], spacing: [f64; 3]) -> DistanceImage {
    let values = grid
        .positions
        .iter()
        .map(|p| {
            let dx = (x[0] - p[0]) * spacing[0];
            let dy = (x[1] - p[1]) * spacing[1];
            let dz = (x[2] - p[2]) * spacing[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .collect();
    DistanceImage { k: grid.k, values }
}

/// Entrywise `exp(-alpha * d^2)`.
pub fn rbf_normalize(d: &DistanceImage, alpha: f64) -> Result<DistanceImage> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("rbf alpha must be > 0, got {alpha}")));
    }
    Ok(DistanceImage { k: d.k, values: d.values.iter().map(|v| (-alpha * v * v).exp()).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_grid() {
        let g = build_grid(Dims::cube(65), 2).unwrap();
        assert_eq!(g.len(), 8);
        for p in g.positions() {
            assert!(p.iter().all(|c| *c == 0.0 || *c == 64.0));
        }
        let d = distance_image(&g, [32.0; 3]);
        for v in &d.values {
            assert!((v - 32.0 * 3f64.sqrt()).abs() < 1e-9);
        }
        assert!((d.values[0] - 55.4256).abs() < 1e-4);
    }

    #[test]
    fn uniform_axes() {
        let g = build_grid(Dims::cube(65), 3).unwrap();
        assert_eq!(g.axis(0), &[0.0, 32.0, 64.0]);
        let g = build_grid(Dims::new(64, 32, 16), 5).unwrap();
        assert_eq!(g.axis(0), &[0.0, 15.75, 31.5, 47.25, 63.0]);
        assert_eq!(g.axis(2), &[0.0, 3.75, 7.5, 11.25, 15.0]);
        assert!(build_grid(Dims::cube(8), 1).is_err());
    }

    #[test]
    fn grid_order_is_x_fastest() {
        let g = build_grid(Dims::new(10, 20, 30), 3).unwrap();
        assert_eq!(g.positions()[1], [4.5, 0.0, 0.0]);
        assert_eq!(g.positions()[3], [0.0, 9.5, 0.0]);
        assert_eq!(g.positions()[9], [0.0, 0.0, 14.5]);
        let d = distance_image(&g, [1.0, 2.0, 3.0]);
        assert_eq!(d.get(1, 0, 0), d.values[1]);
        assert_eq!(d.get(0, 0, 1), d.values[9]);
    }

    #[test]
    fn coincident_landmark() {
        let g = build_grid(Dims::cube(64), 7).unwrap();
        let d = distance_image(&g, g.positions()[100]);
        assert_eq!(d.values[100], 0.0);
        assert!(d.values.iter().enumerate().all(|(i, v)| i == 100 || *v > 0.0));
    }

    #[test]
    fn rbf_values() {
        let d = DistanceImage { k: 1, values: vec![0.0] };
        assert_eq!(rbf_normalize(&d, 0.01).unwrap().values[0], 1.0);
        let d = DistanceImage { k: 1, values: vec![10.0] };
        assert!((rbf_normalize(&d, 0.01).unwrap().values[0] - (-1f64).exp()).abs() < 1e-9);
        assert!(rbf_normalize(&d, 0.0).is_err());
        assert!(rbf_normalize(&d, -1.0).is_err());
    }

    #[test]
    fn spacing_scales_distances() {
        let g = build_grid(Dims::cube(9), 2).unwrap();
        let a = distance_image(&g, [1.0, 2.0, 3.0]);
        let b = distance_image_scaled(&g, [1.0, 2.0, 3.0], [2.0; 3]);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn translation_is_lipschitz(x in prop::array::uniform3(-10.0f64..80.0), dx in prop::array::uniform3(-5.0f64..5.0)) {
            let g = build_grid(Dims::cube(64), 7).unwrap();
            let a = distance_image(&g, x);
            let b = distance_image(&g, [x[0] + dx[0], x[1] + dx[1], x[2] + dx[2]]);
            let norm = (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
            for (p, q) in a.values.iter().zip(&b.values) {
                prop_assert!((p - q).abs() <= norm + 1e-9);
                prop_assert!(*p >= 0.0);
            }
        }

        #[test]
        fn rbf_monotone_and_invertible(mut ds in prop::collection::vec(0.0f64..50.0, 2..20)) {
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = DistanceImage { k: 0, values: ds.clone() };
            let r = rbf_normalize(&d, DEFAULT_RBF_ALPHA).unwrap();
            for w in r.values.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for (y, x) in r.values.iter().zip(&ds) {
                prop_assert!(*y > 0.0 && *y <= 1.0);
                prop_assert!((-y.ln() / DEFAULT_RBF_ALPHA - x * x).abs() < 1e-9);
            }
        }
    }
}
