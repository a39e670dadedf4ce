use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{Error, Result};

/// Integer lattice coordinate `(w, h, d)` of a grid vertex.
pub type GridIndex = [u32; 3];

/// Cubic sampling grid. Samples sit at cell centres: vertex `i` along an axis
/// lives at `origin + (i + 0.5) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub origin: Vec3,
    pub edge_length: f64,
    pub resolution: u32,
}

impl VolumeSpec {
    pub fn new(origin: Vec3, edge_length: f64, resolution: u32) -> Result<Self> {
        if !(edge_length > 0.0) || !edge_length.is_finite() {
            return Err(Error::Config(format!(
                "edge length must be positive, got {edge_length}"
            )));
        }
        if resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if resolution >= 1 << 21 {
            return Err(Error::Config(format!("resolution {resolution} too large")));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::Config("origin must be finite".into()));
        }
        Ok(Self {
            origin,
            edge_length,
            resolution,
        })
    }

    /// A cube of the given edge length centred on `center`.
    pub fn centered(center: Vec3, edge_length: f64, resolution: u32) -> Result<Self> {
        Self::new(
            center - Vec3::repeat(edge_length / 2.0),
            edge_length,
            resolution,
        )
    }

    pub fn spacing(&self) -> f64 {
        self.edge_length / self.resolution as f64
    }

    pub fn center(&self) -> Vec3 {
        self.origin + Vec3::repeat(self.edge_length / 2.0)
    }

    pub fn vertex_count(&self) -> u64 {
        (self.resolution as u64).pow(3)
    }

    pub fn position(&self, idx: GridIndex) -> Vec3 {
        let h = self.spacing();
        self.origin
            + Vec3::new(
                (idx[0] as f64 + 0.5) * h,
                (idx[1] as f64 + 0.5) * h,
                (idx[2] as f64 + 0.5) * h,
            )
    }

    /// Continuous lattice coordinate of a world point (vertex `i` maps to `i`).
    pub fn lattice_coords(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.spacing() - Vec3::repeat(0.5)
    }

    /// Half-open cube test `[origin, origin + edge)`.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.edge_length)
    }

    pub fn in_lattice(&self, idx: [i64; 3]) -> bool {
        let r = self.resolution as i64;
        idx.iter().all(|&c| (0..r).contains(&c))
    }

    /// Same cube at twice the resolution.
    pub fn doubled(&self) -> Self {
        Self {
            resolution: self.resolution * 2,
            ..*self
        }
    }

    /// Same cube at half the resolution. Requires an even resolution.
    pub fn halved(&self) -> Result<Self> {
        if self.resolution % 2 != 0 || self.resolution < 2 {
            return Err(Error::Config(format!(
                "cannot halve odd resolution {}",
                self.resolution
            )));
        }
        Ok(Self {
            resolution: self.resolution / 2,
            ..*self
        })
    }

    /// True when both specs describe the same cube (resolution may differ).
    pub fn same_cube(&self, other: &Self) -> bool {
        (self.origin - other.origin).norm() <= 1e-9 * self.edge_length.max(1.0)
            && (self.edge_length - other.edge_length).abs() <= 1e-9 * self.edge_length.max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(VolumeSpec::new(Vec3::zeros(), 0.0, 4).is_err());
        assert!(VolumeSpec::new(Vec3::zeros(), -1.0, 4).is_err());
        assert!(VolumeSpec::new(Vec3::zeros(), 1.0, 0).is_err());
    }

    #[test]
    fn default_cube_spacing() {
        let spec = VolumeSpec::centered(Vec3::zeros(), 256.0, 256).unwrap();
        assert_eq!(spec.spacing(), 1.0);
        assert_eq!(spec.position([0, 0, 0]), Vec3::repeat(-127.5));
        assert_eq!(spec.position([255, 255, 255]), Vec3::repeat(127.5));
    }

    proptest! {
        #[test]
        fn vertices_lie_strictly_inside(r in 1u32..600, w in 0u32..600, h in 0u32..600, d in 0u32..600,
                                        edge in 1.0f64..500.0, ox in -300.0f64..300.0) {
            let spec = VolumeSpec::new(Vec3::new(ox, -ox, 0.5 * ox), edge, r).unwrap();
            let idx = [w % r, h % r, d % r];
            let p = spec.position(idx);
            prop_assert!(spec.contains(&p));
            let back = spec.lattice_coords(&p);
            for a in 0..3 {
                prop_assert!((back[a] - idx[a] as f64).abs() < 1e-6);
            }
        }
    }
}
