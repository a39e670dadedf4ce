use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use super::Vec3;
use crate::error::{Error, Result};

/// Pinhole camera. `rotation`/`translation` map world points into camera
/// space (`x_cam = R x + t`), with +z pointing forward, +x right, +y down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraView {
    pub focal: Vector2<f64>,
    pub principal: Vector2<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

impl CameraView {
    pub fn new(
        focal: Vector2<f64>,
        principal: Vector2<f64>,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            focal,
            principal,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image size must be positive".into()));
        }
        if !(self.focal.x > 0.0 && self.focal.y > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err > 1e-6 || !err.is_finite() {
            return Err(Error::Config(format!(
                "camera rotation is not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::Config("camera rotation has negative determinant".into()));
        }
        Ok(())
    }

    /// Builds a camera at `eye` looking at `target`; `up` is the world up axis.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: Vector2<f64>,
        principal: Vector2<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera up vector parallel to view axis".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(focal, principal, rotation, translation, width, height)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space unit direction of the optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Perspective projection. Points with non-positive depth or landing
    /// outside `[0, w-1] x [0, h-1]` are flagged invalid, never an error.
    pub fn project(&self, p: &Vec3) -> Projection {
        let c = self.to_camera(p);
        let depth = c.z;
        if !(depth > 0.0) {
            return Projection {
                pixel: Vector2::new(f64::NAN, f64::NAN),
                depth,
                valid: false,
            };
        }
        let pixel = Vector2::new(
            self.focal.x * c.x / depth + self.principal.x,
            self.focal.y * c.y / depth + self.principal.y,
        );
        Projection {
            pixel,
            depth,
            valid: self.in_bounds(&pixel),
        }
    }

    /// Inverse of [`project`](Self::project) for a known camera-space depth.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vec3 {
        let c = Vec3::new(
            (pixel.x - self.principal.x) / self.focal.x * depth,
            (pixel.y - self.principal.y) / self.focal.y * depth,
            depth,
        );
        self.rotation.transpose() * (c - self.translation)
    }

    /// World-space ray through a pixel: (origin, unit direction).
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> (Vec3, Vec3) {
        let d_cam = Vec3::new(
            (pixel.x - self.principal.x) / self.focal.x,
            (pixel.y - self.principal.y) / self.focal.y,
            1.0,
        );
        (self.center(), (self.rotation.transpose() * d_cam).normalize())
    }

    /// Same pose and field of view, rendered at a different image size.
    pub fn rescaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        // pixel centres at integer coordinates: u' + 0.5 = (u + 0.5) * s
        Self {
            focal: Vector2::new(self.focal.x * sx, self.focal.y * sy),
            principal: Vector2::new(
                (self.principal.x + 0.5) * sx - 0.5,
                (self.principal.y + 0.5) * sy - 0.5,
            ),
            width,
            height,
            ..self.clone()
        }
    }
}

/// On-disk camera layout: `{focal:[fx,fy], principal:[cx,cy], rotation:[9 row-major], translation:[3], width, height}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl TryFrom<CameraJson> for CameraView {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        CameraView::new(
            Vector2::from(j.focal),
            Vector2::from(j.principal),
            Matrix3::from_row_slice(&j.rotation),
            Vec3::from(j.translation),
            j.width,
            j.height,
        )
    }
}

impl From<CameraView> for CameraJson {
    fn from(c: CameraView) -> Self {
        let r = c.rotation;
        CameraJson {
            focal: [c.focal.x, c.focal.y],
            principal: [c.principal.x, c.principal.y],
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }
}
