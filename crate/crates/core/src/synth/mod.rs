//! Synthetic captures: procedural meshes, camera rigs and a ray-cast renderer.

pub mod shapes;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, TriangleMesh, Vec3};
use crate::spatial::TriangleIndex;

/// Depth written where no surface is hit.
pub const BACKGROUND_DEPTH: f64 = 3.4e38;

/// Pinhole intrinsics shared by every camera of a rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: [f64; 2],
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square image with the principal point at the centre and
    /// `focal = focal_ratio * size`.
    pub fn square(size: u32, focal_ratio: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            focal: [focal_ratio * size as f64; 2],
            principal: [c, c],
            width: size,
            height: size,
        }
    }
}

/// `n` cameras evenly spaced in azimuth on a horizontal circle of `radius`
/// around `look_at`, raised by `height`, all aimed at `look_at` with +y up.
/// Camera 0 sits on the +z side.
pub fn camera_ring(
    n: usize,
    radius: f64,
    height: f64,
    look_at: Vec3,
    intrinsics: &Intrinsics,
) -> Result<Vec<CameraView>> {
    if n == 0 {
        return Err(Error::Config("camera ring needs at least one camera".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("ring radius must be positive, got {radius}")));
    }
    (0..n)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = look_at + Vec3::new(radius * theta.sin(), height, radius * theta.cos());
            CameraView::look_at(
                eye,
                look_at,
                Vec3::y(),
                Vector2::from(intrinsics.focal),
                Vector2::from(intrinsics.principal),
                intrinsics.width,
                intrinsics.height,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shading {
    /// Colour scaled by `|n · view|`.
    #[default]
    Headlight,
    /// Raw surface colour.
    Unlit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub shading: Shading,
    /// Used when the mesh carries no vertex colours.
    pub default_color: [f64; 3],
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            shading: Shading::Headlight,
            default_color: [0.8, 0.8, 0.8],
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// One rendered view. `depth` is camera-space z; `normal` holds camera-space
/// normals encoded as `(n + 1) / 2` (zero on background).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub normal: ImageBuffer,
    pub mask: ImageBuffer,
}

/// Surface hit behind a pixel: world position, interpolated unit normal, and
/// the triangle with barycentrics.
#[derive(Debug, Clone, Copy)]
pub struct PixelHit {
    pub point: Vec3,
    pub normal: Vec3,
    pub depth: f64,
    pub triangle: u32,
    pub bary: Vec3,
}

/// Casts one ray through every pixel centre of `camera`.
pub fn trace_view(
    mesh: &TriangleMesh,
    index: &TriangleIndex,
    normals: &[Vec3],
    camera: &CameraView,
) -> Vec<Option<PixelHit>> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let center = camera.center();
    let forward = camera.forward();
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let pixel = Vector2::new((i % w) as f64, (i / w) as f64);
            let (_, dir) = camera.pixel_ray(&pixel);
            let hit = index.raycast(&center, &dir, 1e-6)?;
            let [a, b, c] = mesh.triangles[hit.triangle as usize].map(|v| v as usize);
            let n = normals[a] * hit.bary[0] + normals[b] * hit.bary[1] + normals[c] * hit.bary[2];
            let n = if n.norm() > 1e-12 {
                n.normalize()
            } else {
                mesh.face_cross(hit.triangle as usize).normalize()
            };
            let point = center + dir * hit.t;
            Some(PixelHit {
                point,
                normal: n,
                depth: (point - center).dot(&forward),
                triangle: hit.triangle,
                bary: hit.bary,
            })
        })
        .collect()
}

/// Renders colour, depth, normal and mask for each camera.
pub fn render_views(mesh: &TriangleMesh, cameras: &[CameraView], options: &RenderOptions) -> Vec<ViewRender> {
    let index = TriangleIndex::new(mesh);
    let normals = mesh.normals_or_computed();
    cameras
        .iter()
        .map(|cam| {
            let hits = trace_view(mesh, &index, &normals, cam);
            let surface = |hit: &PixelHit| {
                let [a, b, c] = mesh.triangles[hit.triangle as usize];
                match &mesh.colors {
                    Some(colors) => {
                        colors[a as usize] * hit.bary[0]
                            + colors[b as usize] * hit.bary[1]
                            + colors[c as usize] * hit.bary[2]
                    }
                    None => Vec3::from(options.default_color),
                }
            };
            render_from_hits(cam, &hits, options, |hit| surface(hit))
        })
        .collect()
}

/// Assembles the four buffers from per-pixel hits, with `albedo` giving the
/// unshaded surface colour of each hit.
pub fn render_from_hits(
    camera: &CameraView,
    hits: &[Option<PixelHit>],
    options: &RenderOptions,
    albedo: impl Fn(&PixelHit) -> Vec3,
) -> ViewRender {
    let (w, h) = (camera.width, camera.height);
    let mut color = ImageBuffer::filled(w, h, 3, 0.0);
    let mut depth = ImageBuffer::filled(w, h, 1, BACKGROUND_DEPTH);
    let mut normal = ImageBuffer::filled(w, h, 3, 0.0);
    let mut mask = ImageBuffer::filled(w, h, 1, 0.0);
    let center = camera.center();
    for (i, hit) in hits.iter().enumerate() {
        let (x, y) = (i as u32 % w, i as u32 / w);
        match hit {
            Some(hit) => {
                let base = albedo(hit);
                let shade = match options.shading {
                    Shading::Headlight => hit.normal.dot(&(center - hit.point).normalize()).abs(),
                    Shading::Unlit => 1.0,
                };
                let n = camera.rotation * hit.normal;
                for c in 0..3 {
                    color.set(x, y, c as u32, (base[c] * shade).clamp(0.0, 1.0));
                    normal.set(x, y, c as u32, (n[c] + 1.0) / 2.0);
                }
                depth.set(x, y, 0, hit.depth);
                mask.set(x, y, 0, 1.0);
            }
            None => {
                for c in 0..3 {
                    color.set(x, y, c as u32, options.background[c]);
                }
            }
        }
    }
    ViewRender {
        color,
        depth,
        normal,
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_axes_pass_through_target() {
        let target = Vec3::new(3.0, 10.0, -4.0);
        let cams = camera_ring(7, 200.0, 30.0, target, &Intrinsics::square(64, 1.0)).unwrap();
        for c in &cams {
            let to = target - c.center();
            let off = to - c.forward() * to.dot(&c.forward());
            assert!(off.norm() < 1e-6);
            assert!(((c.center() - target).xz().norm() - 200.0).abs() < 1e-9);
        }
        assert!(cams[0].center().z > target.z);
        assert!(matches!(camera_ring(0, 1.0, 0.0, target, &Intrinsics::square(8, 1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_render_matches_analytic_disc() {
        let r = 30.0;
        let d = 200.0;
        let mesh = shapes::icosphere(r, 5);
        let intr = Intrinsics::square(128, 1.0);
        let cams = camera_ring(1, d, 0.0, Vec3::zeros(), &intr).unwrap();
        let view = &render_views(&mesh, &cams, &RenderOptions::default())[0];
        // silhouette radius of a sphere: f * r / sqrt(d^2 - r^2)
        let disc = intr.focal[0] * r / (d * d - r * r).sqrt();
        let c = intr.principal[0];
        for y in 0..128 {
            for x in 0..128 {
                let rad = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let m = view.mask.get(x, y, 0);
                if rad < disc - 1.0 {
                    assert_eq!(m, 1.0, "({x},{y})");
                } else if rad > disc + 1.0 {
                    assert_eq!(m, 0.0, "({x},{y})");
                }
                let z = view.depth.get(x, y, 0);
                assert_eq!(m == 1.0, z < BACKGROUND_DEPTH);
            }
        }
        let centre_depth = view.depth.get(64, 64, 0).min(view.depth.get(63, 63, 0));
        assert!((centre_depth - (d - r)).abs() < 0.05, "{centre_depth}");
    }

    #[test]
    fn rendered_normals_match_interpolated_vertex_normals() {
        let mesh = shapes::icosphere(30.0, 4);
        let cams = camera_ring(3, 150.0, 20.0, Vec3::zeros(), &Intrinsics::square(64, 1.0)).unwrap();
        let views = render_views(&mesh, &cams, &RenderOptions::default());
        for (cam, view) in cams.iter().zip(&views) {
            for y in 0..64 {
                for x in 0..64 {
                    if view.mask.get(x, y, 0) == 0.0 {
                        continue;
                    }
                    let p = cam.unproject(&Vector2::new(x as f64, y as f64), view.depth.get(x, y, 0));
                    let n_enc = Vec3::new(view.normal.get(x, y, 0), view.normal.get(x, y, 1), view.normal.get(x, y, 2));
                    let n_world = cam.rotation.transpose() * (n_enc * 2.0 - Vec3::repeat(1.0));
                    let angle = n_world.normalize().dot(&p.normalize()).clamp(-1.0, 1.0).acos().to_degrees();
                    assert!(angle < 2.0, "{angle}");
                }
            }
        }
    }

    #[test]
    fn unlit_render_reproduces_vertex_colors() {
        let mut mesh = shapes::icosphere(20.0, 2);
        let n = mesh.vertices.len();
        mesh.colors = Some(vec![Vec3::new(0.2, 0.4, 0.6); n]);
        let cams = camera_ring(1, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(32, 1.0)).unwrap();
        let opts = RenderOptions {
            shading: Shading::Unlit,
            ..Default::default()
        };
        let view = &render_views(&mesh, &cams, &opts)[0];
        assert!((view.color.get(16, 16, 2) - 0.6).abs() < 1e-9);
        assert_eq!(view.color.get(0, 0, 0), 0.0);
    }
}
