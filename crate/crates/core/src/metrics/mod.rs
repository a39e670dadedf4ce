//! Surface distances, normal error and image similarity.


use std::path::Path;

use rayon::prelude::*;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, TriangleMesh, Vec3};
use crate::spatial::TriangleIndex;
use crate::synth::trace_view;
use crate::tsdf::sample_surface;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean distances in cm. Precision measures `pred -> gt`, recall `gt -> pred`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshDistanceReport {
    /// Point to nearest surface point.
    pub p2s_precision: f64,
    pub p2s_recall: f64,
    /// Vertex to nearest vertex.
    pub chamfer_precision: f64,
    pub chamfer_recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceSampling {
    /// Mesh vertices.
    Vertices,
    /// `n` area-uniform surface samples.
    Area { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceOptions {
    pub sampling: SurfaceSampling,
    /// Scale both meshes so the ground truth is this tall (cm) along y.
    pub normalize_height: Option<f64>,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            sampling: SurfaceSampling::Vertices,
            normalize_height: None,
        }
    }
}

fn query_points(mesh: &TriangleMesh, sampling: SurfaceSampling) -> Vec<Vec3> {
    match sampling {
        SurfaceSampling::Vertices => mesh.vertices.clone(),
        SurfaceSampling::Area { samples, seed } => sample_surface(mesh, samples, seed),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean exact point-to-surface distance from `points` to `mesh`.
pub fn mean_point_to_surface(points: &[Vec3], mesh: &TriangleMesh) -> f64 {
    let index = TriangleIndex::new(mesh);
    let d: Vec<f64> = points
        .par_iter()
        .map(|p| index.nearest(p, f64::INFINITY).expect("mesh has triangles").distance)
        .collect();
    mean(&d)
}

/// Mean distance from `points` to the nearest vertex of `mesh`.
pub fn mean_point_to_vertex(points: &[Vec3], mesh: &TriangleMesh) -> f64 {
    let tree = RTree::bulk_load(mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect());
    let d: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let q = tree.nearest_neighbor(&[p.x, p.y, p.z]).expect("mesh has vertices");
            (Vec3::from(*q) - p).norm()
        })
        .collect();
    mean(&d)
}

fn check_mesh(mesh: &TriangleMesh, what: &str) -> Result<()> {
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(Error::Evaluation(format!("{what} mesh is empty")));
    }
    Ok(())
}

pub fn p2s_chamfer(pred: &TriangleMesh, gt: &TriangleMesh) -> Result<MeshDistanceReport> {
    p2s_chamfer_with(pred, gt, &DistanceOptions::default())
}

pub fn p2s_chamfer_with(pred: &TriangleMesh, gt: &TriangleMesh, opts: &DistanceOptions) -> Result<MeshDistanceReport> {
    check_mesh(pred, "predicted")?;
    check_mesh(gt, "ground-truth")?;
    let (pred, gt) = match opts.normalize_height {
        Some(h) => {
            let (lo, hi) = gt.bounding_box().expect("non-empty");
            let extent = hi.y - lo.y;
            if !(extent > 0.0) {
                return Err(Error::Evaluation("ground-truth mesh has no height".into()));
            }
            let s = h / extent;
            (pred.scaled(s), gt.scaled(s))
        }
        None => (pred.clone(), gt.clone()),
    };
    let pp = query_points(&pred, opts.sampling);
    let gp = query_points(&gt, opts.sampling);
    if pp.is_empty() || gp.is_empty() {
        return Err(Error::Evaluation("no surface samples (zero-area mesh)".into()));
    }
    Ok(MeshDistanceReport {
        p2s_precision: mean_point_to_surface(&pp, &gt),
        p2s_recall: mean_point_to_surface(&gp, &pred),
        chamfer_precision: mean_point_to_vertex(&pred.vertices, &gt),
        chamfer_recall: mean_point_to_vertex(&gt.vertices, &pred),
    })
}

/// Mean angle in degrees between the camera-space normals of the two
/// meshes over pixels where both are hit.
pub fn normal_error(pred: &TriangleMesh, gt: &TriangleMesh, cameras: &[CameraView]) -> Result<f64> {
    check_mesh(pred, "predicted")?;
    check_mesh(gt, "ground-truth")?;
    if cameras.is_empty() {
        return Err(Error::Evaluation("normal error needs at least one camera".into()));
    }
    let (pi, gi) = (TriangleIndex::new(pred), TriangleIndex::new(gt));
    let (pn, gn) = (pred.normals_or_computed(), gt.normals_or_computed());
    let mut angles = Vec::new();
    for cam in cameras {
        let a = trace_view(pred, &pi, &pn, cam);
        let b = trace_view(gt, &gi, &gn, cam);
        for (ha, hb) in a.iter().zip(&b) {
            if let (Some(ha), Some(hb)) = (ha, hb) {
                let c = ha.normal.dot(&hb.normal).clamp(-1.0, 1.0);
                angles.push(c.acos().to_degrees());
            }
        }
    }
    if angles.is_empty() {
        return Err(Error::Evaluation("the meshes share no covered pixel".into()));
    }
    Ok(mean(&angles))
}

fn same_size(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Config(format!(
            "image sizes differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all pixels and channels of `[0, 1]` images,
/// capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_size(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Config("empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn luminance(img: &ImageBuffer) -> Vec<f64> {
    if img.channels() >= 3 {
        img.luminance().into_data()
    } else {
        img.channel(0).into_data()
    }
}

/// Normalised 1D Gaussian of [`SSIM_WINDOW`] taps.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian-windowed filter over the valid region (no padding).
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance over all full 11x11 Gaussian windows.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Config(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let (x, y) = (luminance(a), luminance(b));
    let k = ssim_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Everything `eval` reports; absent metrics are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<MeshDistanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal_error_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

impl MetricsReport {
    /// `metric,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{k},{v}\n"));
            }
        };
        let d = self.distances;
        row("p2s_precision", d.map(|d| d.p2s_precision));
        row("p2s_recall", d.map(|d| d.p2s_recall));
        row("chamfer_precision", d.map(|d| d.chamfer_precision));
        row("chamfer_recall", d.map(|d| d.chamfer_recall));
        row("normal_error_deg", self.normal_error_deg);
        row("psnr_db", self.psnr_db);
        row("ssim", self.ssim);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Writes JSON, or CSV when the path ends in `.csv`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = if path.extension().is_some_and(|e| e == "csv") {
            self.to_csv()
        } else {
            self.to_json()
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
