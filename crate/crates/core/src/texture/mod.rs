//! Multi-view texture blending: per-view blend weights on a thin band
//! around the surface, colour evaluation and atlas baking.

mod atlas;
mod attention;
mod model;
#[cfg(test)]
mod tests;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, TriangleMesh, Vec2, Vec3};
use crate::spatial::TriangleIndex;
use crate::sparsevol::{trilinear_sample, ActiveSet, SparseField};
use crate::synth::{trace_view, BACKGROUND_DEPTH};

pub use atlas::{bake_atlas, render_textured, write_textured_obj, Atlas, ATLAS_GUTTER};
pub use attention::{attention_reweight, AttentionBlock, DEFAULT_KEY_DIM};
pub use model::{
    load_texture_checkpoint, load_texture_checkpoint_bytes, regress_blend_weights, save_texture_checkpoint, texture_checkpoint_bytes,
    train_texture, TextureInputs, TextureModel, TextureNetConfig, TextureTrainReport,
};

/// PSDF values are clamped to this magnitude.
pub const PSDF_TRUNCATION: f64 = 2.0;
/// Colour given to surface points no view observes.
pub const HOLE_COLOR: [f64; 3] = [1.0, 0.0, 1.0];
/// Fill value of per-view logit fields.
pub const LOGIT_FILL: f64 = -1e9;

/// Per-view truncated projective signed distance, one channel per view.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdfVolume {
    field: SparseField,
}

impl PsdfVolume {
    pub fn field(&self) -> &SparseField {
        &self.field
    }

    pub fn views(&self) -> usize {
        self.field.channels()
    }

    /// Channel `view` as its own single-channel field.
    pub fn view(&self, view: usize) -> SparseField {
        self.field.slice_channels(view, 1).expect("view index in range")
    }
}

/// Camera-space depth renders of `mesh`, one per camera; background pixels
/// hold the background sentinel.
pub fn depth_renders(mesh: &TriangleMesh, cameras: &[CameraView]) -> Vec<ImageBuffer> {
    let index = TriangleIndex::new(mesh);
    let normals = mesh.normals_or_computed();
    cameras
        .iter()
        .map(|cam| {
            let hits = trace_view(mesh, &index, &normals, cam);
            let data = hits.iter().map(|h| h.map_or(BACKGROUND_DEPTH, |h| h.depth)).collect();
            ImageBuffer::new(cam.width, cam.height, 1, data).expect("sized from camera")
        })
        .collect()
}

/// Per site and view, `depth(pixel) - z_cam(site)` clamped to
/// `±PSDF_TRUNCATION`, using the nearest depth texel. Projections outside
/// the image or onto background read `+PSDF_TRUNCATION`.
pub fn compute_psdf(band: &Arc<ActiveSet>, cameras: &[CameraView], depths: &[ImageBuffer]) -> Result<PsdfVolume> {
    if cameras.is_empty() || depths.len() != cameras.len() {
        return Err(Error::Config(format!(
            "PSDF needs one depth render per camera ({} cameras, {} renders)",
            cameras.len(),
            depths.len()
        )));
    }
    if depths.iter().any(|d| d.channels() != 1) {
        return Err(Error::Config("depth renders must have one channel".into()));
    }
    let cams: Vec<CameraView> = cameras
        .iter()
        .zip(depths)
        .map(|(c, d)| c.rescaled(d.width(), d.height()))
        .collect();
    let v = cams.len();
    let field = SparseField::from_fn(band.clone(), v, PSDF_TRUNCATION, |_, p, row| {
        for (i, (cam, depth)) in cams.iter().zip(depths).enumerate() {
            row[i] = PSDF_TRUNCATION;
            let proj = cam.project(p);
            if !proj.valid {
                continue;
            }
            if let Some((x, y)) = depth.nearest_texel(&proj.pixel) {
                let d = depth.get(x, y, 0);
                if d.is_finite() && d < BACKGROUND_DEPTH * 0.5 {
                    row[i] = (d - proj.depth).clamp(-PSDF_TRUNCATION, PSDF_TRUNCATION);
                }
            }
        }
    });
    Ok(PsdfVolume { field })
}

/// Softmax-normalised blend weights, one channel per view.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeightVolume {
    field: SparseField,
}

impl BlendWeightVolume {
    /// Wraps a field of per-view weights. Every row must be non-negative
    /// and sum to one within 1e-6.
    pub fn new(field: SparseField) -> Result<Self> {
        let v = field.channels();
        if v == 0 {
            return Err(Error::Config("blend weights need at least one view".into()));
        }
        for s in 0..field.len() {
            let row = field.row(s);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("blend weights at site {s} do not form a distribution")));
            }
        }
        Ok(Self {
            field: field.with_fill(1.0 / v as f64),
        })
    }

    /// Equal weight for every view.
    pub fn uniform(band: Arc<ActiveSet>, views: usize) -> Self {
        let w = 1.0 / views as f64;
        Self {
            field: SparseField::constant(band, views, w, w),
        }
    }

    /// Softmax across per-view single-channel logit fields.
    pub fn from_logits(logits: &[SparseField]) -> Result<Self> {
        let first = logits.first().ok_or_else(|| Error::Config("no logit fields".into()))?;
        if logits.iter().any(|l| l.channels() != 1 || l.active().as_ref() != first.active().as_ref()) {
            return Err(Error::Config("logit fields must be single-channel on one active set".into()));
        }
        let v = logits.len();
        let mut values = Vec::with_capacity(first.len() * v);
        let mut row = vec![0.0; v];
        for s in 0..first.len() {
            for (r, l) in row.iter_mut().zip(logits) {
                *r = l.values()[s];
            }
            attention::softmax_in_place(&mut row);
            values.extend_from_slice(&row);
        }
        let field = SparseField::new(first.active().clone(), v, values, 1.0 / v as f64)?;
        Ok(Self { field })
    }

    pub fn field(&self) -> &SparseField {
        &self.field
    }

    pub fn into_field(self) -> SparseField {
        self.field
    }

    pub fn views(&self) -> usize {
        self.field.channels()
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        self.field.active()
    }

    /// Trilinear weights at `point` (uniform outside the cube).
    pub fn at(&self, point: &Vec3) -> Vec<f64> {
        trilinear_sample(&self.field, point).unwrap_or_else(|_| vec![1.0 / self.views() as f64; self.views()])
    }
}

/// Blend result at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendSample {
    pub color: Vec3,
    /// No view observed the point; `color` is [`HOLE_COLOR`].
    pub hole: bool,
}

/// Source images with cameras rescaled to their pixel grids.
pub struct ViewImages<'a> {
    cameras: Vec<CameraView>,
    images: &'a [ImageBuffer],
}

impl<'a> ViewImages<'a> {
    pub fn new(cameras: &[CameraView], images: &'a [ImageBuffer]) -> Result<Self> {
        if cameras.is_empty() || cameras.len() != images.len() {
            return Err(Error::Config(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        if images.iter().any(|i| i.channels() != 3) {
            return Err(Error::Config("blend images must be RGB".into()));
        }
        let cameras = cameras
            .iter()
            .zip(images)
            .map(|(c, i)| c.rescaled(i.width(), i.height()))
            .collect();
        Ok(Self { cameras, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Bilinear colour of `point` in each view, `None` where the projection
    /// is invalid.
    pub fn samples(&self, point: &Vec3) -> Vec<Option<Vec3>> {
        self.cameras
            .iter()
            .zip(self.images)
            .map(|(cam, img)| {
                let proj = cam.project(point);
                if !proj.valid {
                    return None;
                }
                let mut c = [0.0; 3];
                img.bilinear_sample_into(&proj.pixel, &mut c).ok()?;
                Some(Vec3::from(c))
            })
            .collect()
    }
}

/// Weighted mean over the views with a valid sample, weights renormalised
/// over those views.
pub(crate) fn blend_samples(weights: &[f64], samples: &[Option<Vec3>]) -> BlendSample {
    let mut sum = Vec3::zeros();
    let mut wsum = 0.0;
    for (w, s) in weights.iter().zip(samples) {
        if let Some(c) = s {
            sum += c * *w;
            wsum += w;
        }
    }
    if wsum > 0.0 {
        BlendSample {
            color: sum / wsum,
            hole: false,
        }
    } else {
        BlendSample {
            color: Vec3::from(HOLE_COLOR),
            hole: true,
        }
    }
}

/// Blended colour at `point`: weights sampled trilinearly from `weights`,
/// each view's image sampled bilinearly at the projection.
pub fn blend_color(point: &Vec3, weights: &BlendWeightVolume, views: &ViewImages) -> Result<BlendSample> {
    if weights.views() != views.len() {
        return Err(Error::Config(format!(
            "weight volume has {} views, {} images given",
            weights.views(),
            views.len()
        )));
    }
    Ok(blend_samples(&weights.at(point), &views.samples(point)))
}

/// Colour of the nearest surface point of a coloured mesh at every site.
pub fn gt_color_volume(mesh: &TriangleMesh, band: &Arc<ActiveSet>) -> Result<SparseField> {
    if mesh.colors.is_none() {
        return Err(Error::Config("ground-truth mesh has no vertex colours".into()));
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh("ground-truth mesh has no triangles".into()));
    }
    let index = TriangleIndex::new(mesh);
    let spec = *band.spec();
    let values: Vec<f64> = band
        .sites()
        .par_iter()
        .flat_map_iter(|&s| {
            let n = index.nearest(&spec.position(s), f64::INFINITY).expect("non-empty mesh");
            let c = mesh.color_at(n.triangle as usize, &n.bary).expect("colours checked");
            [c.x, c.y, c.z]
        })
        .collect();
    SparseField::new(band.clone(), 3, values, 0.0)
}

/// Per-site, per-view colour samples at the site positions.
pub(crate) fn site_samples(band: &ActiveSet, views: &ViewImages) -> Vec<Vec<Option<Vec3>>> {
    let spec = *band.spec();
    band.sites().par_iter().map(|&s| views.samples(&spec.position(s))).collect()
}

fn check_loss_inputs(weights: &BlendWeightVolume, gt: &SparseField, views: &ViewImages) -> Result<()> {
    if weights.views() != views.len() {
        return Err(Error::Config("weight and image view counts differ".into()));
    }
    if gt.channels() != 3 || gt.active().as_ref() != weights.active().as_ref() {
        return Err(Error::Config("ground-truth colours must be RGB on the weight band".into()));
    }
    Ok(())
}

/// Summed L1 colour error over the band sites, holes excluded.
pub fn color_loss(weights: &BlendWeightVolume, views: &ViewImages, gt: &SparseField) -> Result<f64> {
    check_loss_inputs(weights, gt, views)?;
    let samples = site_samples(weights.active(), views);
    Ok(loss_from_samples(weights.field(), &samples, gt).0)
}

/// Loss and its gradient with respect to the per-view weights of each site.
pub(crate) fn loss_from_samples(
    weights: &SparseField,
    samples: &[Vec<Option<Vec3>>],
    gt: &SparseField,
) -> (f64, Vec<f64>) {
    let v = weights.channels();
    let mut grad = vec![0.0; weights.len() * v];
    let mut loss = 0.0;
    for (s, samp) in samples.iter().enumerate() {
        let w = weights.row(s);
        let b = blend_samples(w, samp);
        if b.hole {
            continue;
        }
        let g = gt.row(s);
        let mut sign = Vec3::zeros();
        for c in 0..3 {
            let d = b.color[c] - g[c];
            loss += d.abs();
            sign[c] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        let wsum: f64 = w.iter().zip(samp).filter(|(_, s)| s.is_some()).map(|(w, _)| w).sum();
        for (j, sj) in samp.iter().enumerate() {
            if let Some(cj) = sj {
                grad[s * v + j] = sign.dot(&(cj - b.color)) / wsum;
            }
        }
    }
    (loss, grad)
}

/// Maps a texel coordinate to OBJ `vt` space.
pub(crate) fn texel_to_uv(p: &Vec2, resolution: u32) -> Vec2 {
    Vec2::new(p.x / resolution as f64, 1.0 - p.y / resolution as f64)
}
