use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ActiveSet;
use crate::error::{Error, Result};
use crate::geometry::{CameraView, GridIndex, ImageBuffer, VolumeSpec};

/// Camera-space depth window `[center + near, center + far]` (cm) around the
/// volume centre's depth, used to bound the silhouette cone of a single view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBand {
    pub near: f64,
    pub far: f64,
}

/// ±50 cm about the volume centre.
pub const DEFAULT_SINGLE_VIEW_BAND: DepthBand = DepthBand {
    near: -50.0,
    far: 50.0,
};

/// Keeps grid vertices whose projection lands on the silhouette in every view.
///
/// Mask lookup is nearest-texel with a strict `> 0.5` test; projections that
/// are behind the camera or out of frame count as outside. With a single view
/// the silhouette cone is additionally cut to `single_view_depth_band`.
pub fn carve_visual_hull(
    spec: &VolumeSpec,
    cameras: &[CameraView],
    masks: &[ImageBuffer],
    single_view_depth_band: Option<DepthBand>,
) -> Result<ActiveSet> {
    if cameras.is_empty() {
        return Err(Error::Config("visual hull needs at least one view".into()));
    }
    if cameras.len() != masks.len() {
        return Err(Error::Config(format!(
            "{} cameras but {} masks",
            cameras.len(),
            masks.len()
        )));
    }
    for (i, (cam, mask)) in cameras.iter().zip(masks).enumerate() {
        if mask.channels() != 1 {
            return Err(Error::Config(format!("mask {i} must have one channel")));
        }
        if mask.width() != cam.width || mask.height() != cam.height {
            return Err(Error::Config(format!(
                "mask {i} is {}x{} but camera expects {}x{}",
                mask.width(),
                mask.height(),
                cam.width,
                cam.height
            )));
        }
    }
    let band = if cameras.len() == 1 {
        let band = single_view_depth_band.ok_or_else(|| {
            Error::Config("single-view carving requires a depth band".into())
        })?;
        if !(band.near < band.far) {
            return Err(Error::Config("depth band must satisfy near < far".into()));
        }
        let center_depth = cameras[0].to_camera(&spec.center()).z;
        Some((center_depth + band.near, center_depth + band.far))
    } else {
        None
    };

    let r = spec.resolution;
    let h = spec.spacing();
    let columns: Vec<Vec<GridIndex>> = (0..r)
        .into_par_iter()
        .map(|w| {
            let mut out = Vec::new();
            for hh in 0..r {
                // camera-space coordinates are affine in d: start + d * step
                let start = spec.position([w, hh, 0]);
                let lines: Vec<_> = cameras
                    .iter()
                    .map(|c| (c.to_camera(&start), c.rotation.column(2) * h))
                    .collect();
                'site: for d in 0..r {
                    for (v, (cam, mask)) in cameras.iter().zip(masks).enumerate() {
                        let pc = lines[v].0 + lines[v].1 * d as f64;
                        if !(pc.z > 0.0) {
                            continue 'site;
                        }
                        if let Some((lo, hi)) = band {
                            if pc.z < lo || pc.z > hi {
                                continue 'site;
                            }
                        }
                        let pixel = Vector2::new(
                            cam.focal.x * pc.x / pc.z + cam.principal.x,
                            cam.focal.y * pc.y / pc.z + cam.principal.y,
                        );
                        if !cam.in_bounds(&pixel) {
                            continue 'site;
                        }
                        match mask.nearest_texel(&pixel) {
                            Some((x, y)) if mask.get(x, y, 0) > 0.5 => {}
                            _ => continue 'site,
                        }
                    }
                    out.push([w, hh, d]);
                }
            }
            out
        })
        .collect();
    let sites: Vec<GridIndex> = columns.into_iter().flatten().collect();
    if sites.is_empty() {
        return Err(Error::EmptyHull);
    }
    Ok(ActiveSet::from_sorted_unchecked(*spec, sites))
}
