//! Per-view 2D feature maps and their back-projection into sparse feature
//! volumes.

mod extractor;

pub use extractor::{Conv2dLayer, Conv2dNet, ExtractorConfig, FeatureExtractor};

use std::sync::Arc;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, Vec3};
use crate::sparsevol::{ActiveSet, SparseField};

/// Nominal feature-map side length.
pub const FEATURE_MAP_SIZE: u32 = 256;
/// Channels of the shape (image and normal) feature maps.
pub const SHAPE_CHANNELS: usize = 128;
/// Channels of the texture feature maps.
pub const TEXTURE_CHANNELS: usize = 32;

/// Blur scales (pixels) cycled through the channels after RGB and Sobel.
pub const BLUR_SIGMAS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedOptions {
    pub channels: usize,
    pub size: u32,
}

impl Default for HandcraftedOptions {
    fn default() -> Self {
        Self {
            channels: SHAPE_CHANNELS,
            size: FEATURE_MAP_SIZE,
        }
    }
}

/// Deterministic stand-in for a learned image encoder.
///
/// Channel layout: 0..3 RGB; 3..9 Sobel `(d/dx, d/dy)` for R, G and B; the
/// rest Gaussian-blurred luminance at [`BLUR_SIGMAS`] in turn. Computed at
/// the input resolution with clamped borders, then resampled to `size`.
/// Grey images are treated as RGB with equal channels.
pub fn handcrafted_features(image: &ImageBuffer, channels: usize, size: u32) -> Result<ImageBuffer> {
    if channels < 9 {
        return Err(Error::Config(format!("handcrafted features need at least 9 channels, got {channels}")));
    }
    let (w, h) = (image.width(), image.height());
    let rgb = |x: u32, y: u32, c: u32| image.get(x, y, if image.channels() >= 3 { c } else { 0 });
    let lum = ImageBuffer::from_fn(w, h, 1, |x, y, _| 0.299 * rgb(x, y, 0) + 0.587 * rgb(x, y, 1) + 0.114 * rgb(x, y, 2));
    let blurred: Vec<ImageBuffer> = BLUR_SIGMAS
        .iter()
        .take((channels - 9).min(BLUR_SIGMAS.len()))
        .map(|&s| gaussian_blur(&lum, s))
        .collect();
    let clamp_get = |x: i64, y: i64, c: u32| {
        rgb(x.clamp(0, w as i64 - 1) as u32, y.clamp(0, h as i64 - 1) as u32, c)
    };
    let full = ImageBuffer::from_fn(w, h, channels as u32, |x, y, ch| {
        let (xi, yi) = (x as i64, y as i64);
        match ch {
            0..=2 => rgb(x, y, ch),
            3..=8 => {
                let c = (ch - 3) / 2;
                let g = |dx: i64, dy: i64| clamp_get(xi + dx, yi + dy, c);
                if (ch - 3) % 2 == 0 {
                    (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1))
                } else {
                    (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1))
                }
            }
            _ => blurred[(ch as usize - 9) % blurred.len()].get(x, y, 0),
        }
    });
    Ok(full.resample(size, size))
}

/// Separable Gaussian blur truncated at 3 sigma, clamped borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h, c) = (img.width() as i64, img.height() as i64, img.channels());
    let pass = |src: &ImageBuffer, horizontal: bool| {
        ImageBuffer::from_fn(w as u32, h as u32, c, |x, y, ch| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, wgt)| {
                    let o = k as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + o).clamp(0, w - 1), y as i64)
                    } else {
                        (x as i64, (y as i64 + o).clamp(0, h - 1))
                    };
                    wgt * src.get(sx as u32, sy as u32, ch)
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// Maps an image-space pixel of `camera` onto a feature map, returning
/// `None` when the point is not validly projected or falls off the map.
fn map_pixel(camera: &CameraView, map: &ImageBuffer, point: &Vec3) -> Option<Vector2<f64>> {
    let proj = camera.project(point);
    if !proj.valid {
        return None;
    }
    let sx = map.width() as f64 / camera.width as f64;
    let sy = map.height() as f64 / camera.height as f64;
    let p = Vector2::new(proj.pixel.x * sx, proj.pixel.y * sy);
    let inside = p.x >= 0.0 && p.y >= 0.0 && p.x <= (map.width() - 1) as f64 && p.y <= (map.height() - 1) as f64;
    inside.then_some(p)
}

/// Single-view back-projection: the sampled feature at each site plus a flag
/// telling whether the view saw it. Unseen sites hold zeros.
pub fn sample_view(active: &Arc<ActiveSet>, camera: &CameraView, map: &ImageBuffer) -> (SparseField, Vec<bool>) {
    let c = map.channels() as usize;
    let field = SparseField::from_fn(active.clone(), c, 0.0, |_, p, row| {
        if let Some(px) = map_pixel(camera, map, p) {
            map.bilinear_sample_into(&px, row).expect("bounds checked");
        }
    });
    let spec = *active.spec();
    let seen = active
        .sites()
        .iter()
        .map(|&s| map_pixel(camera, map, &spec.position(s)).is_some())
        .collect();
    (field, seen)
}

/// A back-projected feature volume with the number of sites no view saw.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub field: SparseField,
    pub unseen_sites: usize,
}

/// Per site, the mean over views that validly see it of the bilinearly
/// sampled feature. An image pixel `(u, v)` of a camera with width `S`
/// addresses map pixel `(u, v) * (map_width / S)`. Unseen sites get zeros.
pub fn build_feature_volume(
    active: &Arc<ActiveSet>,
    cameras: &[CameraView],
    maps: &[ImageBuffer],
) -> Result<FeatureVolume> {
    if cameras.is_empty() {
        return Err(Error::Config("feature volume needs at least one view".into()));
    }
    if cameras.len() != maps.len() {
        return Err(Error::Config(format!("{} cameras but {} feature maps", cameras.len(), maps.len())));
    }
    let c = maps[0].channels() as usize;
    if maps.iter().any(|m| m.channels() as usize != c) {
        return Err(Error::Config("feature maps disagree on channel count".into()));
    }
    let field = SparseField::from_fn(active.clone(), c, 0.0, |_, p, row| {
        let mut tmp = vec![0.0; c];
        let mut n = 0usize;
        for (cam, map) in cameras.iter().zip(maps) {
            if let Some(px) = map_pixel(cam, map, p) {
                map.bilinear_sample_into(&px, &mut tmp).expect("bounds checked");
                for (o, t) in row.iter_mut().zip(&tmp) {
                    *o += t;
                }
                n += 1;
            }
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    });
    let spec = *active.spec();
    let unseen_sites = active
        .sites()
        .iter()
        .filter(|&&s| {
            let p = spec.position(s);
            cameras.iter().zip(maps).all(|(cam, map)| map_pixel(cam, map, &p).is_none())
        })
        .count();
    if unseen_sites > 0 {
        log::debug!("{unseen_sites} sites are not seen by any view");
    }
    Ok(FeatureVolume { field, unseen_sites })
}
