//! File formats: meshes (OBJ, PLY), images (PNG, PFM), camera JSON, the SVF1
//! sparse-field container and the capture directory layout.

mod mesh;

pub use mesh::{read_mesh, read_obj, read_ply, write_mesh, write_obj, write_ply};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, Vec3, VolumeSpec};
use crate::sparsevol::{ActiveSet, SparseField};
use crate::synth::ViewRender;

/// Reads an 8-bit PNG as 1 (grey) or 3 (RGB) channels scaled to `[0, 1]`.
/// Alpha is dropped; grey+alpha becomes grey.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = mesh::read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width(), img.height());
    let (channels, data): (u32, Vec<u8>) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    ImageBuffer::new(w, h, channels, data.into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Writes a 1- or 3-channel image as 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Format(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    image::save_buffer_with_format(path, &bytes, img.width(), img.height(), color, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            e => Error::Format(format!("{}: {e}", path.display())),
        })
}

/// Portable float map: `Pf` (1 channel) or `PF` (3 channels), little-endian
/// (negative scale), rows stored bottom to top.
pub fn write_pfm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Format(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = (img.width() * img.channels()) as usize;
    for y in (0..img.height() as usize).rev() {
        for v in &img.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = mesh::read_bytes(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    // three whitespace-terminated header tokens after the tag line
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?.to_string());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing PF/Pf tag")),
    };
    let w: u32 = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: u32 = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let row = (w * channels) as usize;
    let need = row * h as usize * 4;
    if bytes.len() < pos + need {
        return Err(bad("truncated data"));
    }
    let mut data = vec![0.0; row * h as usize];
    for y in 0..h as usize {
        let src = pos + (h as usize - 1 - y) * row * 4;
        for i in 0..row {
            let b: [u8; 4] = bytes[src + 4 * i..src + 4 * i + 4].try_into().unwrap();
            data[y * row + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        }
    }
    ImageBuffer::new(w, h, channels, data)
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_cameras(path: impl AsRef<Path>, cameras: &[CameraView]) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cameras).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const SVF_MAGIC: &[u8; 4] = b"SVF1";

/// SVF1 container: magic, `R` (u32), origin (3 x f32), edge (f32), `C` (u32),
/// `N` (u32), then `N` sites as 3 x u32, then the `N x C` f32 value block.
/// All little-endian, canonical site order. The fill value is not stored.
pub fn write_field(path: impl AsRef<Path>, field: &SparseField) -> Result<()> {
    let path = path.as_ref();
    let spec = field.active().spec();
    let mut out = Vec::with_capacity(28 + field.len() * (12 + 4 * field.channels()));
    out.extend_from_slice(SVF_MAGIC);
    out.extend_from_slice(&spec.resolution.to_le_bytes());
    for k in 0..3 {
        out.extend_from_slice(&(spec.origin[k] as f32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.edge_length as f32).to_le_bytes());
    out.extend_from_slice(&(field.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(field.len() as u32).to_le_bytes());
    for s in field.active().sites() {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in field.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads an SVF1 file; `fill` supplies the declared off-set value.
pub fn read_field(path: impl AsRef<Path>, fill: f64) -> Result<SparseField> {
    let path = path.as_ref();
    let bytes = mesh::read_bytes(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 32 || &bytes[..4] != SVF_MAGIC {
        return Err(bad("not an SVF1 file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let r = u32_at(4);
    let origin = Vec3::new(f32_at(8), f32_at(12), f32_at(16));
    let edge = f32_at(20);
    let c = u32_at(24) as usize;
    let n = u32_at(28) as usize;
    let need = 32 + n * 12 + n * c * 4;
    if bytes.len() != need {
        return Err(bad(&format!("expected {need} bytes, found {}", bytes.len())));
    }
    let spec = VolumeSpec::new(origin, edge, r)?;
    let sites = (0..n)
        .map(|i| {
            let o = 32 + i * 12;
            [u32_at(o), u32_at(o + 4), u32_at(o + 8)]
        })
        .collect();
    let active = ActiveSet::from_sites(spec, sites)?;
    if active.len() != n {
        return Err(bad("duplicate sites"));
    }
    let base = 32 + n * 12;
    let values = (0..n * c).map(|i| f32_at(base + 4 * i)).collect();
    SparseField::new(Arc::new(active), c, values, fill)
}

/// A calibrated multi-view capture on disk:
/// `cameras.json` plus `color_XXX.png`, `mask_XXX.png` and optionally
/// `normal_XXX.png` and `depth_XXX.pfm` per view.
#[derive(Debug, Clone)]
pub struct Capture {
    pub cameras: Vec<CameraView>,
    pub colors: Vec<ImageBuffer>,
    pub masks: Vec<ImageBuffer>,
    pub normals: Option<Vec<ImageBuffer>>,
    pub depths: Option<Vec<ImageBuffer>>,
}

fn view_file(dir: &Path, kind: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{kind}_{i:03}.{ext}"))
}

impl Capture {
    pub fn from_renders(cameras: Vec<CameraView>, renders: &[ViewRender]) -> Self {
        Self {
            cameras,
            colors: renders.iter().map(|r| r.color.clone()).collect(),
            masks: renders.iter().map(|r| r.mask.clone()).collect(),
            normals: Some(renders.iter().map(|r| r.normal.clone()).collect()),
            depths: Some(renders.iter().map(|r| r.depth.clone()).collect()),
        }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_cameras(dir.join("cameras.json"), &self.cameras)?;
        for i in 0..self.len() {
            write_png(view_file(dir, "color", i, "png"), &self.colors[i])?;
            write_png(view_file(dir, "mask", i, "png"), &self.masks[i])?;
            if let Some(n) = &self.normals {
                write_png(view_file(dir, "normal", i, "png"), &n[i])?;
            }
            if let Some(d) = &self.depths {
                write_pfm(view_file(dir, "depth", i, "pfm"), &d[i])?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cameras = read_cameras(dir.join("cameras.json"))?;
        if cameras.is_empty() {
            return Err(Error::Config(format!("{}: capture has no cameras", dir.display())));
        }
        let mut colors = Vec::new();
        let mut masks = Vec::new();
        for (i, cam) in cameras.iter().enumerate() {
            let c = read_png(view_file(dir, "color", i, "png"))?;
            let m = read_png(view_file(dir, "mask", i, "png"))?;
            if m.channels() != 1 {
                return Err(Error::Config(format!("mask {i} must be single-channel")));
            }
            for img in [&c, &m] {
                if img.width() != cam.width || img.height() != cam.height {
                    return Err(Error::Config(format!("view {i}: image size does not match camera")));
                }
            }
            // binarise
            let m = ImageBuffer::from_fn(m.width(), m.height(), 1, |x, y, _| {
                if m.get(x, y, 0) > 0.5 {
                    1.0
                } else {
                    0.0
                }
            });
            colors.push(c);
            masks.push(m);
        }
        let optional = |kind: &str, ext: &str, read: fn(&Path) -> Result<ImageBuffer>| -> Result<Option<Vec<ImageBuffer>>> {
            if !view_file(dir, kind, 0, ext).exists() {
                return Ok(None);
            }
            (0..cameras.len())
                .map(|i| read(&view_file(dir, kind, i, ext)))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let normals = optional("normal", "png", |p| read_png(p))?;
        let depths = optional("depth", "pfm", |p| read_pfm(p))?;
        Ok(Self {
            cameras,
            colors,
            masks,
            normals,
            depths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{camera_ring, render_views, shapes, Intrinsics, RenderOptions};

    #[test]
    fn pfm_roundtrip_is_row_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 3, 3, |x, y, c| (x * 100 + y * 10 + c) as f64 + 0.25);
        let p = dir.path().join("a.pfm");
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"PF\n5 3\n-1.0\n"));
        // first stored row is the bottom one
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, img.get(0, 2, 0) as f32);
    }

    #[test]
    fn png_roundtrip_quantises_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(4, 4, 3, |x, y, c| (x + y + c) as f64 / 10.0);
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn svf_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = VolumeSpec::new(Vec3::new(-1.0, 2.0, 0.5), 8.0, 16).unwrap();
        let set = ActiveSet::from_sites(spec, vec![[0, 0, 1], [3, 2, 1], [15, 15, 15]]).unwrap();
        let field = SparseField::new(Arc::new(set), 2, vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0], 5.0).unwrap();
        let p = dir.path().join("f.svf");
        write_field(&p, &field).unwrap();
        let back = read_field(&p, 5.0).unwrap();
        assert_eq!(back, field);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_field(&p, 5.0), Err(Error::Format(_))));
    }

    #[test]
    fn capture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = shapes::icosphere(20.0, 2);
        let cams = camera_ring(2, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(24, 1.0)).unwrap();
        let renders = render_views(&mesh, &cams, &RenderOptions::default());
        let cap = Capture::from_renders(cams.clone(), &renders);
        cap.save(dir.path()).unwrap();
        assert!(dir.path().join("depth_001.pfm").exists());
        let back = Capture::load(dir.path()).unwrap();
        assert_eq!(back.cameras, cams);
        assert_eq!(back.masks, cap.masks);
        let d = back.depths.unwrap();
        for (a, b) in d[0].data().iter().zip(renders[0].depth.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
