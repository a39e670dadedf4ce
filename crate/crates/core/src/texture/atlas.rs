use std::path::Path;

use rayon::prelude::*;

use super::{blend_samples, texel_to_uv, BlendWeightVolume, ViewImages};
use crate::error::{Error, Result};
use crate::geometry::{CameraView, ImageBuffer, TriangleMesh, Vec2, Vec3};
use crate::io::{write_obj, write_png};
use crate::spatial::{closest_point_on_triangle, TriangleIndex};
use crate::synth::{render_from_hits, trace_view, RenderOptions, ViewRender};

/// Empty texels between neighbouring charts.
pub const ATLAS_GUTTER: u32 = 2;
const PAD: u32 = ATLAS_GUTTER / 2;
const MIN_CHART: u32 = 1;

/// A baked texture: one chart per triangle of an unwelded copy of the mesh.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub image: ImageBuffer,
    /// Three vertices per source triangle, in triangle order.
    pub mesh: TriangleMesh,
    /// One UV per vertex of `mesh`.
    pub uvs: Vec<Vec2>,
    /// Texels per centimetre.
    pub texel_scale: f64,
    /// Chart texels no view observed.
    pub hole_texels: usize,
    /// Top-left texel of each triangle's chart, padding included.
    pub chart_origins: Vec<(u32, u32)>,
}

/// A triangle laid flat with its longest edge on the x axis.
struct Flat {
    /// Source corner order matching `pts`.
    order: [usize; 3],
    pts: [Vec2; 3],
}

fn flatten(corners: &[Vec3; 3]) -> Flat {
    let len = |i: usize| (corners[(i + 1) % 3] - corners[i]).norm();
    let i = (0..3).max_by(|&a, &b| len(a).total_cmp(&len(b)).then(b.cmp(&a))).unwrap();
    let order = [i, (i + 1) % 3, (i + 2) % 3];
    let [p0, p1, p2] = order.map(|k| corners[k]);
    let l = (p1 - p0).norm();
    if l <= 0.0 {
        return Flat {
            order,
            pts: [Vec2::zeros(); 3],
        };
    }
    let e = (p1 - p0) / l;
    let d = p2 - p0;
    let x = d.dot(&e);
    let y = (d - e * x).norm();
    Flat {
        order,
        pts: [Vec2::zeros(), Vec2::new(l, 0.0), Vec2::new(x, y)],
    }
}

fn chart_size(flat: &Flat, scale: f64) -> (u32, u32) {
    let w = ((flat.pts[1].x * scale).ceil() as u32).max(MIN_CHART);
    let h = ((flat.pts[2].y * scale).ceil() as u32).max(MIN_CHART);
    (w + 2 * PAD, h + 2 * PAD)
}

/// Greedy shelf packing, tallest charts first. Returns chart origins or
/// `None` when the atlas overflows.
fn pack(sizes: &[(u32, u32)], resolution: u32) -> Option<Vec<(u32, u32)>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.cmp(&sizes[a].1).then(a.cmp(&b)));
    let mut origins = vec![(0, 0); sizes.len()];
    let (mut x, mut y, mut shelf) = (0u32, 0u32, 0u32);
    for i in order {
        let (w, h) = sizes[i];
        if w > resolution {
            return None;
        }
        if x + w > resolution {
            y += shelf;
            x = 0;
            shelf = 0;
        }
        if y + h > resolution {
            return None;
        }
        origins[i] = (x, y);
        x += w;
        shelf = shelf.max(h);
    }
    Some(origins)
}

fn layout(flats: &[Flat], resolution: u32) -> Result<(f64, Vec<(u32, u32)>)> {
    let sizes = |s: f64| flats.iter().map(|f| chart_size(f, s)).collect::<Vec<_>>();
    if pack(&sizes(0.0), resolution).is_none() {
        let mut required = resolution.max(1).next_power_of_two();
        while pack(&sizes(0.0), required).is_none() {
            required *= 2;
        }
        return Err(Error::Packing { required });
    }
    let area: f64 = flats.iter().map(|f| f.pts[1].x * f.pts[2].y).sum();
    let mut hi = if area > 0.0 { resolution as f64 / area.sqrt() } else { 1.0 };
    while pack(&sizes(hi), resolution).is_some() {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if pack(&sizes(mid), resolution).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let origins = pack(&sizes(lo), resolution).expect("lower bound packs");
    Ok((lo, origins))
}

/// Barycentric weights (in flat corner order) of the point of the flat
/// triangle nearest to `p`.
fn clamped_bary(flat: &Flat, p: &Vec2) -> Vec3 {
    let lift = |v: &Vec2| Vec3::new(v.x, v.y, 0.0);
    let [a, b, c] = flat.pts.map(|v| lift(&v));
    if (b - a).cross(&(c - a)).norm() <= 1e-300 {
        return Vec3::new(1.0, 0.0, 0.0);
    }
    closest_point_on_triangle(&lift(p), &a, &b, &c).1
}

struct Chart {
    origin: (u32, u32),
    size: (u32, u32),
    texels: Vec<[f64; 3]>,
    holes: usize,
}

/// 3D surface point behind texel `(x, y)` of a chart (local coordinates,
/// padding included) and its source-order barycentrics.
fn texel_point(flat: &Flat, corners: &[Vec3; 3], scale: f64, x: u32, y: u32) -> (Vec3, Vec3) {
    let p = Vec2::new((x as f64 + 0.5 - PAD as f64) / scale.max(1e-300), (y as f64 + 0.5 - PAD as f64) / scale.max(1e-300));
    let b = clamped_bary(flat, &p);
    let mut bary = Vec3::zeros();
    for k in 0..3 {
        bary[flat.order[k]] = b[k];
    }
    (corners[0] * bary[0] + corners[1] * bary[1] + corners[2] * bary[2], bary)
}

/// Bakes the blended surface colour into a square atlas of per-triangle
/// charts. Every chart texel takes the colour of the triangle point its
/// centre maps to (clamped onto the triangle); the one-texel ring around
/// each chart copies its nearest chart texel.
pub fn bake_atlas(
    mesh: &TriangleMesh,
    weights: &BlendWeightVolume,
    views: &ViewImages,
    resolution: u32,
) -> Result<Atlas> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh("cannot bake an atlas for a mesh without triangles".into()));
    }
    if resolution < 8 {
        return Err(Error::Config(format!("atlas resolution {resolution} is too small")));
    }
    if weights.views() != views.len() {
        return Err(Error::Config("weight and image view counts differ".into()));
    }
    let corners: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
    let flats: Vec<Flat> = corners.iter().map(flatten).collect();
    let (scale, origins) = layout(&flats, resolution)?;
    let charts: Vec<Chart> = (0..flats.len())
        .into_par_iter()
        .map(|t| {
            let (w, h) = chart_size(&flats[t], scale);
            let mut texels = vec![[0.0; 3]; (w * h) as usize];
            let mut holes = 0;
            for y in PAD..h - PAD {
                for x in PAD..w - PAD {
                    let (p, _) = texel_point(&flats[t], &corners[t], scale, x, y);
                    let b = blend_samples(&weights.at(&p), &views.samples(&p));
                    holes += b.hole as usize;
                    texels[(y * w + x) as usize] = [b.color.x, b.color.y, b.color.z];
                }
            }
            for y in 0..h {
                for x in 0..w {
                    if x >= PAD && x < w - PAD && y >= PAD && y < h - PAD {
                        continue;
                    }
                    let sx = x.clamp(PAD, w - PAD - 1);
                    let sy = y.clamp(PAD, h - PAD - 1);
                    texels[(y * w + x) as usize] = texels[(sy * w + sx) as usize];
                }
            }
            Chart {
                origin: origins[t],
                size: (w, h),
                texels,
                holes,
            }
        })
        .collect();
    let mut image = ImageBuffer::filled(resolution, resolution, 3, 0.0);
    let mut hole_texels = 0;
    for chart in &charts {
        let (ox, oy) = chart.origin;
        for y in 0..chart.size.1 {
            for x in 0..chart.size.0 {
                let c = chart.texels[(y * chart.size.0 + x) as usize];
                for k in 0..3 {
                    image.set(ox + x, oy + y, k as u32, c[k]);
                }
            }
        }
        hole_texels += chart.holes;
    }
    let mut vertices = Vec::with_capacity(3 * flats.len());
    let mut uvs = Vec::with_capacity(3 * flats.len());
    let mut colors = mesh.colors.as_ref().map(|_| Vec::with_capacity(3 * flats.len()));
    for (t, flat) in flats.iter().enumerate() {
        let (ox, oy) = origins[t];
        for k in 0..3 {
            let pos = flat.order.iter().position(|&o| o == k).unwrap();
            let p = flat.pts[pos] * scale + Vec2::new((ox + PAD) as f64, (oy + PAD) as f64);
            vertices.push(corners[t][k]);
            uvs.push(texel_to_uv(&p, resolution));
            if let (Some(out), Some(src)) = (colors.as_mut(), mesh.colors.as_ref()) {
                out.push(src[mesh.triangles[t][k] as usize]);
            }
        }
    }
    let triangles = (0..flats.len() as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    let mut out = TriangleMesh::new(vertices, triangles);
    if let Some(c) = colors {
        out = out.with_colors(c);
    }
    Ok(Atlas {
        image,
        mesh: out,
        uvs,
        texel_scale: scale,
        hole_texels,
        chart_origins: origins,
    })
}

impl Atlas {
    /// Bilinear atlas colour at a UV coordinate.
    pub fn sample(&self, uv: &Vec2) -> Vec3 {
        let r = self.image.width() as f64;
        let px = Vec2::new(
            (uv.x * r - 0.5).clamp(0.0, r - 1.0),
            ((1.0 - uv.y) * r - 0.5).clamp(0.0, r - 1.0),
        );
        let mut c = [0.0; 3];
        self.image.bilinear_sample_into(&px, &mut c).expect("clamped into the atlas");
        Vec3::from(c)
    }

    /// The 3D point and source barycentrics behind atlas texel `(x, y)` of
    /// triangle `t`'s chart, or `None` if the texel is not inside that chart.
    pub fn texel_surface_point(&self, t: usize, x: u32, y: u32) -> Option<(Vec3, Vec3)> {
        let corners = self.mesh.corners(t);
        let flat = flatten(&corners);
        let (w, h) = chart_size(&flat, self.texel_scale);
        let (ox, oy) = *self.chart_origins.get(t)?;
        let (lx, ly) = (x.checked_sub(ox)?, y.checked_sub(oy)?);
        if lx < PAD || ly < PAD || lx >= w - PAD || ly >= h - PAD {
            return None;
        }
        Some(texel_point(&flat, &corners, self.texel_scale, lx, ly))
    }
}

/// Renders the atlas-textured mesh from `camera`.
pub fn render_textured(atlas: &Atlas, camera: &CameraView, options: &RenderOptions) -> ViewRender {
    let index = TriangleIndex::new(&atlas.mesh);
    let normals = atlas.mesh.normals_or_computed();
    let hits = trace_view(&atlas.mesh, &index, &normals, camera);
    render_from_hits(camera, &hits, options, |hit| {
        let t = hit.triangle as usize;
        let uv = atlas.uvs[3 * t] * hit.bary[0] + atlas.uvs[3 * t + 1] * hit.bary[1] + atlas.uvs[3 * t + 2] * hit.bary[2];
        atlas.sample(&uv)
    })
}

/// Writes `<stem>.obj`, `<stem>.mtl` and `<stem>.png` into `dir`.
pub fn write_textured_obj(dir: impl AsRef<Path>, stem: &str, atlas: &Atlas) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(dir.join(format!("{stem}.png")), &atlas.image)?;
    let mtl = dir.join(format!("{stem}.mtl"));
    let text = format!("newmtl {stem}\nKa 0 0 0\nKd 1 1 1\nKs 0 0 0\nmap_Kd {stem}.png\n");
    std::fs::write(&mtl, text).map_err(|e| Error::io(&mtl, e))?;
    let mut mesh = atlas.mesh.clone();
    mesh.colors = None;
    mesh.normals = None;
    write_obj(dir.join(format!("{stem}.obj")), &mesh, Some((&atlas.uvs, stem)))
}
