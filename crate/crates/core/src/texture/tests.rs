use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::TextureNetConfig;
use super::*;
use crate::geometry::{ImageBuffer, TriangleMesh, Vec3, VolumeSpec};
use crate::spatial::nearest_exhaustive;
use crate::sparsevol::ActiveSet;
use crate::synth::{camera_ring, render_views, shapes, Intrinsics, RenderOptions, Shading};

fn random_image(w: u32, h: u32, rng: &mut ChaCha8Rng) -> ImageBuffer {
    ImageBuffer::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn rand_field(band: &Arc<ActiveSet>, channels: usize, fill: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> SparseField {
    let values = (0..band.len() * channels).map(|_| rng.gen_range(lo..hi)).collect();
    SparseField::new(band.clone(), channels, values, fill).unwrap()
}

fn sphere_band(res: u32) -> Arc<ActiveSet> {
    let spec = VolumeSpec::centered(Vec3::zeros(), 48.0, res).unwrap();
    ActiveSet::dense(spec).filter(|_, s| (spec.position(s).norm() - 20.0).abs() < 2.0).into_shared()
}

#[test]
fn psdf_signs_and_clamps() {
    let mesh = shapes::icosphere(20.0, 4);
    let cams = camera_ring(2, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(96, 1.5)).unwrap();
    let depths = depth_renders(&mesh, &cams);
    let front = cams[0].center().normalize() * 20.0;
    let spec = VolumeSpec::centered(Vec3::zeros(), 64.0, 32).unwrap();
    let set = ActiveSet::from_sites(spec, vec![[0, 0, 0]]).unwrap().into_shared();
    let psdf = compute_psdf(&set, &cams, &depths).unwrap();
    assert!(psdf.field().values().iter().all(|v| v.abs() <= PSDF_TRUNCATION));
    // a point on the near side of view 0 is hidden by 40 cm of sphere from view 1
    let probe = |p: Vec3| {
        let cam0 = &cams[0];
        let cam1 = &cams[1];
        let mut out = [0.0; 2];
        for (i, (cam, d)) in [cam0, cam1].iter().zip(&depths).enumerate() {
            let proj = cam.project(&p);
            let (x, y) = d.nearest_texel(&proj.pixel).unwrap();
            out[i] = (d.get(x, y, 0) - proj.depth).clamp(-PSDF_TRUNCATION, PSDF_TRUNCATION);
        }
        out
    };
    let [near, far] = probe(front);
    assert!(near.abs() < 0.2, "on-surface psdf {near}");
    assert_eq!(far, -PSDF_TRUNCATION);
    assert!(matches!(compute_psdf(&set, &cams, &depths[..1]), Err(Error::Config(_))));
}

#[test]
fn psdf_matches_ray_cast_oracle() {
    let mesh = shapes::icosphere(20.0, 4);
    let cams = camera_ring(3, 100.0, 10.0, Vec3::zeros(), &Intrinsics::square(96, 1.5)).unwrap();
    let depths = depth_renders(&mesh, &cams);
    let band = sphere_band(24);
    let psdf = compute_psdf(&band, &cams, &depths).unwrap();
    let index = TriangleIndex::new(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = *band.spec();
    for _ in 0..200 {
        let r = rng.gen_range(0..band.len());
        let p = spec.position(band.site(r));
        for (v, (cam, d)) in cams.iter().zip(&depths).enumerate() {
            let proj = cam.project(&p);
            let (_, dir) = cam.pixel_ray(&proj.pixel);
            let oracle = match index.raycast(&cam.center(), &dir, 1e-6) {
                Some(hit) => (dir * hit.t).dot(&cam.forward()) - proj.depth,
                None => PSDF_TRUNCATION,
            }
            .clamp(-PSDF_TRUNCATION, PSDF_TRUNCATION);
            let (x, y) = d.nearest_texel(&proj.pixel).unwrap();
            let centre = d.get(x, y, 0);
            let mut quantum: f64 = 0.0;
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < d.width() as i64 && ny < d.height() as i64 {
                    let n = d.get(nx as u32, ny as u32, 0);
                    quantum = quantum.max((n.min(1e6) - centre.min(1e6)).abs());
                }
            }
            let got = psdf.field().row(r)[v];
            assert!((got - oracle).abs() <= quantum + 1e-9, "site {r} view {v}: {got} vs {oracle}");
        }
    }
}

#[test]
fn single_view_blend_is_bilinear_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cams = camera_ring(1, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(32, 1.5)).unwrap();
    let imgs = vec![random_image(32, 32, &mut rng)];
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let band = sphere_band(8);
    let w = BlendWeightVolume::uniform(band, 1);
    for _ in 0..50 {
        let p = Vec3::new(rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0));
        let b = blend_color(&p, &w, &views).unwrap();
        let expect = imgs[0].bilinear_sample(&cams[0].project(&p).pixel).unwrap();
        assert!(!b.hole);
        for c in 0..3 {
            assert_eq!(b.color[c], expect[c]);
        }
    }
}

#[test]
fn identical_images_ignore_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cams: Vec<_> = vec![camera_ring(1, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(32, 1.5)).unwrap()[0].clone(); 3];
    let img = random_image(32, 32, &mut rng);
    let imgs = vec![img.clone(), img.clone(), img];
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let band = sphere_band(8);
    let logits: Vec<_> = (0..3)
        .map(|_| rand_field(&band, 1, LOGIT_FILL, -3.0, 3.0, &mut rng))
        .collect();
    let w = BlendWeightVolume::from_logits(&logits).unwrap();
    let u = BlendWeightVolume::uniform(band.clone(), 3);
    let spec = *band.spec();
    for &s in band.sites().iter().step_by(7) {
        let p = spec.position(s);
        let a = blend_color(&p, &w, &views).unwrap().color;
        let b = blend_color(&p, &u, &views).unwrap().color;
        assert!((a - b).amax() < 1e-12);
    }
}

fn random_setup(seed: u64, nv: usize) -> (Vec<crate::geometry::CameraView>, Vec<ImageBuffer>, BlendWeightVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = camera_ring(nv, 90.0, 5.0, Vec3::zeros(), &Intrinsics::square(40, 1.2)).unwrap();
    let imgs: Vec<_> = (0..nv).map(|_| random_image(40, 40, &mut rng)).collect();
    let band = sphere_band(12);
    let logits: Vec<_> = (0..nv)
        .map(|_| rand_field(&band, 1, LOGIT_FILL, -2.0, 2.0, &mut rng))
        .collect();
    (cams, imgs, BlendWeightVolume::from_logits(&logits).unwrap())
}

#[test]
fn blend_matches_loop_oracle() {
    let (cams, imgs, w) = random_setup(3, 4);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..100 {
        let p = Vec3::new(rng.gen_range(-22.0..22.0), rng.gen_range(-22.0..22.0), rng.gen_range(-22.0..22.0));
        let wt = trilinear_sample(w.field(), &p).unwrap();
        let (mut num, mut den) = (Vec3::zeros(), 0.0);
        for i in 0..4 {
            let proj = cams[i].project(&p);
            if proj.valid {
                let c = imgs[i].bilinear_sample(&proj.pixel).unwrap();
                num += Vec3::new(c[0], c[1], c[2]) * wt[i];
                den += wt[i];
            }
        }
        let b = blend_color(&p, &w, &views).unwrap();
        if den == 0.0 {
            assert!(b.hole);
        } else {
            assert!((b.color - num / den).amax() <= 1e-9);
        }
    }
}

#[test]
fn unobserved_points_are_holes() {
    let (cams, imgs, w) = random_setup(4, 2);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let behind = cams[0].center() * 2.0 + Vec3::new(0.0, 500.0, 0.0);
    let b = blend_color(&behind, &w, &views).unwrap();
    assert!(b.hole);
    assert_eq!(b.color, Vec3::from(HOLE_COLOR));
}

#[test]
fn softmax_weights_sum_to_one() {
    let (_, _, w) = random_setup(5, 6);
    for s in 0..w.field().len() {
        let row = w.field().row(s);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(BlendWeightVolume::new(w.field().clone()).is_ok());
    let mut bad = w.field().clone();
    bad.values_mut()[0] += 0.1;
    assert!(BlendWeightVolume::new(bad).is_err());
}

#[test]
fn gt_colors_constant_vertex_and_oracle() {
    let mut mesh = shapes::icosphere(20.0, 2);
    let band = sphere_band(10);
    let red = mesh.clone().with_colors(vec![Vec3::new(1.0, 0.0, 0.0); mesh.vertices.len()]);
    let f = gt_color_volume(&red, &band).unwrap();
    assert!(f.values().chunks(3).all(|c| (c[0] - 1.0).abs() < 1e-12 && c[1] == 0.0 && c[2] == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let colors = (0..mesh.vertices.len()).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    mesh = mesh.with_colors(colors);
    let f = gt_color_volume(&mesh, &band).unwrap();
    let spec = *band.spec();
    for _ in 0..100 {
        let r = rng.gen_range(0..band.len());
        let n = nearest_exhaustive(&mesh, &spec.position(band.site(r))).unwrap();
        let c = mesh.color_at(n.triangle as usize, &n.bary).unwrap();
        for k in 0..3 {
            assert!((f.row(r)[k] - c[k]).abs() < 1e-6);
        }
    }
    // a site placed on a vertex
    let v = mesh.vertices[0];
    let spec1 = VolumeSpec::new(v - Vec3::repeat(0.5), 1.0, 1).unwrap();
    let one = ActiveSet::dense(spec1).into_shared();
    let f = gt_color_volume(&mesh, &one).unwrap();
    let want = mesh.colors.as_ref().unwrap()[0];
    assert!((Vec3::new(f.row(0)[0], f.row(0)[1], f.row(0)[2]) - want).amax() < 1e-6);
    assert!(gt_color_volume(&shapes::icosphere(1.0, 0), &band).is_err());
}

#[test]
fn color_loss_self_consistency_and_oracle() {
    let (cams, imgs, w) = random_setup(7, 3);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let band = w.active().clone();
    let spec = *band.spec();
    let blended = SparseField::from_fn(band.clone(), 3, 0.0, |r, _, row| {
        let s = views.samples(&spec.position(band.site(r)));
        let b = blend_samples(w.field().row(r), &s);
        row.copy_from_slice(b.color.as_slice());
    });
    assert_eq!(color_loss(&w, &views, &blended).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let gt = rand_field(&band, 3, 0.0, 0.0, 1.0, &mut rng);
    let mut oracle = 0.0;
    for r in 0..band.len() {
        let p = spec.position(band.site(r));
        let b = blend_color(&p, &w, &views).unwrap();
        if !b.hole {
            oracle += (0..3).map(|k| (b.color[k] - gt.row(r)[k]).abs()).sum::<f64>();
        }
    }
    let loss = color_loss(&w, &views, &gt).unwrap();
    assert!((loss - oracle).abs() <= 1e-9 * band.len() as f64);
}

#[test]
fn uniform_weights_on_identical_gt_images_give_zero_loss() {
    let cams: Vec<_> = camera_ring(3, 90.0, 0.0, Vec3::zeros(), &Intrinsics::square(16, 1.0)).unwrap();
    let imgs = vec![ImageBuffer::filled(16, 16, 3, 0.25); 3];
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let band = sphere_band(8);
    let gt = SparseField::constant(band.clone(), 3, 0.25, 0.0);
    let loss = color_loss(&BlendWeightVolume::uniform(band, 3), &views, &gt).unwrap();
    assert!(loss < 1e-12);
}

fn micro_config() -> TextureNetConfig {
    TextureNetConfig {
        feature_channels: 2,
        key_dim: 2,
        channels: 1,
        conv_layers: 1,
    }
}

fn micro_inputs(seed: u64, nv: usize) -> (TextureInputs, Vec<Vec<Option<Vec3>>>, SparseField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = VolumeSpec::centered(Vec3::zeros(), 6.0, 3).unwrap();
    let band = ActiveSet::dense(spec).filter(|i, _| i % 3 != 1).into_shared();
    let features = (0..nv)
        .map(|_| rand_field(&band, 3, 0.0, -1.0, 1.0, &mut rng))
        .collect();
    let samples = (0..band.len())
        .map(|_| {
            (0..nv)
                .map(|_| rng.gen_bool(0.85).then(|| Vec3::new(rng.gen(), rng.gen(), rng.gen())))
                .collect()
        })
        .collect();
    let gt = rand_field(&band, 3, 0.0, 0.0, 1.0, &mut rng);
    (TextureInputs { band, features }, samples, gt)
}

#[test]
fn texture_gradient_matches_finite_differences() {
    let cfg = micro_config();
    assert!(TextureModel::zeros(cfg).param_count() <= 200);
    for seed in 0..20u64 {
        let (inputs, samples, gt) = micro_inputs(seed, 2 + seed as usize % 2);
        let mut model = TextureModel::init(cfg, seed + 100);
        let plan = model.net.plan(inputs.band.clone()).unwrap();
        let (_, grad) = model.loss_and_grad(&inputs, &plan, &samples, &gt).unwrap();
        let base = model.params();
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..12 {
            let i = rng.gen_range(0..base.len());
            let fd = |model: &mut TextureModel, eps: f64| {
                let mut p = base.clone();
                p[i] += eps;
                model.set_params(&p);
                let lp = model.loss_and_grad(&inputs, &plan, &samples, &gt).unwrap().0;
                p[i] -= 2.0 * eps;
                model.set_params(&p);
                let lm = model.loss_and_grad(&inputs, &plan, &samples, &gt).unwrap().0;
                (lp - lm) / (2.0 * eps)
            };
            let tol = 1e-4 * scale + 1e-7;
            let mut eps = 1e-3;
            let mut best = f64::INFINITY;
            while eps >= 1e-7 {
                best = best.min((fd(&mut model, eps) - grad[i]).abs());
                if best <= tol {
                    break;
                }
                eps /= 10.0;
            }
            model.set_params(&base);
            assert!(best <= tol, "seed {seed} param {i}: analytic {} error {best}", grad[i]);
        }
    }
}

#[test]
fn zero_model_gives_uniform_weights() {
    let (inputs, _, _) = micro_inputs(1, 3);
    let w = TextureModel::zeros(micro_config()).weights(&inputs).unwrap();
    assert!(w.field().values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn view_permutation_permutes_weights() {
    let (mut inputs, _, _) = micro_inputs(2, 3);
    let model = TextureModel::init(micro_config(), 9);
    let a = model.weights(&inputs).unwrap();
    inputs.features.swap(0, 2);
    let b = model.weights(&inputs).unwrap();
    for s in 0..a.field().len() {
        let (ra, rb) = (a.field().row(s), b.field().row(s));
        assert!((ra[0] - rb[2]).abs() < 1e-12 && (ra[1] - rb[1]).abs() < 1e-12 && (ra[2] - rb[0]).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = micro_config();
    let model = TextureModel::init(cfg, 3);
    let bytes = texture_checkpoint_bytes(&model);
    let back = load_texture_checkpoint_bytes(cfg, &bytes).unwrap();
    for (a, b) in model.params().iter().zip(back.params()) {
        assert_eq!(*a as f32 as f64, b);
    }
    assert_eq!(texture_checkpoint_bytes(&back), bytes);
    let other = TextureNetConfig { key_dim: 3, ..cfg };
    assert!(matches!(load_texture_checkpoint_bytes(other, &bytes), Err(Error::Config(_))));
    assert!(matches!(load_texture_checkpoint_bytes(cfg, &bytes[..bytes.len() - 1]), Err(Error::Format(_))));
}

fn flat_capture(color: [f64; 3], size: u32) -> (Vec<crate::geometry::CameraView>, Vec<ImageBuffer>) {
    let cams = camera_ring(2, 80.0, 0.0, Vec3::zeros(), &Intrinsics::square(size, 1.0)).unwrap();
    let imgs = cams
        .iter()
        .map(|c| ImageBuffer::from_fn(c.width, c.height, 3, |_, _, ch| color[ch as usize]))
        .collect();
    (cams, imgs)
}

#[test]
fn single_triangle_bakes_constant_chart() {
    let mesh = TriangleMesh::new(
        vec![Vec3::new(-5.0, -5.0, 0.0), Vec3::new(5.0, -5.0, 0.0), Vec3::new(0.0, 5.0, 0.0)],
        vec![[0, 1, 2]],
    );
    let (cams, imgs) = flat_capture([0.2, 0.6, 0.4], 32);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let w = BlendWeightVolume::uniform(sphere_band(8), 2);
    let atlas = bake_atlas(&mesh, &w, &views, 64).unwrap();
    assert_eq!(atlas.hole_texels, 0);
    let (ox, oy) = atlas.chart_origins[0];
    let mut inside = 0;
    for y in 0..64 {
        for x in 0..64 {
            if let Some((p, bary)) = atlas.texel_surface_point(0, x, y) {
                inside += 1;
                assert!(bary.iter().all(|&b| b >= -1e-12) && (bary.sum() - 1.0).abs() < 1e-12);
                let q = mesh.vertices[0] * bary[0] + mesh.vertices[1] * bary[1] + mesh.vertices[2] * bary[2];
                assert!((p - q).norm() < 1e-6 && p.z.abs() < 1e-6);
                let t = atlas.image.texel(x, y);
                assert!((t[0] - 0.2).abs() < 1e-12 && (t[1] - 0.6).abs() < 1e-12 && (t[2] - 0.4).abs() < 1e-12);
            }
        }
    }
    assert!(inside > 100 && ox == 0 && oy == 0);
    assert!(atlas.uvs.iter().all(|uv| (0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y)));
}

#[test]
fn texel_points_lie_on_source_triangles() {
    let mesh = shapes::icosphere(20.0, 2);
    let (cams, imgs) = flat_capture([0.5, 0.5, 0.5], 32);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let w = BlendWeightVolume::uniform(sphere_band(8), 2);
    let atlas = bake_atlas(&mesh, &w, &views, 512).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let t = rng.gen_range(0..mesh.triangles.len());
        let (ox, oy) = atlas.chart_origins[t];
        for dy in 0..6 {
            for dx in 0..6 {
                if let Some((p, _)) = atlas.texel_surface_point(t, ox + dx, oy + dy) {
                    let [a, b, c] = mesh.corners(t);
                    let (q, _) = crate::spatial::closest_point_on_triangle(&p, &a, &b, &c);
                    assert!((p - q).norm() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn packing_overflow_reports_required_resolution() {
    let mesh = shapes::icosphere(20.0, 3);
    let (cams, imgs) = flat_capture([0.5, 0.5, 0.5], 16);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let w = BlendWeightVolume::uniform(sphere_band(8), 2);
    match bake_atlas(&mesh, &w, &views, 16) {
        Err(Error::Packing { required }) => {
            assert!(required > 16 && required.is_power_of_two());
            assert!(bake_atlas(&mesh, &w, &views, required).is_ok());
        }
        other => panic!("expected a packing error, got {:?}", other.map(|a| a.texel_scale)),
    }
}

#[test]
fn weights_reused_across_image_scales() {
    let mesh = shapes::icosphere(20.0, 1);
    let w = BlendWeightVolume::uniform(sphere_band(8), 2);
    let before = w.clone();
    let (cams, small) = flat_capture([0.3, 0.3, 0.9], 32);
    let (_, large) = flat_capture([0.3, 0.3, 0.9], 64);
    let a = bake_atlas(&mesh, &w, &ViewImages::new(&cams, &small).unwrap(), 128).unwrap();
    let b = bake_atlas(&mesh, &w, &ViewImages::new(&cams, &large).unwrap(), 128).unwrap();
    assert_eq!(w, before);
    assert_eq!(a.uvs, b.uvs);
    let diff = a.image.data().iter().zip(b.image.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff < 1e-12);
}

#[test]
fn textured_render_reproduces_flat_colour() {
    let mesh = shapes::icosphere(20.0, 2);
    let (cams, imgs) = flat_capture([0.7, 0.1, 0.3], 32);
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let w = BlendWeightVolume::uniform(sphere_band(8), 2);
    let atlas = bake_atlas(&mesh, &w, &views, 256).unwrap();
    let opts = RenderOptions {
        shading: Shading::Unlit,
        ..Default::default()
    };
    let r = render_textured(&atlas, &cams[0], &opts);
    let gt = render_views(&mesh.clone().with_colors(vec![Vec3::new(0.7, 0.1, 0.3); mesh.vertices.len()]), &cams[..1], &opts);
    assert_eq!(r.mask, gt[0].mask);
    for (a, b) in r.color.data().iter().zip(gt[0].color.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}
