//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 4 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxband::geometry::{ImageBuffer, Mat3, Vec3, VolumeSpec};
use voxband::io::{write_mesh, Capture};
use voxband::metrics::{p2s_chamfer, psnr, ssim, ssim_kernel, SSIM_WINDOW};
use voxband::pipeline::{carve, coarse_stage, hull_mesh, Networks, PipelineConfig, TrainOptions};
use voxband::sparsecnn::dense::dense_conv;
use voxband::sparsecnn::{
    backward, conv_forward, forward, stage_loss, stage_loss_grad, Activation, ConvLayerSpec, ConvVariant, GraphBuilder,
    NetworkGraph, Plan, Rulebook,
};
use voxband::featproj::ExtractorConfig;
use voxband::spatial::{is_inside_exhaustive, nearest_exhaustive};
use voxband::sparsevol::{narrow_band, ActiveSet, SparseField};
use voxband::synth::{camera_ring, render_views, shapes, Intrinsics, RenderOptions, Shading};
use voxband::texture::{
    bake_atlas, compute_psdf, gt_color_volume, render_textured, train_texture, TextureInputs, TextureModel,
    TextureNetConfig, ViewImages, PSDF_TRUNCATION,
};
use voxband::tsdf::{extract_mesh, mesh_to_tsdf, quantization_study, surface_shell, TsdfVolume};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voxband")
}

fn voxband(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("voxband {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn rotation(axis: Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

fn humanoid_ring() -> (Vec<voxband::geometry::CameraView>, Vec<voxband::synth::ViewRender>) {
    let mesh = shapes::humanoid();
    let cams = camera_ring(6, 300.0, 0.0, Vec3::zeros(), &Intrinsics::square(512, 1.2)).unwrap();
    let renders = render_views(&mesh, &cams, &RenderOptions::default());
    (cams, renders)
}

fn quantization_curve() -> Outcome {
    let t = Instant::now();
    let mesh = shapes::humanoid();
    let res = [32, 64, 128, 256, 512];
    let rows = quantization_study(&mesh, Vec3::zeros(), 256.0, &res, 5.0, 100_000, 42).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let errs: Vec<f64> = rows.iter().map(|r| r.mean_error_cm).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let last = errs[errs.len() - 1];
    let detail = format!(
        "errors {} cm; R=512 {last:.4} < 0.05; {secs:.0}s < 300s",
        errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" > ")
    );
    check(decreasing && last < 0.05 && secs < 300.0, detail)
}

fn culling_ratio() -> Outcome {
    let (cams, renders) = humanoid_ring();
    let masks: Vec<_> = renders.into_iter().map(|r| r.mask).collect();
    let t = Instant::now();
    let hull = carve(&PipelineConfig::default(), &cams, &masks).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let ratio = hull.len() as f64 / 256f64.powi(3);
    check(
        ratio < 0.05 && secs < 60.0,
        format!("{:.2}% of 256^3 active (< 5%), {secs:.1}s", 100.0 * ratio),
    )
}

fn band_sparsity() -> Outcome {
    let spec = VolumeSpec::centered(Vec3::zeros(), 256.0, 512).map_err(|e| e.to_string())?;
    let band = surface_shell(&spec, &shapes::humanoid(), 3.0).map_err(|e| e.to_string())?;
    let ratio = band.len() as f64 / 512f64.powi(3);
    check(
        ratio < 0.01,
        format!("{} sites = {:.3}% of 512^3 (< 1%)", band.len(), 100.0 * ratio),
    )
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_field(rng: &mut ChaCha8Rng, set: &Arc<ActiveSet>, c: usize) -> SparseField {
    SparseField::new(set.clone(), c, rand_vec(rng, set.len() * c), 0.0).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn layer(variant: ConvVariant, cin: usize, cout: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        variant,
        cin,
        cout,
        activation: Activation::Identity,
        affine: false,
    }
}

fn conv_equivalence() -> Outcome {
    let (cin, cout) = (2, 3);
    let mut worst: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    let mut closure = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in [4u32, 6, 8] {
            let spec = VolumeSpec::centered(Vec3::zeros(), 16.0, r).unwrap();
            let dense = Arc::new(ActiveSet::dense(spec));
            let w = rand_vec(&mut rng, 27 * cin * cout);
            let b = rand_vec(&mut rng, cout);
            let x = rand_field(&mut rng, &dense, cin);
            let sub = Rulebook::submanifold(dense.clone()).unwrap();
            let y = conv_forward(&x, &layer(ConvVariant::Submanifold, cin, cout), &w, &b, None, &sub).unwrap();
            let d = dense_conv(ConvVariant::Submanifold, r as usize, x.values(), cin, cout, &w, &b);
            worst = worst.max(rel_err(y.values(), &d));

            let down = Rulebook::strided(dense.clone()).unwrap();
            let y = conv_forward(&x, &layer(ConvVariant::Strided, cin, cout), &w, &b, None, &down).unwrap();
            let d = dense_conv(ConvVariant::Strided, r as usize, x.values(), cin, cout, &w, &b);
            worst = worst.max(rel_err(y.values(), &d));

            let up = Rulebook::transposed(&down).unwrap();
            let xc = rand_field(&mut rng, down.output(), cin);
            let y = conv_forward(&xc, &layer(ConvVariant::Transposed, cin, cout), &w, &b, None, &up).unwrap();
            let d = dense_conv(ConvVariant::Transposed, r as usize / 2, xc.values(), cin, cout, &w, &b);
            worst = worst.max(rel_err(y.values(), &d));
        }

        // sparse sets: submanifold closure and strided/transposed adjointness
        let spec = VolumeSpec::centered(Vec3::zeros(), 16.0, 10).unwrap();
        let keep = rng.gen_range(0.2..0.8);
        let sites: Vec<_> = ActiveSet::dense(spec).sites().iter().copied().filter(|_| rng.gen_bool(keep)).collect();
        let set = Arc::new(ActiveSet::from_sites(spec, sites).unwrap());
        let sub = Rulebook::submanifold(set.clone()).unwrap();
        closure &= sub.output().as_ref() == set.as_ref();
        let w = rand_vec(&mut rng, 27 * cin * cout);
        let y = conv_forward(&rand_field(&mut rng, &set, cin), &layer(ConvVariant::Submanifold, cin, cout), &w, &[0.0; 3], None, &sub)
            .unwrap();
        closure &= y.active().as_ref() == set.as_ref();

        let mut wt = vec![0.0; w.len()];
        for k in 0..27 {
            for ci in 0..cin {
                for co in 0..cout {
                    wt[(k * cout + co) * cin + ci] = w[(k * cin + ci) * cout + co];
                }
            }
        }
        let down = Rulebook::strided(set.clone()).unwrap();
        let up = Rulebook::transposed(&down).unwrap();
        let x = rand_field(&mut rng, &set, cin);
        let yc = rand_field(&mut rng, down.output(), cout);
        let sx = conv_forward(&x, &layer(ConvVariant::Strided, cin, cout), &w, &[0.0; 3], None, &down).unwrap();
        let ty = conv_forward(&yc, &layer(ConvVariant::Transposed, cout, cin), &wt, &[0.0; 2], None, &up).unwrap();
        let lhs: f64 = sx.values().iter().zip(yc.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.values().iter().zip(ty.values()).map(|(a, b)| a * b).sum();
        worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12));
    }
    check(
        worst < 1e-6 && worst_adj < 1e-6 && closure,
        format!("20 seeds; max dense-oracle rel err {worst:.1e}, adjoint rel err {worst_adj:.1e}, closure {closure}"),
    )
}

fn micro_nets() -> Vec<NetworkGraph> {
    let mut b = GraphBuilder::new(2);
    let x = b.input();
    let e0 = b.conv(x, ConvVariant::Submanifold, 2, Activation::Relu);
    let s = b.conv(e0, ConvVariant::Strided, 1, Activation::Relu);
    let t = b.transposed(s, s, 1, Activation::Identity);
    let k = b.concat(&[t, e0]);
    let h = b.linear(k, 1, Activation::Identity);
    let a = b.finish(h);

    let mut b = GraphBuilder::new(1);
    let x = b.input();
    let e = b.conv_spec(
        x,
        ConvLayerSpec {
            variant: ConvVariant::Submanifold,
            cin: 1,
            cout: 2,
            activation: Activation::Relu,
            affine: true,
        },
        None,
    );
    let sl = b.slice(e, 1, 1);
    let k = b.concat(&[e, sl]);
    let h = b.linear(k, 1, Activation::Identity);
    vec![a, b.finish(h)]
}

/// Central differences with a shrinking step; returns the best relative error.
fn fd_check(analytic: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut eps = 1e-3;
    while eps >= 1e-8 {
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        // relative, with an absolute floor of 1e-7 at the 1e-4 threshold
        best = best.min((fd - analytic).abs() / (fd.abs().max(analytic.abs()) + 1e-3));
        if best < 1e-4 {
            break;
        }
        eps /= 10.0;
    }
    best
}

fn stage_loss_at(g: &NetworkGraph, plan: &Plan, x: &SparseField, gt: &TsdfVolume, bias: f64) -> f64 {
    let cache = forward(g, plan, x).unwrap();
    stage_loss(&cache.field(g, plan, g.output_node()), gt, plan.input(), bias).unwrap()
}

fn texture_micro(seed: u64) -> (TextureModel, TextureInputs, Vec<voxband::geometry::CameraView>, Vec<ImageBuffer>, SparseField) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TextureNetConfig {
        feature_channels: 2,
        key_dim: 2,
        channels: 1,
        conv_layers: 1,
    };
    let nv = 2 + seed as usize % 2;
    let spec = VolumeSpec::centered(Vec3::zeros(), 6.0, 3).unwrap();
    let band = ActiveSet::dense(spec).filter(|i, _| i % 3 != 1).into_shared();
    let cams = camera_ring(nv, 20.0, 3.0, Vec3::zeros(), &Intrinsics::square(16, 1.0)).unwrap();
    let img = |c: u32, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        ImageBuffer::new(16, 16, c, (0..16 * 16 * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    let maps: Vec<_> = (0..nv).map(|_| img(2, -1.0, 1.0, &mut rng)).collect();
    let depths: Vec<_> = (0..nv).map(|_| img(1, 17.0, 23.0, &mut rng)).collect();
    let colors: Vec<_> = (0..nv).map(|_| img(3, 0.0, 1.0, &mut rng)).collect();
    let inputs = TextureInputs::new(band.clone(), &cams, &maps, &depths).unwrap();
    let gt = SparseField::new(band.clone(), 3, (0..band.len() * 3).map(|_| rng.gen()).collect(), 0.0).unwrap();
    let mut model = TextureModel::init(cfg, seed + 100);
    let p: Vec<f64> = model.params().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
    model.set_params(&p);
    (model, inputs, cams, colors, gt)
}

fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut max_params = 0;
    for proto in micro_nets() {
        max_params = max_params.max(proto.param_count());
        for seed in 0..20u64 {
            let mut g = proto.clone();
            g.init_he_uniform(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for v in g.params_mut().iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            let spec = VolumeSpec::centered(Vec3::zeros(), 16.0, 6).unwrap();
            let set = Arc::new(ActiveSet::dense(spec).filter(|i, _| i % 4 != 1));
            let x = rand_field(&mut rng, &set, g.input_channels());
            let gt_vals = (0..set.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gt = TsdfVolume::new(SparseField::new(set.clone(), 1, gt_vals, 5.0).unwrap(), 5.0).unwrap();
            // coarse and fine loss biases
            let bias = [5.0, 3.0][(seed % 2) as usize];
            let plan = g.plan(set.clone()).unwrap();
            let cache = forward(&g, &plan, &x).unwrap();
            let raw = cache.field(&g, &plan, g.output_node());
            let (_, seed_grad) = stage_loss_grad(&raw, &gt, &set, bias).unwrap();
            let (grad, _) = backward(&g, &plan, &cache, vec![(g.output_node(), seed_grad)]).unwrap();
            for (i, &a) in grad.iter().enumerate() {
                let err = fd_check(a, |eps| {
                    let mut gp = g.clone();
                    gp.params_mut()[i] += eps;
                    stage_loss_at(&gp, &plan, &x, &gt, bias)
                });
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    for seed in 0..20u64 {
        let (mut model, inputs, cams, colors, gt) = texture_micro(seed);
        max_params = max_params.max(model.param_count());
        let views = ViewImages::new(&cams, &colors).unwrap();
        let (_, grad) = model.loss_and_gradient(&inputs, &views, &gt).unwrap();
        let base = model.params();
        for (i, &a) in grad.iter().enumerate() {
            let err = fd_check(a, |eps| {
                let mut p = base.clone();
                p[i] += eps;
                model.set_params(&p);
                model.loss_and_gradient(&inputs, &views, &gt).unwrap().0
            });
            worst = worst.max(err);
            checked += 1;
        }
        model.set_params(&base);
    }
    check(
        worst < 1e-4 && max_params <= 200,
        format!("{checked} parameters over 20 seeds x 3 micro nets (<= {max_params} weights); worst rel err {worst:.1e}"),
    )
}

fn tsdf_oracle() -> Outcome {
    let meshes = [
        shapes::icosphere(6.0, 1),
        shapes::icosphere(9.0, 2).transformed(&rotation(Vec3::new(1.0, 1.0, 0.3), 0.7), &Vec3::new(1.3, -0.4, 0.9)),
        shapes::box_mesh(Vec3::new(-8.0, -5.0, -3.0), Vec3::new(6.0, 7.0, 4.0)),
        shapes::box_mesh(Vec3::repeat(-6.0), Vec3::repeat(6.0)).transformed(&rotation(Vec3::new(0.2, 1.0, -0.5), 0.9), &Vec3::zeros()),
        shapes::humanoid_with_spacing(8.0).scaled(0.12),
    ];
    let spec = VolumeSpec::centered(Vec3::zeros(), 30.0, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for mesh in &meshes {
        let mut sites: Vec<_> = (0..500).map(|_| [0; 3].map(|_| rng.gen_range(0..64u32))).collect();
        sites.sort();
        sites.dedup();
        let set = Arc::new(ActiveSet::from_sites(spec, sites).unwrap());
        for trunc in [5.0, 50.0] {
            let tsdf = mesh_to_tsdf(mesh, set.clone(), trunc).map_err(|e| e.to_string())?;
            for (r, &s) in set.sites().iter().enumerate() {
                let p = spec.position(s);
                let d = nearest_exhaustive(mesh, &p).unwrap().distance.min(trunc);
                let brute = if is_inside_exhaustive(mesh, &p) { -d } else { d };
                worst = worst.max((tsdf.values()[r] - brute).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("5 meshes x ~500 sites x 2 truncations; max |indexed - brute| {worst:.1e} cm"))
}

fn sphere_tsdf(spec: VolumeSpec, radius: f64, active: Arc<ActiveSet>) -> TsdfVolume {
    let f = SparseField::from_fn(active, 1, 5.0, |_, p, out| out[0] = (p.norm() - radius).clamp(-5.0, 5.0));
    let _ = spec;
    TsdfVolume::new(f, 5.0).unwrap()
}

fn marching_cubes() -> Outcome {
    let spec = VolumeSpec::centered(Vec3::zeros(), 100.0, 64).unwrap();
    let h = spec.spacing();
    let mesh = extract_mesh(&sphere_tsdf(spec, 30.0, Arc::new(ActiveSet::dense(spec))), None).map_err(|e| e.to_string())?;
    let err = mesh.vertices.iter().map(|v| (v.norm() - 30.0).abs()).fold(0.0, f64::max);

    let coarse_spec = VolumeSpec::centered(Vec3::zeros(), 100.0, 32).unwrap();
    let coarse = sphere_tsdf(coarse_spec, 30.0, Arc::new(ActiveSet::dense(coarse_spec)));
    let fine_spec = coarse_spec.doubled();
    let fine_dense = sphere_tsdf(fine_spec, 30.0, Arc::new(ActiveSet::dense(fine_spec)));
    let band = Arc::new(narrow_band(fine_dense.field(), 3.0).unwrap());
    let fine = TsdfVolume::new(fine_dense.field().restrict(band).unwrap(), 5.0).unwrap();
    let banded = extract_mesh(&fine, Some(&coarse)).map_err(|e| e.to_string())?;
    let open = banded.open_edges().len();
    let chi = banded.euler_characteristic();
    check(
        err < h / 2.0 && open == 0 && chi == 2,
        format!("max radial error {err:.4} < h/2 = {:.4}; band mesh open edges {open}, Euler {chi}", h / 2.0),
    )
}

fn toy_learning() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mesh = shapes::icosphere(20.0, 4);
    let cams = camera_ring(6, 150.0, 0.0, Vec3::zeros(), &Intrinsics::square(128, 2.0)).unwrap();
    let renders = render_views(&mesh, &cams, &RenderOptions::default());
    Capture::from_renders(cams, &renders).save(d.join("capture")).map_err(|e| e.to_string())?;
    write_mesh(d.join("gt.ply"), &mesh).map_err(|e| e.to_string())?;
    let cfg = serde_json::json!({
        "coarse_resolution": 64,
        "fine_resolution": 128,
        "volume_edge": 96.0,
        "shape_extractor": {"mode": "handcrafted", "channels": 16, "size": 64},
        "normal_extractor": {"mode": "handcrafted", "channels": 16, "size": 64},
        "coarse_net": {"input_channels": 16, "channels": [8, 12, 16], "export_channels": 8, "affine": false},
        "fine_net": {"feature_channels": 16, "export_channels": 8, "channels": 8, "affine": false}
    });
    let cfg_path = d.join("config.json");
    std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
    let p = |name: &str| d.join(name).display().to_string();
    voxband(&[
        "--config", &p("config.json"), "--seed", "42",
        "train-toy", "--stage", "coarse", "--capture", &p("capture"), "--gt", &p("gt.ply"),
        "--epochs", "2000", "--lr", "1e-4", "--out", &p("coarse.vbw"), "--report", &p("report.json"),
    ])?;
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let zero = report["zero_network_loss"].as_f64().unwrap();
    let fin = report["final_loss"].as_f64().unwrap();
    let steps = report["steps"].as_u64().unwrap();

    let mut cfg = PipelineConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    cfg.coarse_checkpoint = Some(p("coarse.vbw"));
    let nets = Networks::from_config(&cfg).map_err(|e| e.to_string())?;
    let capture = Capture::load(d.join("capture")).map_err(|e| e.to_string())?;
    let out = coarse_stage(&capture.colors, &capture.masks, &capture.cameras, &cfg, &nets.coarse).map_err(|e| e.to_string())?;
    let recon = extract_mesh(&out.tsdf, None).map_err(|e| e.to_string())?;
    let hull = hull_mesh(&out.hull).map_err(|e| e.to_string())?;
    let ours = p2s_chamfer(&recon, &mesh).map_err(|e| e.to_string())?.p2s_precision;
    let base = p2s_chamfer(&hull, &mesh).map_err(|e| e.to_string())?.p2s_precision;
    let secs = t.elapsed().as_secs_f64();
    let ratio = fin / zero;
    check(
        ratio < 0.1 && steps <= 2000 && ours < base && secs < 1800.0,
        format!(
            "loss {:.2}% of zero-network after {steps} steps; P2S {ours:.3} cm vs hull {base:.3} cm; {secs:.0}s",
            100.0 * ratio
        ),
    )
}

fn texture_properties() -> Outcome {
    let mesh = shapes::painted_sphere(20.0, 5, 10.0);
    let unlit = RenderOptions {
        shading: Shading::Unlit,
        ..Default::default()
    };
    let cams = camera_ring(2, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(128, 1.5)).unwrap();
    let renders = render_views(&mesh, &cams, &unlit);
    let imgs: Vec<_> = renders.iter().map(|r| r.color.clone()).collect();
    let depths: Vec<_> = renders.iter().map(|r| r.depth.clone()).collect();
    let spec = VolumeSpec::centered(Vec3::zeros(), 64.0, 64).unwrap();
    let band = surface_shell(&spec, &mesh, 1.0).unwrap().into_shared();
    let extractor = ExtractorConfig::Handcrafted { channels: 9, size: 64 };
    let inputs = TextureInputs::from_images(band.clone(), &cams, &imgs, &depths, &extractor).map_err(|e| e.to_string())?;
    let views = ViewImages::new(&cams, &imgs).unwrap();
    let gt = gt_color_volume(&mesh, &band).unwrap();
    let cfg = TextureNetConfig {
        feature_channels: 9,
        channels: 8,
        ..Default::default()
    };
    let opts = TrainOptions {
        steps: 400,
        lr: 1e-3,
        seed: 42,
    };
    let (model, _) = train_texture(&inputs, &views, &gt, &cfg, &opts).map_err(|e| e.to_string())?;
    let w = model.weights(&inputs).map_err(|e| e.to_string())?;
    let sum_err = (0..band.len())
        .map(|s| (w.field().row(s).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    // sites on the surface seen by view 0 and hidden from view 1
    let psdf = compute_psdf(&band, &cams, &depths).unwrap();
    let occluded: Vec<f64> = (0..band.len())
        .filter(|&s| {
            let p = psdf.field().row(s);
            p[0].abs() < 1.0 && p[1] <= -PSDF_TRUNCATION
        })
        .map(|s| w.field().row(s)[0])
        .collect();
    let mean = occluded.iter().sum::<f64>() / occluded.len() as f64;
    let above = occluded.iter().filter(|&&v| v > 0.9).count();
    let min = occluded.iter().copied().fold(1.0, f64::min);

    // bake the same weights from 1K and 2K sources
    let eval_cams = camera_ring(2, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(384, 1.5)).unwrap();
    let gt_renders = render_views(&mesh, &eval_cams, &unlit);
    let mut scores = Vec::new();
    for size in [1024, 2048] {
        let cams = camera_ring(2, 100.0, 0.0, Vec3::zeros(), &Intrinsics::square(size, 1.5)).unwrap();
        let src: Vec<_> = render_views(&mesh, &cams, &unlit).into_iter().map(|r| r.color).collect();
        let atlas = bake_atlas(&mesh, &w, &ViewImages::new(&cams, &src).unwrap(), 2048).map_err(|e| e.to_string())?;
        let score = eval_cams
            .iter()
            .zip(&gt_renders)
            .map(|(c, g)| psnr(&render_textured(&atlas, c, &unlit).color, &g.color).unwrap())
            .sum::<f64>()
            / eval_cams.len() as f64;
        scores.push(score);
    }
    check(
        sum_err < 1e-6 && mean > 0.9 && scores[1] >= scores[0],
        format!(
            "weight sums within {sum_err:.1e}; occluded-in-view-1 region ({} sites) mean w0 {mean:.3} > 0.9 \
             ({above} sites > 0.9, min {min:.3}); PSNR 1K {:.3} dB, 2K {:.3} dB",
            occluded.len(),
            scores[0],
            scores[1]
        ),
    )
}

fn ssim_oracle(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (x, y) = (a.luminance(), b.luminance());
    let k = ssim_kernel();
    let (w, h) = (a.width() as usize, a.height() as usize);
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..SSIM_WINDOW {
                for i in 0..SSIM_WINDOW {
                    let wt = k[i] * k[j];
                    let (px, py) = ((ox + i) as u32, (oy + j) as u32);
                    let (u, v) = (x.get(px, py, 0), y.get(px, py, 0));
                    mx += wt * u;
                    my += wt * v;
                    sxx += wt * u * u;
                    syy += wt * v * v;
                    sxy += wt * u * v;
                }
            }
            let (vx, vy, c) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + 1e-4) * (2.0 * c + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
            count += 1;
        }
    }
    total / count as f64
}

fn metric_sanity() -> Outcome {
    let m = shapes::icosphere(20.0, 3);
    let id = p2s_chamfer(&m, &m).map_err(|e| e.to_string())?;
    let zero = [id.p2s_precision, id.p2s_recall, id.chamfer_precision, id.chamfer_recall].iter().all(|&v| v == 0.0);
    let gt = shapes::icosphere(20.0, 4);
    let mut offset_err: f64 = 0.0;
    for delta in [0.5, 1.0, 2.0] {
        let r = p2s_chamfer(&shapes::icosphere(20.0 + delta, 4), &gt).map_err(|e| e.to_string())?;
        offset_err = offset_err.max((r.p2s_precision - delta).abs()).max((r.p2s_recall - delta).abs());
    }
    // chord sagitta of a subdivision-4 icosphere of radius 20
    let sag = 0.02;
    let p = psnr(&ImageBuffer::filled(16, 8, 3, 0.0), &ImageBuffer::filled(16, 8, 3, 0.1)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ssim_err: f64 = 0.0;
    for _ in 0..5 {
        let a = ImageBuffer::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.gen()).collect()).unwrap();
        let noisy = a.data().iter().map(|v| (v + rng.gen_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        let b = ImageBuffer::new(32, 32, 3, noisy).unwrap();
        ssim_err = ssim_err.max((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs());
    }
    check(
        zero && offset_err <= sag && (p - 20.0).abs() < 1e-12 && ssim_err < 1e-6,
        format!(
            "identity zero {zero}; offset |P2S - delta| {offset_err:.4} <= {sag}; PSNR {p:.15} dB; SSIM oracle diff {ssim_err:.1e}"
        ),
    )
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, String> {
    if a.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        let mut other: Vec<_> = std::fs::read_dir(b).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        other.sort();
        if names != other {
            return Ok(false);
        }
        for n in names {
            if !files_equal(&a.join(&n), &b.join(&n))? {
                return Ok(false);
            }
        }
        Ok(true)
    } else {
        Ok(std::fs::read(a).map_err(|e| e.to_string())? == std::fs::read(b).map_err(|e| e.to_string())?)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let p = |name: &str| d.join(name).display().to_string();
    let cfg = serde_json::json!({
        "coarse_resolution": 32,
        "fine_resolution": 64,
        "volume_edge": 64.0,
        "shape_extractor": {"mode": "handcrafted", "channels": 12, "size": 48},
        "normal_extractor": {"mode": "handcrafted", "channels": 10, "size": 48},
        "texture_extractor": {"mode": "handcrafted", "channels": 9, "size": 48},
        "coarse_net": {"input_channels": 12, "channels": [4, 6, 8], "export_channels": 4, "affine": false},
        "fine_net": {"feature_channels": 10, "export_channels": 4, "channels": 4, "affine": false},
        "texture_net": {"feature_channels": 9, "key_dim": 4, "channels": 4, "conv_layers": 1}
    });
    std::fs::write(d.join("config.json"), cfg.to_string()).map_err(|e| e.to_string())?;
    write_mesh(d.join("gt.ply"), &shapes::painted_sphere(20.0, 4, 8.0)).map_err(|e| e.to_string())?;
    let config = p("config.json");
    let base = ["--config", config.as_str(), "--seed", "7", "--threads", "2"];
    voxband(&[&base[..], &["synth-render", "--mesh", &p("gt.ply"), "--views", "3", "--size", "96", "--radius", "100", "--unlit", "--out", &p("capture")]].concat())?;
    let mut same = Vec::new();
    for run in ["a", "b"] {
        let o = |name: &str| p(&format!("{run}_{name}"));
        voxband(&[&base[..], &["train-toy", "--stage", "coarse", "--capture", &p("capture"), "--gt", &p("gt.ply"), "--epochs", "150", "--lr", "3e-3", "--out", &o("coarse.vbw")]].concat())?;
        voxband(&[&base[..], &["train-toy", "--stage", "fine", "--capture", &p("capture"), "--gt", &p("gt.ply"), "--epochs", "3", "--coarse-checkpoint", &o("coarse.vbw"), "--out", &o("fine.vbw")]].concat())?;
        voxband(&[&base[..], &["reconstruct", "--capture", &p("capture"), "--checkpoint", &o("coarse.vbw"), "--fine-checkpoint", &o("fine.vbw"), "--out", &o("mesh.ply")]].concat())?;
        voxband(&[&base[..], &["train-toy", "--stage", "texture", "--capture", &p("capture"), "--gt", &p("gt.ply"), "--epochs", "3", "--lr", "1e-3", "--out", &o("texture.vbt")]].concat())?;
        voxband(&[&base[..], &["texture", "--capture", &p("capture"), "--mesh", &p("gt.ply"), "--checkpoint", &o("texture.vbt"), "--atlas-res", "256", "--out", &o("textured")]].concat())?;
    }
    for name in ["coarse.vbw", "fine.vbw", "mesh.ply", "texture.vbt", "textured"] {
        same.push((name, files_equal(&d.join(format!("a_{name}")), &d.join(format!("b_{name}")))?));
    }
    let ok = same.iter().all(|(_, s)| *s);
    check(
        ok,
        same.iter().map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "DIFFERS" })).collect::<Vec<_>>().join(", "),
    )
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("quantization-error curve", quantization_curve),
        ("visual-hull culling ratio", culling_ratio),
        ("narrow-band sparsity", band_sparsity),
        ("sparse vs dense convolution", conv_equivalence),
        ("gradient correctness", gradient_checks),
        ("mesh to TSDF oracle", tsdf_oracle),
        ("marching-cubes accuracy", marching_cubes),
        ("toy end-to-end learning", toy_learning),
        ("texture properties", texture_properties),
        ("metric sanity", metric_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
