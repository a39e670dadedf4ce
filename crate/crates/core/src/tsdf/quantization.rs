use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mesh_to_tsdf, surface_shell, TsdfVolume};
use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, Vec3, VolumeSpec};
use crate::sparsevol::trilinear_sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationResult {
    /// Mean |TSDF| interpolated at surface samples (cm).
    pub mean_abs_error: f64,
    pub n_effective: usize,
    pub skipped: usize,
}

/// One row of the resolution sweep CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub resolution: u32,
    pub mean_error_cm: f64,
    pub n_effective_samples: usize,
}

/// Area-weighted uniform surface samples, reproducible for a given seed.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<Vec3> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let t = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let [a, b, c] = mesh.corners(t);
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect()
}

/// Mean `|trilinear(tsdf, p)|` over area-uniform surface points `p`. The true
/// TSDF on the surface is zero, so this is the discretisation error.
///
/// Samples outside the cube, or whose interpolation stencil touches an
/// inactive vertex, are skipped; more than 1% skipped is a coverage error.
pub fn quantization_error(
    mesh: &TriangleMesh,
    tsdf: &TsdfVolume,
    n_samples: usize,
    seed: u64,
) -> Result<QuantizationResult> {
    if n_samples < 1000 {
        return Err(Error::Config(format!(
            "quantization study needs at least 1000 samples, got {n_samples}"
        )));
    }
    let samples = sample_surface(mesh, n_samples, seed);
    if samples.is_empty() {
        return Err(Error::Validation {
            message: "mesh has zero surface area".into(),
            edges: Vec::new(),
        });
    }
    let spec = *tsdf.spec();
    let active = tsdf.active();
    let errors: Vec<Option<f64>> = samples
        .par_iter()
        .map(|p| {
            if !spec.contains(p) {
                return None;
            }
            let c = spec.lattice_coords(p);
            let base = [c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64];
            for k in 0..8i64 {
                let idx = [base[0] + (k >> 2 & 1), base[1] + (k >> 1 & 1), base[2] + (k & 1)];
                if active.rank_signed(idx).is_none() {
                    return None;
                }
            }
            trilinear_sample(tsdf.field(), p).ok().map(|v| v[0].abs())
        })
        .collect();
    let skipped = errors.iter().filter(|e| e.is_none()).count();
    if skipped * 100 > samples.len() {
        return Err(Error::Coverage {
            skipped,
            total: samples.len(),
        });
    }
    // canonical-order reduction
    let (sum, n) = errors
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    Ok(QuantizationResult {
        mean_abs_error: sum / n as f64,
        n_effective: n,
        skipped,
    })
}

/// Sweeps resolutions over a fixed cube: for each `R`, builds the exact TSDF
/// on the lattice vertices near the surface and measures
/// [`quantization_error`].
pub fn quantization_study(
    mesh: &TriangleMesh,
    center: Vec3,
    edge_length: f64,
    resolutions: &[u32],
    truncation: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    resolutions
        .iter()
        .map(|&r| {
            let spec = VolumeSpec::centered(center, edge_length, r)?;
            // every corner of a cell containing a surface point is within a cell diagonal
            let radius = spec.spacing() * 3f64.sqrt() * (1.0 + 1e-9);
            let shell = Arc::new(surface_shell(&spec, mesh, radius)?);
            log::info!("quantization R={r}: {} shell vertices", shell.len());
            let tsdf = mesh_to_tsdf(mesh, shell, truncation)?;
            let q = quantization_error(mesh, &tsdf, n_samples, seed)?;
            Ok(StudyRow {
                resolution: r,
                mean_error_cm: q.mean_abs_error,
                n_effective_samples: q.n_effective,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsevol::{ActiveSet, SparseField};
    use crate::synth::shapes;

    #[test]
    fn rejects_too_few_samples() {
        let mesh = shapes::icosphere(10.0, 1);
        let spec = VolumeSpec::centered(Vec3::zeros(), 30.0, 8).unwrap();
        let field = SparseField::constant(Arc::new(ActiveSet::dense(spec)), 1, 0.0, 5.0);
        let tsdf = TsdfVolume::new(field, 5.0).unwrap();
        assert!(matches!(quantization_error(&mesh, &tsdf, 999, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uncovered_mesh_is_a_coverage_error() {
        let mesh = shapes::icosphere(10.0, 2);
        let spec = VolumeSpec::centered(Vec3::new(40.0, 0.0, 0.0), 30.0, 8).unwrap();
        let field = SparseField::constant(Arc::new(ActiveSet::dense(spec)), 1, 0.0, 5.0);
        let tsdf = TsdfVolume::new(field, 5.0).unwrap();
        assert!(matches!(quantization_error(&mesh, &tsdf, 1000, 0), Err(Error::Coverage { .. })));
    }

    #[test]
    fn samples_are_on_surface_and_reproducible() {
        let mesh = shapes::icosphere(10.0, 3);
        let a = sample_surface(&mesh, 2000, 11);
        let b = sample_surface(&mesh, 2000, 11);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.norm() <= 10.0 + 1e-9 && p.norm() > 9.7));
    }

    #[test]
    fn error_decreases_with_resolution_on_sphere() {
        let mesh = shapes::icosphere(25.0, 4);
        let rows = quantization_study(&mesh, Vec3::new(0.37, -0.21, 0.13), 80.0, &[16, 32, 64, 128], 5.0, 4000, 3).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].mean_error_cm < w[0].mean_error_cm, "{rows:?}");
        }
    }
}
