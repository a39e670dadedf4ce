//! Ground-truth TSDF generation, the discretisation (quantisation) error
//! study, and marching-cubes surface extraction.
//!
//! Sign convention: positive outside, negative inside, all values clamped to
//! `[-truncation, +truncation]`.

mod marching_cubes;
mod mc_tables;
mod quantization;

pub use quantization::{quantization_error, quantization_study, sample_surface, QuantizationResult, StudyRow};

pub(crate) use marching_cubes::polygonize;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GridIndex, TriangleMesh, VolumeSpec};
use crate::spatial::{closest_point_on_triangle, ParityIndex, TriangleIndex};
use crate::sparsevol::{pack, trilinear_sample, ActiveSet, SparseField};

/// Default truncation distance (cm).
pub const DEFAULT_TRUNCATION: f64 = 5.0;

/// A single-channel sparse signed distance field in centimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    field: SparseField,
    truncation: f64,
}

impl TsdfVolume {
    /// Wraps a field, checking it is single-channel and within the band.
    /// The field's fill value is reset to `+truncation`.
    pub fn new(field: SparseField, truncation: f64) -> Result<Self> {
        if field.channels() != 1 {
            return Err(Error::Config("a TSDF has exactly one channel".into()));
        }
        if !(truncation > 0.0) {
            return Err(Error::Config("truncation must be positive".into()));
        }
        if let Some(v) = field
            .values()
            .iter()
            .find(|v| !(v.abs() <= truncation))
        {
            return Err(Error::OutOfRange(format!(
                "TSDF value {v} outside ±{truncation}"
            )));
        }
        Ok(Self {
            field: field.with_fill(truncation),
            truncation,
        })
    }

    /// Clamps raw values into the band before wrapping.
    pub fn from_clamped(field: SparseField, truncation: f64) -> Result<Self> {
        let mut field = field;
        for v in field.values_mut() {
            *v = v.clamp(-truncation, truncation);
        }
        Self::new(field, truncation)
    }

    pub fn field(&self) -> &SparseField {
        &self.field
    }

    pub fn into_field(self) -> SparseField {
        self.field
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        self.field.active()
    }

    pub fn spec(&self) -> &VolumeSpec {
        self.field.active().spec()
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }
}

/// Validation knobs for [`mesh_to_tsdf_with`].
#[derive(Debug, Clone, Copy)]
pub struct SdfOptions {
    /// Largest number of boundary / non-manifold edges tolerated.
    pub max_open_edges: usize,
}

impl Default for SdfOptions {
    fn default() -> Self {
        Self { max_open_edges: 0 }
    }
}

/// Ground-truth TSDF at every active site: `sign * min(distance, truncation)`
/// with the sign from a three-axis ray-parity majority vote.
pub fn mesh_to_tsdf(mesh: &TriangleMesh, active: Arc<ActiveSet>, truncation: f64) -> Result<TsdfVolume> {
    mesh_to_tsdf_with(mesh, active, truncation, &SdfOptions::default())
}

pub fn mesh_to_tsdf_with(
    mesh: &TriangleMesh,
    active: Arc<ActiveSet>,
    truncation: f64,
    options: &SdfOptions,
) -> Result<TsdfVolume> {
    if active.is_empty() {
        return Err(Error::Config("cannot build a TSDF on an empty active set".into()));
    }
    if !(truncation > 0.0) {
        return Err(Error::Config("truncation must be positive".into()));
    }
    if mesh.is_empty() {
        return Err(Error::Validation {
            message: "mesh has no triangles".into(),
            edges: Vec::new(),
        });
    }
    let open = mesh.open_edges();
    if open.len() > options.max_open_edges {
        return Err(Error::Validation {
            message: format!(
                "mesh is not watertight: {} open or non-manifold edges (tolerance {})",
                open.len(),
                options.max_open_edges
            ),
            edges: open,
        });
    }
    let index = TriangleIndex::new(mesh);
    let parity = ParityIndex::new(mesh);
    let spec = *active.spec();
    let values: Vec<f64> = active
        .sites()
        .par_iter()
        .map(|&s| {
            let p = spec.position(s);
            let d = index
                .nearest(&p, truncation)
                .map_or(truncation, |n| n.distance.min(truncation));
            if parity.is_inside(&p) {
                -d
            } else {
                d
            }
        })
        .collect();
    TsdfVolume::new(SparseField::new(active, 1, values, truncation)?, truncation)
}

/// Lattice vertices within `radius` of the mesh surface.
pub fn surface_shell(spec: &VolumeSpec, mesh: &TriangleMesh, radius: f64) -> Result<ActiveSet> {
    let r = spec.resolution as i64;
    let h = spec.spacing();
    let mut keys: Vec<u64> = (0..mesh.triangles.len())
        .into_par_iter()
        .flat_map_iter(|t| {
            let [a, b, c] = mesh.corners(t);
            let lo = a.inf(&b).inf(&c);
            let hi = a.sup(&b).sup(&c);
            let range = |axis: usize| {
                let l = ((lo[axis] - radius - spec.origin[axis]) / h - 0.5).ceil() as i64;
                let u = ((hi[axis] + radius - spec.origin[axis]) / h - 0.5).floor() as i64;
                (l.max(0), u.min(r - 1))
            };
            let (rx, ry, rz) = (range(0), range(1), range(2));
            let mut out = Vec::new();
            for x in rx.0..=rx.1 {
                for y in ry.0..=ry.1 {
                    for z in rz.0..=rz.1 {
                        let idx: GridIndex = [x as u32, y as u32, z as u32];
                        let p = spec.position(idx);
                        let (q, _) = closest_point_on_triangle(&p, &a, &b, &c);
                        if (p - q).norm() <= radius {
                            out.push(pack(idx));
                        }
                    }
                }
            }
            out
        })
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    let mask = (1u64 << 21) - 1;
    let sites = keys
        .into_iter()
        .map(|k| [(k >> 42) as u32, (k >> 21 & mask) as u32, (k & mask) as u32])
        .collect();
    Ok(ActiveSet::from_sorted_unchecked(*spec, sites))
}

/// Marching cubes over every cell touching an active site.
///
/// Corners missing from the active set take the trilinear value of
/// `coarse_fallback` (clamped to ± its truncation) when given, else
/// `+truncation`. Normals of the result point toward positive values.
pub fn extract_mesh(tsdf: &TsdfVolume, coarse_fallback: Option<&TsdfVolume>) -> Result<TriangleMesh> {
    if tsdf.is_empty() {
        return Err(Error::EmptyMesh("TSDF has no active sites".into()));
    }
    let spec = *tsdf.spec();
    if let Some(fb) = coarse_fallback {
        if !fb.spec().same_cube(&spec) {
            return Err(Error::Config("coarse fallback covers a different cube".into()));
        }
    }
    if spec.resolution < 2 {
        return Ok(TriangleMesh::default());
    }
    let max_cell = spec.resolution as i64 - 2;
    let mut cells: Vec<u64> = tsdf
        .active()
        .sites()
        .par_iter()
        .flat_map_iter(|&s| {
            (0..8).filter_map(move |k| {
                let c = [
                    s[0] as i64 - (k >> 2 & 1),
                    s[1] as i64 - (k >> 1 & 1),
                    s[2] as i64 - (k & 1),
                ];
                c.iter()
                    .all(|&v| (0..=max_cell).contains(&v))
                    .then(|| pack([c[0] as u32, c[1] as u32, c[2] as u32]))
            })
        })
        .collect();
    cells.par_sort_unstable();
    cells.dedup();
    let mask = (1u64 << 21) - 1;
    let cells: Vec<GridIndex> = cells
        .into_iter()
        .map(|k| [(k >> 42) as u32, (k >> 21 & mask) as u32, (k & mask) as u32])
        .collect();

    let field = tsdf.field();
    let trunc = tsdf.truncation();
    let corner = |idx: GridIndex| -> f64 {
        if let Some(r) = field.active().rank(idx) {
            return field.values()[r as usize];
        }
        match coarse_fallback {
            Some(fb) => trilinear_sample(fb.field(), &spec.position(idx))
                .map(|v| v[0].clamp(-fb.truncation(), fb.truncation()))
                .unwrap_or(trunc),
            None => trunc,
        }
    };
    Ok(polygonize(&spec, &cells, corner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::sparsevol::narrow_band;
    use crate::synth::shapes;

    fn sphere_tsdf(spec: VolumeSpec, radius: f64, trunc: f64, active: Arc<ActiveSet>) -> TsdfVolume {
        let _ = spec;
        let field = SparseField::from_fn(active, 1, trunc, |_, p, out| {
            out[0] = (p.norm() - radius).clamp(-trunc, trunc)
        });
        TsdfVolume::new(field, trunc).unwrap()
    }

    #[test]
    fn sphere_center_value() {
        let mesh = shapes::icosphere(20.0, 3);
        let spec = VolumeSpec::new(Vec3::repeat(-1.5), 3.0, 3).unwrap();
        let set = Arc::new(ActiveSet::dense(spec));
        let tsdf = mesh_to_tsdf(&mesh, set.clone(), 5.0).unwrap();
        let center = set.rank([1, 1, 1]).unwrap() as usize;
        assert_eq!(tsdf.values()[center], -5.0);
        let deep = mesh_to_tsdf(&mesh, set.clone(), 50.0).unwrap();
        // icosphere faces sit slightly inside the circumscribed radius
        let v = deep.values()[center];
        assert!(v < -19.0 && v > -20.0, "{v}");
    }

    #[test]
    fn open_mesh_rejected_with_edges() {
        let mut mesh = shapes::icosphere(10.0, 1);
        mesh.triangles.pop();
        let spec = VolumeSpec::centered(Vec3::zeros(), 30.0, 4).unwrap();
        let err = mesh_to_tsdf(&mesh, Arc::new(ActiveSet::dense(spec)), 5.0).unwrap_err();
        match err {
            Error::Validation { edges, .. } => assert_eq!(edges.len(), 3),
            e => panic!("unexpected {e}"),
        }
        let ok = mesh_to_tsdf_with(
            &mesh,
            Arc::new(ActiveSet::dense(spec)),
            5.0,
            &SdfOptions { max_open_edges: 3 },
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn sign_flips_once_along_a_ray() {
        let mesh = shapes::icosphere(12.0, 3);
        let spec = VolumeSpec::centered(Vec3::new(0.31, -0.17, 0.05), 40.0, 40).unwrap();
        let row: Vec<GridIndex> = (0..40).map(|w| [w, 20, 19]).collect();
        let set = Arc::new(ActiveSet::from_sites(spec, row).unwrap());
        let tsdf = mesh_to_tsdf(&mesh, set, 5.0).unwrap();
        let signs: Vec<bool> = tsdf.values().iter().map(|&v| v < 0.0).collect();
        let flips = signs.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(flips, 2, "entering and leaving the sphere");
    }

    #[test]
    fn dense_sphere_extraction_is_accurate() {
        let spec = VolumeSpec::centered(Vec3::zeros(), 100.0, 64).unwrap();
        let h = spec.spacing();
        let tsdf = sphere_tsdf(spec, 30.0, 5.0, Arc::new(ActiveSet::dense(spec)));
        let mesh = extract_mesh(&tsdf, None).unwrap();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v.norm() - 30.0).abs() < h / 2.0);
        }
        assert!(mesh.signed_volume() > 0.0, "outward orientation");
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn all_positive_field_yields_empty_mesh() {
        let spec = VolumeSpec::centered(Vec3::zeros(), 10.0, 8).unwrap();
        let field = SparseField::constant(Arc::new(ActiveSet::dense(spec)), 1, 2.0, 5.0);
        let tsdf = TsdfVolume::new(field, 5.0).unwrap();
        assert!(extract_mesh(&tsdf, None).unwrap().is_empty());
    }

    #[test]
    fn empty_tsdf_is_an_error() {
        let spec = VolumeSpec::centered(Vec3::zeros(), 10.0, 8).unwrap();
        let empty = Arc::new(ActiveSet::from_sites(spec, vec![]).unwrap());
        let tsdf = TsdfVolume::new(SparseField::new(empty, 1, vec![], 5.0).unwrap(), 5.0).unwrap();
        assert!(matches!(extract_mesh(&tsdf, None), Err(Error::EmptyMesh(_))));
    }

    #[test]
    fn band_extraction_with_fallback_is_watertight() {
        let coarse_spec = VolumeSpec::centered(Vec3::zeros(), 100.0, 32).unwrap();
        let coarse = sphere_tsdf(coarse_spec, 30.0, 5.0, Arc::new(ActiveSet::dense(coarse_spec)));
        let fine_spec = coarse_spec.doubled();
        let fine_dense = sphere_tsdf(fine_spec, 30.0, 5.0, Arc::new(ActiveSet::dense(fine_spec)));
        let band = Arc::new(narrow_band(fine_dense.field(), 3.0).unwrap());
        let fine = TsdfVolume::new(fine_dense.field().restrict(band).unwrap(), 5.0).unwrap();
        let with = extract_mesh(&fine, Some(&coarse)).unwrap();
        assert!(with.open_edges().is_empty());
        assert_eq!(with.euler_characteristic(), 2);
        // without a fallback the inner band boundary produces a phantom wall
        let without = extract_mesh(&fine, None).unwrap();
        assert_ne!(without.euler_characteristic(), 2);
    }

    #[test]
    fn surface_shell_matches_brute_force() {
        let mesh = shapes::icosphere(7.0, 2);
        let spec = VolumeSpec::centered(Vec3::new(0.2, 0.1, -0.3), 20.0, 20).unwrap();
        let radius = spec.spacing() * 3f64.sqrt();
        let shell = surface_shell(&spec, &mesh, radius).unwrap();
        let brute = ActiveSet::dense(spec).filter(|_, s| {
            crate::spatial::nearest_exhaustive(&mesh, &spec.position(s)).unwrap().distance <= radius
        });
        assert_eq!(shell, brute);
    }
}
