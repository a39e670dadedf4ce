use rustc_hash::FxHashMap;

use super::Vec3;
use crate::error::{Error, Result};

/// Triangles smaller than this (cm²) are considered degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`.
    pub colors: Option<Vec<Vec3>>,
    /// Optional per-vertex unit normals.
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles,
            colors: None,
            normals: None,
        }
    }

    pub fn with_colors(mut self, colors: Vec<Vec3>) -> Self {
        self.colors = Some(colors);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalised face normal (length = 2 * area).
    pub fn face_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_cross(t).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive for closed meshes with outward winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Checks index bounds, finiteness and attribute lengths, then drops
    /// degenerate triangles. Returns how many triangles were removed.
    pub fn validate(&mut self) -> Result<usize> {
        let n = self.vertices.len();
        if let Some(t) = self
            .triangles
            .iter()
            .find(|t| t.iter().any(|&i| i as usize >= n))
        {
            return Err(Error::Validation {
                message: format!("triangle {t:?} references a vertex >= {n}"),
                edges: Vec::new(),
            });
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation {
                message: "non-finite vertex coordinate".into(),
                edges: Vec::new(),
            });
        }
        for (name, attr) in [("colors", &self.colors), ("normals", &self.normals)] {
            if let Some(a) = attr {
                if a.len() != n {
                    return Err(Error::Validation {
                        message: format!("{name} length {} != vertex count {n}", a.len()),
                        edges: Vec::new(),
                    });
                }
            }
        }
        let before = self.triangles.len();
        let keep: Vec<bool> = (0..before)
            .map(|t| self.triangle_area(t) > MIN_TRIANGLE_AREA)
            .collect();
        let mut i = 0;
        self.triangles.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        Ok(before - self.triangles.len())
    }

    /// Edges not shared by exactly two triangles, as sorted vertex pairs in
    /// ascending order.
    pub fn open_edges(&self) -> Vec<[u32; 2]> {
        let mut count: FxHashMap<[u32; 2], u32> = FxHashMap::default();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        let mut bad: Vec<[u32; 2]> = count
            .into_iter()
            .filter(|&(_, c)| c != 2)
            .map(|(e, _)| e)
            .collect();
        bad.sort_unstable();
        bad
    }

    pub fn edge_count(&self) -> usize {
        let mut edges: Vec<[u32; 2]> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| [t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3])]))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    /// V - E + F over vertices referenced by at least one triangle.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i as usize] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// Area-weighted vertex normals. Vertices whose accumulated normal has
    /// zero length fall back to `+z`.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            // the cross product is already area-weighted
            let n = self.face_cross(t);
            for &i in tri {
                acc[i as usize] += n;
            }
        }
        acc.into_iter()
            .map(|n| n.try_normalize(1e-300).unwrap_or_else(Vec3::z))
            .collect()
    }

    /// Returns normals from the mesh when present, otherwise computes them.
    pub fn normals_or_computed(&self) -> Vec<Vec3> {
        match &self.normals {
            Some(n) if n.len() == self.vertices.len() => n.clone(),
            _ => self.vertex_normals(),
        }
    }

    /// Applies `p -> rotation * p + translation` to positions and rotates normals.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: &Vec3) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = rotation * *v + translation;
        }
        if let Some(ns) = &mut out.normals {
            for n in ns {
                *n = rotation * *n;
            }
        }
        out
    }

    /// Uniform scale about the origin.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v *= s;
        }
        out
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.triangles {
            t.swap(1, 2);
        }
        out
    }

    /// Rescales about the bounding-box floor centre so the vertical (y)
    /// extent becomes `target_height`.
    pub fn normalize_height(&self, target_height: f64) -> Self {
        let Some((lo, hi)) = self.bounding_box() else {
            return self.clone();
        };
        let h = hi.y - lo.y;
        if h <= 0.0 {
            return self.clone();
        }
        let s = target_height / h;
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = (*v - lo) * s;
        }
        out
    }

    /// Barycentric interpolation of per-vertex colours on triangle `t`.
    pub fn color_at(&self, t: usize, bary: &Vec3) -> Option<Vec3> {
        let colors = self.colors.as_ref()?;
        let [a, b, c] = self.triangles[t];
        Some(colors[a as usize] * bary.x + colors[b as usize] * bary.y + colors[c as usize] * bary.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_cube() -> TriangleMesh {
        let v = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        // outward-wound quads, split along the diagonal joining even-parity corners
        let quads = [
            [0, 2, 3, 1], // z = 0
            [5, 7, 6, 4], // z = 1
            [0, 1, 5, 4], // y = 0
            [6, 7, 3, 2], // y = 1
            [0, 4, 6, 2], // x = 0
            [3, 7, 5, 1], // x = 1
        ];
        let tris = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleMesh::new(v, tris)
    }

    #[test]
    fn cube_is_closed_and_outward() {
        let cube = unit_cube();
        assert!(cube.open_edges().is_empty());
        assert!((cube.signed_volume() - 1.0).abs() < 1e-12);
        assert_eq!(cube.euler_characteristic(), 2);
    }

    #[test]
    fn cube_vertex_normals_are_diagonals() {
        let cube = unit_cube();
        let normals = cube.vertex_normals();
        let center = Vec3::repeat(0.5);
        for (v, n) in cube.vertices.iter().zip(&normals) {
            // every corner meets the same number of triangles on each of its faces
            let expected = (v - center).normalize();
            assert!((n - expected).norm() < 1e-12, "{n:?} vs {expected:?}");
            assert!((n.iter().map(|c| c.abs()).sum::<f64>() - 3.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_triangle_normals() {
        let mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 0.0, -1.0)],
            vec![[0, 1, 2]],
        );
        let face = mesh.face_cross(0).normalize();
        for n in mesh.vertex_normals() {
            assert!((n - face).norm() < 1e-15);
        }
    }

    #[test]
    fn isolated_vertex_gets_fallback_normal() {
        let mut mesh = unit_cube();
        mesh.vertices.push(Vec3::new(9.0, 9.0, 9.0));
        assert_eq!(*mesh.vertex_normals().last().unwrap(), Vec3::z());
    }

    #[test]
    fn validate_drops_degenerates_and_checks_indices() {
        let mut mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::x() * 2.0],
            vec![[0, 1, 2], [0, 1, 3]],
        );
        assert_eq!(mesh.validate().unwrap(), 1);
        assert_eq!(mesh.triangles, vec![[0, 1, 2]]);
        mesh.triangles.push([0, 1, 9]);
        assert!(matches!(mesh.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn open_edges_reported() {
        let mut cube = unit_cube();
        cube.triangles.pop();
        assert_eq!(cube.open_edges().len(), 3);
    }
}
