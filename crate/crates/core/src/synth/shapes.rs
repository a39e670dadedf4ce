//! Procedural test meshes.

use rustc_hash::FxHashMap;

use crate::geometry::{TriangleMesh, Vec3, VolumeSpec};
use crate::tsdf::polygonize;

/// Geodesic sphere from a subdivided icosahedron; vertices lie exactly on
/// the sphere, faces wind outward.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: FxHashMap<(u32, u32), u32> = FxHashMap::default();
        let mut mid = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = ((vertices[a as usize] + vertices[b as usize]) / 2.0).normalize();
                vertices.push(m);
                (vertices.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriangleMesh::new(vertices.into_iter().map(|v| v * radius).collect(), faces)
}

/// Axis-aligned box with outward winding.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriangleMesh {
    let v = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 1 { hi.x } else { lo.x },
                if i & 2 == 2 { hi.y } else { lo.y },
                if i & 4 == 4 { hi.z } else { lo.z },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1],
        [5, 7, 6, 4],
        [0, 1, 5, 4],
        [6, 7, 3, 2],
        [0, 4, 6, 2],
        [3, 7, 5, 1],
    ];
    let tris = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh::new(v, tris)
}

/// Square of side `size` in the plane through `center` with unit `normal`,
/// split into two triangles whose winding faces `normal`.
pub fn quad(center: Vec3, normal: Vec3, size: f64) -> TriangleMesh {
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize() * (size / 2.0);
    let v = n.cross(&u);
    let vertices = vec![center - u - v, center + u - v, center + u + v, center - u + v];
    let mut mesh = TriangleMesh::new(vertices, vec![[0, 1, 2], [0, 2, 3]]);
    if mesh.face_cross(0).dot(&n) < 0.0 {
        mesh = mesh.flipped();
    }
    mesh
}

/// Smooth colour pattern: warm/cool hemispheres along z with latitude and
/// longitude bands of period `period` cm.
pub fn banded_color(p: &Vec3, period: f64) -> Vec3 {
    let k = 2.0 * std::f64::consts::PI / period;
    let side = if p.z >= 0.0 { Vec3::new(0.85, 0.35, 0.2) } else { Vec3::new(0.2, 0.4, 0.85) };
    let band = 0.5 + 0.5 * (k * p.y).sin() * (k * p.x).cos();
    (side * (0.55 + 0.45 * band)).map(|c| c.clamp(0.0, 1.0))
}

/// Icosphere with vertex colours from [`banded_color`].
pub fn painted_sphere(radius: f64, subdivisions: u32, period: f64) -> TriangleMesh {
    let mesh = icosphere(radius, subdivisions);
    let colors = mesh.vertices.iter().map(|v| banded_color(v, period)).collect();
    mesh.with_colors(colors)
}

struct Capsule {
    a: Vec3,
    b: Vec3,
    radius: f64,
}

impl Capsule {
    fn new(a: [f64; 3], b: [f64; 3], radius: f64) -> Self {
        Self {
            a: Vec3::from(a),
            b: Vec3::from(b),
            radius,
        }
    }

    fn distance(&self, p: &Vec3) -> f64 {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared().max(1e-12)).clamp(0.0, 1.0);
        (p - (self.a + ab * t)).norm() - self.radius
    }
}

fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k / 4.0
}

fn humanoid_parts() -> Vec<Capsule> {
    let mut parts = vec![
        Capsule::new([0.0, 72.0, 0.0], [0.0, 72.5, 0.5], 10.0), // head
        Capsule::new([0.0, 56.0, 0.0], [0.0, 63.0, 0.0], 5.0),  // neck
        Capsule::new([0.0, 10.0, 0.0], [0.0, 42.0, 0.0], 12.5), // torso
        Capsule::new([-7.0, 4.0, 0.0], [7.0, 4.0, 0.0], 10.5),  // pelvis
    ];
    for s in [-1.0, 1.0] {
        parts.extend([
            Capsule::new([s * 9.0, 46.0, 0.0], [s * 15.0, 47.0, 0.0], 6.0), // shoulder
            Capsule::new([s * 17.0, 45.0, 0.0], [s * 23.0, 19.0, 1.0], 4.6),  // upper arm
            Capsule::new([s * 23.0, 19.0, 1.0], [s * 26.0, -6.0, 4.0], 3.8),  // forearm
            Capsule::new([s * 26.5, -9.0, 4.5], [s * 27.0, -14.0, 5.0], 3.6), // hand
            Capsule::new([s * 8.0, 0.0, 0.0], [s * 9.0, -38.0, 1.0], 7.0),  // thigh
            Capsule::new([s * 9.0, -38.0, 1.0], [s * 9.5, -76.0, -1.5], 5.2), // shin
            Capsule::new([s * 9.5, -80.0, -3.0], [s * 10.0, -81.0, 9.0], 4.0), // foot
        ]);
    }
    parts
}

/// Signed distance (approximate, smooth union of capsules) of the built-in humanoid.
pub fn humanoid_sdf(p: &Vec3) -> f64 {
    // flatten the body front-to-back
    let q = Vec3::new(p.x, p.y, p.z / 0.7);
    humanoid_parts()
        .iter()
        .map(|c| c.distance(&q))
        .fold(f64::INFINITY, |acc, d| if acc.is_finite() { smooth_min(acc, d, 3.0) } else { d })
}

/// A 170 cm, roughly human-proportioned closed mesh standing upright (+y) and
/// centred on the origin. Built by polygonising [`humanoid_sdf`] on a
/// 1.1 cm lattice whose offset avoids alignment with common grid spacings.
pub fn humanoid() -> TriangleMesh {
    humanoid_with_spacing(1.1)
}

pub fn humanoid_with_spacing(spacing: f64) -> TriangleMesh {
    let parts = humanoid_parts();
    let lo = Vec3::new(-40.0, -90.0, -25.0);
    let hi = Vec3::new(40.0, 88.0, 25.0);
    let origin = lo - Vec3::new(0.3137, 0.2718, 0.1419);
    let n = (((hi - origin).max()) / spacing).ceil() as u32 + 2;
    let spec = VolumeSpec::new(origin, n as f64 * spacing, n).expect("valid lattice");
    let dims = [0, 1, 2].map(|a| (((hi[a] - origin[a]) / spacing).ceil() as u32 + 1).min(n));
    let flat = |i: [u32; 3]| ((i[0] * dims[1] + i[1]) * dims[2] + i[2]) as usize;
    let mut values = vec![0.0; (dims[0] * dims[1] * dims[2]) as usize];
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = spec.position([x, y, z]);
                let q = Vec3::new(p.x, p.y, p.z / 0.7);
                let d = parts
                    .iter()
                    .map(|c| c.distance(&q))
                    .fold(f64::INFINITY, |acc, d| if acc.is_finite() { smooth_min(acc, d, 3.0) } else { d });
                values[flat([x, y, z])] = d;
            }
        }
    }
    let mut cells = Vec::new();
    for x in 0..dims[0] - 1 {
        for y in 0..dims[1] - 1 {
            for z in 0..dims[2] - 1 {
                cells.push([x, y, z]);
            }
        }
    }
    let mut mesh = polygonize(&spec, &cells, |i| values[flat(i)]);
    mesh.validate().expect("well-formed polygonisation");
    mesh
}
