//! Uniform bucket grids over mesh triangles: nearest-surface queries, ray
//! casting and axis-aligned crossing counts for inside/outside tests.
//!
//! Every query is output-identical to an exhaustive loop over all triangles:
//! ties are broken by `(distance, triangle index)` so acceleration never
//! changes which triangle wins.

use crate::geometry::{TriangleMesh, Vec3};

/// Closest point on triangle `abc` to `p`, with barycentric weights.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, Vec3) {
    // Ericson, Real-Time Collision Detection, 5.1.5
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, Vec3::new(1.0, 0.0, 0.0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, Vec3::new(0.0, 1.0, 0.0));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, Vec3::new(1.0 - v, v, 0.0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, Vec3::new(0.0, 0.0, 1.0));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, Vec3::new(1.0 - w, 0.0, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, Vec3::new(0.0, 1.0 - w, w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Vec3::new(1.0 - v - w, v, w))
}

/// Double-sided Möller–Trumbore. Returns `(t, u, v)` with the hit at
/// `a + u (b - a) + v (c - a)`.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, f64, f64)> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = origin - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = dir.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    Some((t, u, v))
}

/// Result of a nearest-surface query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nearest {
    pub triangle: u32,
    pub point: Vec3,
    pub bary: Vec3,
    pub distance: f64,
}

impl Nearest {
    #[inline]
    fn better_than(&self, other: &Nearest) -> bool {
        (self.distance, self.triangle) < (other.distance, other.triangle)
    }
}

/// Result of a ray cast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: u32,
    /// Barycentric weights of the three triangle corners.
    pub bary: Vec3,
}

/// Nearest triangle to `p` by exhaustive search. Exposed so callers with tiny
/// meshes can skip building an index.
pub fn nearest_exhaustive(mesh: &TriangleMesh, p: &Vec3) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let (q, bary) = closest_point_on_triangle(p, &a, &b, &c);
        let cand = Nearest {
            triangle: t as u32,
            point: q,
            bary,
            distance: (p - q).norm(),
        };
        if best.as_ref().map_or(true, |b| cand.better_than(b)) {
            best = Some(cand);
        }
    }
    best
}

/// 3D bucket grid for nearest-point and ray queries.
pub struct TriangleIndex<'m> {
    mesh: &'m TriangleMesh,
    lo: Vec3,
    hi: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'m> TriangleIndex<'m> {
    pub fn new(mesh: &'m TriangleMesh) -> Self {
        let (lo, hi) = mesh
            .bounding_box()
            .unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let n = mesh.triangles.len().max(1);
        let mean_edge = if mesh.triangles.is_empty() {
            1.0
        } else {
            mesh.triangles
                .iter()
                .map(|t| (mesh.vertices[t[0] as usize] - mesh.vertices[t[1] as usize]).norm())
                .sum::<f64>()
                / n as f64
        };
        let ext = hi - lo;
        let max_ext = ext.max().max(1e-9);
        let mut cell = (2.0 * mean_edge).max(max_ext / 256.0).max(1e-9);
        // keep total cell count bounded for pathological inputs
        loop {
            let cells: f64 = (0..3).map(|a| (ext[a] / cell).floor() + 1.0).product();
            if cells <= 8.0 * n as f64 + 64.0 || cells <= 1.0 {
                break;
            }
            cell *= 1.25;
        }
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).max(1));
        let mut index = Self {
            mesh,
            lo,
            hi,
            cell,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        index.fill();
        index
    }

    fn fill(&mut self) {
        let total = self.dims.iter().product::<usize>();
        let mut counts = vec![0u32; total + 1];
        let ranges: Vec<([usize; 3], [usize; 3])> = (0..self.mesh.triangles.len())
            .map(|t| {
                let [a, b, c] = self.mesh.corners(t);
                let lo = a.inf(&b).inf(&c);
                let hi = a.sup(&b).sup(&c);
                (self.cell_of(&lo), self.cell_of(&hi))
            })
            .collect();
        for (lo, hi) in &ranges {
            for_each_cell(*lo, *hi, |c| counts[self.flat(c)] += 1);
        }
        let mut starts = vec![0u32; total + 1];
        for i in 0..total {
            starts[i + 1] = starts[i] + counts[i];
        }
        let mut cursor = starts.clone();
        let mut items = vec![0u32; starts[total] as usize];
        for (t, (lo, hi)) in ranges.iter().enumerate() {
            for_each_cell(*lo, *hi, |c| {
                let f = self.flat(c);
                items[cursor[f] as usize] = t as u32;
                cursor[f] += 1;
            });
        }
        self.starts = starts;
        self.items = items;
    }

    pub fn mesh(&self) -> &'m TriangleMesh {
        self.mesh
    }

    #[inline]
    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    #[inline]
    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let f = ((p[a] - self.lo[a]) / self.cell).floor();
            (f.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    #[inline]
    fn cell_items(&self, c: [usize; 3]) -> &[u32] {
        let f = self.flat(c);
        &self.items[self.starts[f] as usize..self.starts[f + 1] as usize]
    }

    /// Nearest triangle within `max_distance` (inclusive), identical to
    /// [`nearest_exhaustive`] whenever that result is within range.
    pub fn nearest(&self, p: &Vec3, max_distance: f64) -> Option<Nearest> {
        if self.mesh.triangles.is_empty() {
            return None;
        }
        let clamped = p.sup(&self.lo).inf(&self.hi);
        let outside = (p - clamped).norm_squared();
        let center = self.cell_of(&clamped);
        let max_ring = self.dims.iter().copied().max().unwrap();
        let mut best: Option<Nearest> = None;
        for ring in 0..=max_ring {
            let gap = ring.saturating_sub(1) as f64 * self.cell;
            let bound = (gap * gap + outside).sqrt();
            if bound > max_distance {
                break;
            }
            if let Some(b) = &best {
                if b.distance < bound {
                    break;
                }
            }
            self.for_ring(center, ring, |c| {
                for &t in self.cell_items(c) {
                    let [a, b, cc] = self.mesh.corners(t as usize);
                    let (q, bary) = closest_point_on_triangle(p, &a, &b, &cc);
                    let cand = Nearest {
                        triangle: t,
                        point: q,
                        bary,
                        distance: (p - q).norm(),
                    };
                    if best.as_ref().map_or(true, |b| cand.better_than(b)) {
                        best = Some(cand);
                    }
                }
            });
        }
        best.filter(|b| b.distance <= max_distance)
    }

    fn for_ring(&self, center: [usize; 3], ring: usize, mut f: impl FnMut([usize; 3])) {
        let r = ring as i64;
        let lo = center.map(|c| c as i64 - r);
        let hi = center.map(|c| c as i64 + r);
        let clamp_lo = |a: usize| lo[a].max(0) as usize;
        let clamp_hi = |a: usize| (hi[a].min(self.dims[a] as i64 - 1)).max(-1);
        for x in clamp_lo(0) as i64..=clamp_hi(0) {
            for y in clamp_lo(1) as i64..=clamp_hi(1) {
                let on_xy_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1];
                if on_xy_shell {
                    for z in clamp_lo(2) as i64..=clamp_hi(2) {
                        f([x as usize, y as usize, z as usize]);
                    }
                } else {
                    for z in [lo[2], hi[2]] {
                        if z >= 0 && z < self.dims[2] as i64 {
                            f([x as usize, y as usize, z as usize]);
                        }
                    }
                }
            }
        }
    }

    /// Closest hit with `t >= t_min` along `origin + t * dir`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<RayHit> {
        if self.mesh.triangles.is_empty() {
            return None;
        }
        // slab test against the grid bounds (slightly padded)
        let pad = Vec3::repeat(1e-9 * (1.0 + self.cell));
        let box_lo = self.lo - pad;
        let box_hi = self.lo + Vec3::new(
            self.dims[0] as f64 * self.cell,
            self.dims[1] as f64 * self.cell,
            self.dims[2] as f64 * self.cell,
        ) + pad;
        let mut t0 = t_min;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < box_lo[a] || origin[a] > box_hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((box_lo[a] - origin[a]) * inv, (box_hi[a] - origin[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 > t1 {
            return None;
        }
        let start = origin + dir * t0;
        let mut cell = self.cell_of(&start).map(|c| c as i64);
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            if dir[a] > 0.0 {
                step[a] = 1;
                let boundary = self.lo[a] + (cell[a] + 1) as f64 * self.cell;
                t_next[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = self.cell / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                let boundary = self.lo[a] + cell[a] as f64 * self.cell;
                t_next[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = -self.cell / dir[a];
            }
        }
        let mut best: Option<RayHit> = None;
        loop {
            let c = cell.map(|v| v as usize);
            for &t in self.cell_items(c) {
                let [a, b, cc] = self.mesh.corners(t as usize);
                if let Some((th, u, v)) = ray_triangle(origin, dir, &a, &b, &cc) {
                    if th >= t_min {
                        let cand = RayHit {
                            t: th,
                            triangle: t,
                            bary: Vec3::new(1.0 - u - v, u, v),
                        };
                        if best.map_or(true, |b| (cand.t, cand.triangle) < (b.t, b.triangle)) {
                            best = Some(cand);
                        }
                    }
                }
            }
            let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            let exit = t_next[axis];
            if let Some(b) = best {
                // hits beyond this cell are also registered in later cells
                if b.t < exit {
                    return Some(b);
                }
            }
            if !exit.is_finite() {
                return best;
            }
            cell[axis] += step[axis];
            if cell[axis] < 0 || cell[axis] >= self.dims[axis] as i64 {
                return best;
            }
            t_next[axis] += t_delta[axis];
        }
    }
}

/// Exhaustive ray cast, same tie-breaking as [`TriangleIndex::raycast`].
pub fn raycast_exhaustive(mesh: &TriangleMesh, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        if let Some((th, u, v)) = ray_triangle(origin, dir, &a, &b, &c) {
            if th >= t_min && best.map_or(true, |bh| (th, t as u32) < (bh.t, bh.triangle)) {
                best = Some(RayHit {
                    t: th,
                    triangle: t as u32,
                    bary: Vec3::new(1.0 - u - v, u, v),
                });
            }
        }
    }
    best
}

fn for_each_cell(lo: [usize; 3], hi: [usize; 3], mut f: impl FnMut([usize; 3])) {
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                f([x, y, z]);
            }
        }
    }
}

/// If the ray `p + t e_axis` (t > 0) crosses triangle `t`, returns the
/// crossing coordinate. Points exactly on a shared edge or vertex are
/// attributed to exactly one of the adjacent triangles (top-left rule on
/// edges evaluated in a canonical vertex order).
pub fn axis_crossing(mesh: &TriangleMesh, t: usize, p: &Vec3, axis: usize) -> Option<f64> {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    let ids = mesh.triangles[t];
    let pos = |i: u32| {
        let v = mesh.vertices[i as usize];
        (v[b], v[c])
    };
    let q = (p[b], p[c]);
    // signed projected area from canonical edge functions
    let mut w = [0.0f64; 3];
    let mut dirs = [(0.0f64, 0.0f64); 3];
    for k in 0..3 {
        let (i, j) = (ids[(k + 1) % 3], ids[(k + 2) % 3]);
        let (lo, hi, sgn) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        let (lx, ly) = pos(lo);
        let (hx, hy) = pos(hi);
        let e = (hx - lx) * (q.1 - ly) - (hy - ly) * (q.0 - lx);
        w[k] = sgn * e;
        dirs[k] = (sgn * (hx - lx), sgn * (hy - ly));
    }
    let (p0, p1, p2) = (pos(ids[0]), pos(ids[1]), pos(ids[2]));
    let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p1.1 - p0.1) * (p2.0 - p0.0);
    if area == 0.0 {
        return None;
    }
    let s = area.signum();
    for k in 0..3 {
        let wk = w[k] * s;
        if wk < 0.0 {
            return None;
        }
        if wk == 0.0 {
            let (dx, dy) = (dirs[k].0 * s, dirs[k].1 * s);
            let top_left = dy < 0.0 || (dy == 0.0 && dx > 0.0);
            if !top_left {
                return None;
            }
        }
    }
    let sum = w[0] + w[1] + w[2];
    if sum == 0.0 {
        return None;
    }
    let coord: f64 = (0..3)
        .map(|k| w[k] / sum * mesh.vertices[ids[k] as usize][axis])
        .sum();
    (coord > p[axis]).then_some(coord)
}

/// Per-axis 2D bucket grids accelerating [`axis_crossing`] counts.
pub struct ParityIndex<'m> {
    mesh: &'m TriangleMesh,
    axes: [AxisGrid; 3],
}

struct AxisGrid {
    lo: (f64, f64),
    cell: f64,
    dims: (usize, usize),
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'m> ParityIndex<'m> {
    pub fn new(mesh: &'m TriangleMesh) -> Self {
        let axes = [0, 1, 2].map(|a| AxisGrid::new(mesh, a));
        Self { mesh, axes }
    }

    /// Number of surface crossings of the ray `p + t e_axis`, `t > 0`.
    pub fn crossings(&self, p: &Vec3, axis: usize) -> usize {
        let g = &self.axes[axis];
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let Some(cell) = g.cell_of(p[b], p[c]) else {
            return 0;
        };
        g.items_in(cell)
            .iter()
            .filter(|&&t| axis_crossing(self.mesh, t as usize, p, axis).is_some())
            .count()
    }

    /// Three-axis majority vote of ray parity.
    pub fn is_inside(&self, p: &Vec3) -> bool {
        let votes = (0..3).filter(|&a| self.crossings(p, a) % 2 == 1).count();
        votes >= 2
    }
}

/// Exhaustive version of [`ParityIndex::is_inside`].
pub fn is_inside_exhaustive(mesh: &TriangleMesh, p: &Vec3) -> bool {
    let votes = (0..3)
        .filter(|&a| {
            (0..mesh.triangles.len())
                .filter(|&t| axis_crossing(mesh, t, p, a).is_some())
                .count()
                % 2
                == 1
        })
        .count();
    votes >= 2
}

impl AxisGrid {
    fn new(mesh: &TriangleMesh, axis: usize) -> Self {
        let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
        let (lo3, hi3) = mesh
            .bounding_box()
            .unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let lo = (lo3[b], lo3[c]);
        let ext = (hi3[b] - lo3[b], hi3[c] - lo3[c]);
        let n = mesh.triangles.len().max(1) as f64;
        // roughly sqrt(n) cells per side
        let cell = ((ext.0 * ext.1).max(1e-18) / n).sqrt().max(ext.0.max(ext.1) / 1024.0).max(1e-9) * 2.0;
        let dims = (
            (ext.0 / cell).floor() as usize + 1,
            (ext.1 / cell).floor() as usize + 1,
        );
        let mut grid = AxisGrid {
            lo,
            cell,
            dims,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let ranges: Vec<((usize, usize), (usize, usize))> = (0..mesh.triangles.len())
            .map(|t| {
                let cs = mesh.corners(t);
                let min_b = cs.iter().map(|v| v[b]).fold(f64::INFINITY, f64::min);
                let max_b = cs.iter().map(|v| v[b]).fold(f64::NEG_INFINITY, f64::max);
                let min_c = cs.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let max_c = cs.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                (grid.clamped(min_b, min_c), grid.clamped(max_b, max_c))
            })
            .collect();
        let total = dims.0 * dims.1;
        let mut starts = vec![0u32; total + 1];
        for (lo, hi) in &ranges {
            for x in lo.0..=hi.0 {
                for y in lo.1..=hi.1 {
                    starts[x * dims.1 + y + 1] += 1;
                }
            }
        }
        for i in 0..total {
            starts[i + 1] += starts[i];
        }
        let mut cursor = starts.clone();
        let mut items = vec![0u32; starts[total] as usize];
        for (t, (lo, hi)) in ranges.iter().enumerate() {
            for x in lo.0..=hi.0 {
                for y in lo.1..=hi.1 {
                    let f = x * dims.1 + y;
                    items[cursor[f] as usize] = t as u32;
                    cursor[f] += 1;
                }
            }
        }
        grid.starts = starts;
        grid.items = items;
        grid
    }

    fn clamped(&self, u: f64, v: f64) -> (usize, usize) {
        let x = (((u - self.lo.0) / self.cell).floor().max(0.0) as usize).min(self.dims.0 - 1);
        let y = (((v - self.lo.1) / self.cell).floor().max(0.0) as usize).min(self.dims.1 - 1);
        (x, y)
    }

    fn cell_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let fx = ((u - self.lo.0) / self.cell).floor();
        let fy = ((v - self.lo.1) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.dims.0 as f64 || fy >= self.dims.1 as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    fn items_in(&self, cell: (usize, usize)) -> &[u32] {
        let f = cell.0 * self.dims.1 + cell.1;
        &self.items[self.starts[f] as usize..self.starts[f + 1] as usize]
    }
}
