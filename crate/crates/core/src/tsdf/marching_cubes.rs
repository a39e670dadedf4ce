use rayon::prelude::*;
use rustc_hash::FxHashMap;

use super::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use crate::geometry::{GridIndex, TriangleMesh, Vec3, VolumeSpec};
use crate::sparsevol::pack;

type EdgeKey = (u64, u8);

struct CellOutput {
    // (edge key, position) per emitted vertex slot, three per triangle
    slots: Vec<(EdgeKey, Vec3)>,
}

/// Marching cubes over the given cells (identified by their minimum corner).
///
/// `corner` supplies the value at each lattice vertex; negative is inside.
/// Vertices are shared between cells through their lattice edge, and appear in
/// the output in the order cells are listed, so a canonical cell order gives
/// a deterministic mesh. Triangles wind counter-clockwise when seen from the
/// positive side.
pub(crate) fn polygonize(
    spec: &VolumeSpec,
    cells: &[GridIndex],
    corner: impl Fn(GridIndex) -> f64 + Sync,
) -> TriangleMesh {
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&cell| {
            let mut values = [0.0f64; 8];
            let mut case = 0usize;
            for (k, off) in CORNER_OFFSETS.iter().enumerate() {
                let idx = [cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]];
                values[k] = corner(idx);
                if values[k] < 0.0 {
                    case |= 1 << k;
                }
            }
            let mut slots = Vec::new();
            if case == 0 || case == 255 {
                return CellOutput { slots };
            }
            let row = &TRI_TABLE[case];
            let mut i = 0;
            while i < 15 && row[i] >= 0 {
                // table winding faces the inside; emit reversed
                for &e in &[row[i], row[i + 2], row[i + 1]] {
                    let [a, b] = EDGE_CORNERS[e as usize];
                    let ia = add(cell, CORNER_OFFSETS[a]);
                    let ib = add(cell, CORNER_OFFSETS[b]);
                    let (va, vb) = (values[a], values[b]);
                    let t = va / (va - vb);
                    let pa = spec.position(ia);
                    let pb = spec.position(ib);
                    let pos = pa + (pb - pa) * t;
                    let (lo, axis) = edge_of(ia, ib);
                    slots.push(((pack(lo), axis), pos));
                }
                i += 3;
            }
            CellOutput { slots }
        })
        .collect();

    let mut ids: FxHashMap<EdgeKey, u32> = FxHashMap::default();
    let mut mesh = TriangleMesh::default();
    for out in outputs {
        let mut tri = [0u32; 3];
        for (k, (key, pos)) in out.slots.into_iter().enumerate() {
            let id = *ids.entry(key).or_insert_with(|| {
                mesh.vertices.push(pos);
                (mesh.vertices.len() - 1) as u32
            });
            tri[k % 3] = id;
            if k % 3 == 2 {
                mesh.triangles.push(tri);
            }
        }
    }
    mesh
}

fn add(a: GridIndex, b: [u32; 3]) -> GridIndex {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn edge_of(a: GridIndex, b: GridIndex) -> (GridIndex, u8) {
    let axis = (0..3).find(|&k| a[k] != b[k]).expect("edge endpoints differ") as u8;
    if a[axis as usize] < b[axis as usize] {
        (a, axis)
    } else {
        (b, axis)
    }
}

/// Every cell of a dense `R^3` lattice, in canonical order.
#[cfg(test)]
pub(crate) fn dense_cells(resolution: u32) -> Vec<GridIndex> {
    let r = resolution.saturating_sub(1);
    let mut cells = Vec::with_capacity((r as usize).pow(3));
    for w in 0..r {
        for h in 0..r {
            for d in 0..r {
                cells.push([w, h, d]);
            }
        }
    }
    cells
}
