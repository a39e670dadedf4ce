//! Sparse voxel active sets with hashed indexing, the two culling procedures
//! (silhouette carving and narrow band), and trilinear sampling.

mod carve;
mod field;

pub use carve::{carve_visual_hull, DepthBand, DEFAULT_SINGLE_VIEW_BAND};
pub use field::{narrow_band, trilinear_sample, upsample_to, SparseField};

use std::sync::Arc;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{GridIndex, VolumeSpec};

/// Packs a lattice index into a key whose integer order is lexicographic `(w, h, d)`.
#[inline]
pub(crate) fn pack(idx: GridIndex) -> u64 {
    ((idx[0] as u64) << 42) | ((idx[1] as u64) << 21) | idx[2] as u64
}

/// The set of active grid vertices of a [`VolumeSpec`], stored in canonical
/// lexicographic `(w, h, d)` order. Ranks `0..N` follow that order, so two
/// sets built from the same sites always agree on every rank.
#[derive(Debug, Clone)]
pub struct ActiveSet {
    spec: VolumeSpec,
    sites: Vec<GridIndex>,
    ranks: FxHashMap<u64, u32>,
}

impl PartialEq for ActiveSet {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.sites == other.sites
    }
}

impl ActiveSet {
    /// Builds a set from arbitrary (possibly duplicated, unordered) sites.
    pub fn from_sites(spec: VolumeSpec, mut sites: Vec<GridIndex>) -> Result<Self> {
        let r = spec.resolution;
        if let Some(bad) = sites.iter().find(|s| s.iter().any(|&c| c >= r)) {
            return Err(Error::OutOfRange(format!(
                "site {bad:?} outside resolution {r}"
            )));
        }
        sites.sort_unstable_by_key(|&s| pack(s));
        sites.dedup();
        Ok(Self::from_sorted_unchecked(spec, sites))
    }

    /// `sites` must already be strictly increasing in lexicographic order.
    pub(crate) fn from_sorted_unchecked(spec: VolumeSpec, sites: Vec<GridIndex>) -> Self {
        debug_assert!(sites.windows(2).all(|w| pack(w[0]) < pack(w[1])));
        let mut ranks = FxHashMap::with_capacity_and_hasher(sites.len(), Default::default());
        for (i, &s) in sites.iter().enumerate() {
            ranks.insert(pack(s), i as u32);
        }
        Self { spec, sites, ranks }
    }

    /// Every vertex of the grid.
    pub fn dense(spec: VolumeSpec) -> Self {
        let r = spec.resolution;
        let mut sites = Vec::with_capacity(spec.vertex_count() as usize);
        for w in 0..r {
            for h in 0..r {
                for d in 0..r {
                    sites.push([w, h, d]);
                }
            }
        }
        Self::from_sorted_unchecked(spec, sites)
    }

    pub fn spec(&self) -> &VolumeSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[GridIndex] {
        &self.sites
    }

    pub fn site(&self, rank: usize) -> GridIndex {
        self.sites[rank]
    }

    #[inline]
    pub fn rank(&self, idx: GridIndex) -> Option<u32> {
        self.ranks.get(&pack(idx)).copied()
    }

    /// Rank lookup for a possibly out-of-lattice signed index.
    #[inline]
    pub fn rank_signed(&self, idx: [i64; 3]) -> Option<u32> {
        let r = self.spec.resolution as i64;
        if idx.iter().any(|&c| c < 0 || c >= r) {
            return None;
        }
        self.rank([idx[0] as u32, idx[1] as u32, idx[2] as u32])
    }

    pub fn contains(&self, idx: GridIndex) -> bool {
        self.ranks.contains_key(&pack(idx))
    }

    /// Fraction of all `R^3` vertices that are active.
    pub fn occupancy(&self) -> f64 {
        self.len() as f64 / self.spec.vertex_count() as f64
    }

    /// Sub-set of sites satisfying `keep`, preserving canonical order.
    pub fn filter(&self, mut keep: impl FnMut(usize, GridIndex) -> bool) -> Self {
        let sites = self
            .sites
            .iter()
            .enumerate()
            .filter(|&(i, &s)| keep(i, s))
            .map(|(_, &s)| s)
            .collect();
        Self::from_sorted_unchecked(self.spec, sites)
    }

    pub fn is_subset_of(&self, other: &ActiveSet) -> bool {
        self.spec == other.spec && self.sites.iter().all(|&s| other.contains(s))
    }

    pub fn into_shared(self) -> Arc<ActiveSet> {
        Arc::new(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn spec(r: u32) -> VolumeSpec {
        VolumeSpec::centered(Vec3::zeros(), 16.0, r).unwrap()
    }

    #[test]
    fn ranks_follow_lexicographic_order() {
        let set = ActiveSet::from_sites(spec(8), vec![[1, 0, 0], [0, 7, 7], [0, 0, 1], [0, 7, 7]]).unwrap();
        assert_eq!(set.sites(), &[[0, 0, 1], [0, 7, 7], [1, 0, 0]]);
        assert_eq!(set.rank([1, 0, 0]), Some(2));
        assert_eq!(set.rank([1, 1, 0]), None);
        assert_eq!(set.rank_signed([-1, 0, 0]), None);
    }

    #[test]
    fn rejects_out_of_lattice_sites() {
        assert!(ActiveSet::from_sites(spec(4), vec![[4, 0, 0]]).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_ranks(raw in proptest::collection::vec((0u32..6, 0u32..6, 0u32..6), 0..80), seed in 0u64..100) {
            let sites: Vec<GridIndex> = raw.iter().map(|&(a, b, c)| [a, b, c]).collect();
            let mut shuffled = sites.clone();
            // deterministic permutation
            let n = shuffled.len();
            for i in 0..n {
                let j = ((i as u64 * 7919 + seed) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            let a = ActiveSet::from_sites(spec(6), sites).unwrap();
            let b = ActiveSet::from_sites(spec(6), shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            for (i, &s) in a.sites().iter().enumerate() {
                prop_assert_eq!(a.rank(s), Some(i as u32));
                prop_assert_eq!(b.rank(s), Some(i as u32));
            }
        }
    }
}
