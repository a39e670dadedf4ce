use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridIndex;
use crate::sparsevol::{pack, ActiveSet};

/// Kernel taps per layer.
pub const KERNEL_VOLUME: usize = 27;
/// Index of the `(0, 0, 0)` tap.
pub const CENTER_OFFSET: usize = 13;

/// Offset of tap `k`, enumerated lexicographically:
/// `k = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)`.
pub fn offset(k: usize) -> [i64; 3] {
    [(k / 9) as i64 - 1, (k / 3 % 3) as i64 - 1, (k % 3) as i64 - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    /// Stride 1, output sites = input sites.
    Submanifold,
    /// Stride 2: output `o` reads the 3x3x3 window centred at `2o + 1`.
    Strided,
    /// Adjoint of a recorded strided rulebook, back onto its finer set.
    Transposed,
}

/// Gather/scatter pairs of one sparse convolution.
///
/// Pairs are kept in two compressed layouts: per output site (taps in
/// increasing `k`) for the forward gather, and per input site for the
/// backward scatter. Both make every reduction order fixed.
#[derive(Debug, Clone)]
pub struct Rulebook {
    variant: ConvVariant,
    input: Arc<ActiveSet>,
    output: Arc<ActiveSet>,
    out_ptr: Vec<usize>,
    out_taps: Vec<(u8, u32)>,
    in_ptr: Vec<usize>,
    in_taps: Vec<(u8, u32)>,
}

fn compress(n: usize, mut triples: Vec<(u32, u8, u32)>) -> (Vec<usize>, Vec<(u8, u32)>) {
    triples.par_sort_unstable();
    let mut ptr = vec![0usize; n + 1];
    for &(row, _, _) in &triples {
        ptr[row as usize + 1] += 1;
    }
    for i in 0..n {
        ptr[i + 1] += ptr[i];
    }
    (ptr, triples.into_iter().map(|(_, k, c)| (k, c)).collect())
}

impl Rulebook {
    fn from_pairs(
        variant: ConvVariant,
        input: Arc<ActiveSet>,
        output: Arc<ActiveSet>,
        pairs: Vec<(u32, u8, u32)>, // (out, k, in)
    ) -> Self {
        let by_in = pairs.iter().map(|&(o, k, i)| (i, k, o)).collect();
        let (out_ptr, out_taps) = compress(output.len(), pairs);
        let (in_ptr, in_taps) = compress(input.len(), by_in);
        Self {
            variant,
            input,
            output,
            out_ptr,
            out_taps,
            in_ptr,
            in_taps,
        }
    }

    /// Stride-1 rulebook: output `i` gathers input `i + delta_k` when active.
    pub fn submanifold(input: Arc<ActiveSet>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Config("cannot build a rulebook on an empty set".into()));
        }
        let pairs = input
            .sites()
            .par_iter()
            .enumerate()
            .flat_map_iter(|(o, s)| {
                let input = &input;
                (0..KERNEL_VOLUME).filter_map(move |k| {
                    let d = offset(k);
                    let n = [s[0] as i64 + d[0], s[1] as i64 + d[1], s[2] as i64 + d[2]];
                    input.rank_signed(n).map(|i| (o as u32, k as u8, i))
                })
            })
            .collect();
        Ok(Self::from_pairs(ConvVariant::Submanifold, input.clone(), input, pairs))
    }

    /// Stride-2 rulebook onto the half-resolution set of every `o` whose
    /// window `2o + 1 + delta` touches an active input.
    pub fn strided(input: Arc<ActiveSet>) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Config("cannot build a rulebook on an empty set".into()));
        }
        let coarse = input.spec().halved()?;
        let half = coarse.resolution as i64;
        let mut keys: Vec<u64> = input
            .sites()
            .par_iter()
            .flat_map_iter(|s| {
                let s = *s;
                (0..KERNEL_VOLUME).filter_map(move |k| {
                    let d = offset(k);
                    let mut o = [0u32; 3];
                    for a in 0..3 {
                        let t = s[a] as i64 - 1 - d[a];
                        if t < 0 || t % 2 != 0 || t / 2 >= half {
                            return None;
                        }
                        o[a] = (t / 2) as u32;
                    }
                    Some(pack(o))
                })
            })
            .collect();
        keys.par_sort_unstable();
        keys.dedup();
        let mask = (1u64 << 21) - 1;
        let sites: Vec<GridIndex> = keys
            .into_iter()
            .map(|k| [(k >> 42) as u32, (k >> 21 & mask) as u32, (k & mask) as u32])
            .collect();
        let output = Arc::new(ActiveSet::from_sorted_unchecked(coarse, sites));
        let pairs = output
            .sites()
            .par_iter()
            .enumerate()
            .flat_map_iter(|(o, s)| {
                let input = &input;
                (0..KERNEL_VOLUME).filter_map(move |k| {
                    let d = offset(k);
                    let i = [
                        2 * s[0] as i64 + 1 + d[0],
                        2 * s[1] as i64 + 1 + d[1],
                        2 * s[2] as i64 + 1 + d[2],
                    ];
                    input.rank_signed(i).map(|i| (o as u32, k as u8, i))
                })
            })
            .collect();
        Ok(Self::from_pairs(ConvVariant::Strided, input, output, pairs))
    }

    /// The exact adjoint of a strided rulebook: same pairs, roles swapped,
    /// output set = the strided rulebook's input set.
    pub fn transposed(strided: &Rulebook) -> Result<Self> {
        if strided.variant != ConvVariant::Strided {
            return Err(Error::Config("transposed rulebooks invert a strided rulebook".into()));
        }
        let mut pairs = Vec::with_capacity(strided.len());
        for fine in 0..strided.input.len() {
            for &(k, coarse) in strided.taps_of_input(fine) {
                pairs.push((fine as u32, k, coarse));
            }
        }
        Ok(Self::from_pairs(
            ConvVariant::Transposed,
            strided.output.clone(),
            strided.input.clone(),
            pairs,
        ))
    }

    pub fn variant(&self) -> ConvVariant {
        self.variant
    }

    pub fn input(&self) -> &Arc<ActiveSet> {
        &self.input
    }

    pub fn output(&self) -> &Arc<ActiveSet> {
        &self.output
    }

    /// Total number of (input, output) pairs.
    pub fn len(&self) -> usize {
        self.out_taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_taps.is_empty()
    }

    /// `(k, input rank)` pairs feeding output `o`, increasing in `k`.
    pub fn taps_of_output(&self, o: usize) -> &[(u8, u32)] {
        &self.out_taps[self.out_ptr[o]..self.out_ptr[o + 1]]
    }

    /// `(k, output rank)` pairs reading input `i`, increasing in `k`.
    pub fn taps_of_input(&self, i: usize) -> &[(u8, u32)] {
        &self.in_taps[self.in_ptr[i]..self.in_ptr[i + 1]]
    }

    /// Pair list of tap `k` as `(input, output)`, ordered by output.
    pub fn pairs(&self, k: usize) -> Vec<(u32, u32)> {
        (0..self.output.len())
            .flat_map(|o| {
                self.taps_of_output(o)
                    .iter()
                    .filter(move |t| t.0 as usize == k)
                    .map(move |t| (t.1, o as u32))
            })
            .collect()
    }
}
