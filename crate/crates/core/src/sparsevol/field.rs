use std::sync::Arc;

use rayon::prelude::*;

use super::ActiveSet;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Per-site channel vectors aligned with the ranks of an [`ActiveSet`].
/// Sites outside the set read as `fill` in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseField {
    active: Arc<ActiveSet>,
    channels: usize,
    values: Vec<f64>,
    fill: f64,
}

impl SparseField {
    pub fn new(active: Arc<ActiveSet>, channels: usize, values: Vec<f64>, fill: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("field needs at least one channel".into()));
        }
        if values.len() != active.len() * channels {
            return Err(Error::Config(format!(
                "field has {} values, expected {} sites x {channels} channels",
                values.len(),
                active.len()
            )));
        }
        Ok(Self {
            active,
            channels,
            values,
            fill,
        })
    }

    pub fn constant(active: Arc<ActiveSet>, channels: usize, value: f64, fill: f64) -> Self {
        let n = active.len() * channels;
        Self {
            active,
            channels,
            values: vec![value; n],
            fill,
        }
    }

    /// Evaluates `f(rank, position, out_row)` for every site.
    pub fn from_fn(
        active: Arc<ActiveSet>,
        channels: usize,
        fill: f64,
        f: impl Fn(usize, &Vec3, &mut [f64]) + Sync,
    ) -> Self {
        let mut values = vec![0.0; active.len() * channels];
        let spec = *active.spec();
        let sites = active.sites();
        values
            .par_chunks_mut(channels)
            .enumerate()
            .for_each(|(i, row)| f(i, &spec.position(sites[i]), row));
        Self {
            active,
            channels,
            values,
            fill,
        }
    }

    pub fn active(&self) -> &Arc<ActiveSet> {
        &self.active
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }

    pub fn with_fill(mut self, fill: f64) -> Self {
        self.fill = fill;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, rank: usize) -> &[f64] {
        &self.values[rank * self.channels..(rank + 1) * self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, rank: usize) -> &mut [f64] {
        &mut self.values[rank * self.channels..(rank + 1) * self.channels]
    }

    /// Value of channel `c` at a lattice index, falling back to `fill`.
    pub fn get(&self, idx: [i64; 3], c: usize) -> f64 {
        match self.active.rank_signed(idx) {
            Some(r) => self.values[r as usize * self.channels + c],
            None => self.fill,
        }
    }

    /// Keeps only the sites of `subset` (which must be a subset of this
    /// field's active set).
    pub fn restrict(&self, subset: Arc<ActiveSet>) -> Result<Self> {
        let c = self.channels;
        let mut values = Vec::with_capacity(subset.len() * c);
        for &s in subset.sites() {
            let r = self.active.rank(s).ok_or_else(|| {
                Error::Config(format!("site {s:?} missing from the source field"))
            })? as usize;
            values.extend_from_slice(&self.values[r * c..(r + 1) * c]);
        }
        Self::new(subset, c, values, self.fill)
    }

    /// Channel-wise concatenation of fields over the same active set.
    pub fn concat(parts: &[&SparseField]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        for p in parts {
            if p.active.as_ref() != first.active.as_ref() {
                return Err(Error::Config("concatenated fields differ in active set".into()));
            }
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let n = first.len();
        let mut values = Vec::with_capacity(n * channels);
        for i in 0..n {
            for p in parts {
                values.extend_from_slice(p.row(i));
            }
        }
        Self::new(first.active.clone(), channels, values, first.fill)
    }

    /// Channels `start..start+len` as a new field.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.channels {
            return Err(Error::Config(format!(
                "channel slice {start}..{} outside 0..{}",
                start + len,
                self.channels
            )));
        }
        let values = (0..self.len())
            .flat_map(|i| self.row(i)[start..start + len].iter().copied())
            .collect();
        Self::new(self.active.clone(), len, values, self.fill)
    }
}

/// Sites whose single-channel value satisfies `|v| < threshold`.
pub fn narrow_band(tsdf: &SparseField, threshold: f64) -> Result<ActiveSet> {
    if tsdf.channels() != 1 {
        return Err(Error::Config(format!(
            "narrow band needs a 1-channel field, got {}",
            tsdf.channels()
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("band threshold must be positive, got {threshold}")));
    }
    let values = tsdf.values();
    Ok(tsdf.active().filter(|i, _| values[i].abs() < threshold))
}

/// Trilinear blend of the 8 lattice vertices around `point`; inactive or
/// off-lattice vertices contribute the field's fill value.
pub fn trilinear_sample(field: &SparseField, point: &Vec3) -> Result<Vec<f64>> {
    let mut out = vec![0.0; field.channels()];
    trilinear_sample_into(field, point, &mut out)?;
    Ok(out)
}

pub(crate) fn trilinear_sample_into(field: &SparseField, point: &Vec3, out: &mut [f64]) -> Result<()> {
    let spec = field.active().spec();
    if !spec.contains(point) {
        return Err(Error::OutOfRange(format!(
            "point ({:.4}, {:.4}, {:.4}) outside the volume cube",
            point.x, point.y, point.z
        )));
    }
    let c = spec.lattice_coords(point);
    let base = [c.x.floor(), c.y.floor(), c.z.floor()];
    let frac = [c.x - base[0], c.y - base[1], c.z - base[2]];
    let base = base.map(|b| b as i64);
    out.iter_mut().for_each(|v| *v = 0.0);
    let channels = field.channels();
    for corner in 0..8 {
        let bits = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        let idx = [
            base[0] + bits[0] as i64,
            base[1] + bits[1] as i64,
            base[2] + bits[2] as i64,
        ];
        match field.active().rank_signed(idx) {
            Some(r) => {
                let row = field.row(r as usize);
                for ch in 0..channels {
                    out[ch] += w * row[ch];
                }
            }
            None => {
                for o in out.iter_mut() {
                    *o += w * field.fill();
                }
            }
        }
    }
    Ok(())
}

/// Resamples `field` (resolution R) onto `target` (same cube, resolution 2R)
/// by trilinear interpolation at each target site's world position.
pub fn upsample_to(field: &SparseField, target: Arc<ActiveSet>) -> Result<SparseField> {
    let src = field.active().spec();
    let dst = target.spec();
    if !src.same_cube(dst) || dst.resolution != 2 * src.resolution {
        return Err(Error::Config(format!(
            "upsample target must be the same cube at resolution {} (got {})",
            2 * src.resolution,
            dst.resolution
        )));
    }
    let channels = field.channels();
    let mut values = vec![0.0; target.len() * channels];
    let dst = *dst;
    values
        .par_chunks_mut(channels)
        .zip(target.sites().par_iter())
        .try_for_each(|(row, &s)| trilinear_sample_into(field, &dst.position(s), row))?;
    SparseField::new(target, channels, values, field.fill())
}
