//! Grid-aware containers for 3D/4D images, gradient tables and masks.
//!
//! Voxel `(i, j, k)` lives at linear index `i + nx * (j + ny * k)`. Axis 2
//! runs inferior to superior, so "top" is the largest `k`. Multi-channel
//! volumes store the channel as the slowest axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// b-values below this (s/mm²) are treated as unweighted baselines.
pub const DEFAULT_B0_THRESHOLD: f64 = 50.0;

const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("grid spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Validation("grid origin must be finite".into()));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Cube of `n` voxels per side at isotropic `spacing`, origin at zero.
    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3], [0.0; 3])
    }

    pub fn nx(&self) -> usize {
        self.dims[0]
    }
    pub fn ny(&self) -> usize {
        self.dims[1]
    }
    pub fn nz(&self) -> usize {
        self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        (i, rest % self.dims[1], rest / self.dims[1])
    }

    /// World position (mm) of a voxel center, possibly at fractional index.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + ijk[0] * self.spacing[0],
            self.origin[1] + ijk[1] * self.spacing[1],
            self.origin[2] + ijk[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world position.
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// World-space center of the voxel lattice.
    pub fn center(&self) -> [f64; 3] {
        self.world([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    /// Grids compare equal when dims match and geometry agrees to 1e-6 mm.
    pub fn matches(&self, other: &Grid3) -> bool {
        self.dims == other.dims
            && self.spacing.iter().zip(other.spacing.iter()).all(|(a, b)| (a - b).abs() < 1e-6)
            && self.origin.iter().zip(other.origin.iter()).all(|(a, b)| (a - b).abs() < 1e-6)
    }

    pub fn ensure_matches(&self, other: &Grid3) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::Grid(format!("{:?} vs {:?}", self, other)))
        }
    }
}

/// Scalar (or multi-channel) 32-bit image on a [`Grid3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: Grid3,
    channels: usize,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(grid: Grid3, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Validation("volume needs at least one channel".into()));
        }
        if data.len() != grid.len() * channels {
            return Err(Error::Validation(format!(
                "data length {} != {} voxels x {} channels",
                data.len(),
                grid.len(),
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume contains non-finite values".into()));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn zeros(grid: Grid3, channels: usize) -> Self {
        Self { grid, channels: channels.max(1), data: vec![0.0; grid.len() * channels.max(1)] }
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.nz() {
            for j in 0..grid.ny() {
                for i in 0..grid.nx() {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { grid, channels: 1, data }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn get_c(&self, c: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[c * self.grid.len() + self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    /// Split channels into separate single-channel volumes.
    pub fn split_channels(&self) -> Vec<Volume3> {
        (0..self.channels).map(|c| Volume3 { grid: self.grid, channels: 1, data: self.channel(c).to_vec() }).collect()
    }

    /// Stack single- or multi-channel volumes along the channel axis.
    pub fn stack(parts: &[Volume3]) -> Result<Volume3> {
        let first = parts.first().ok_or_else(|| Error::Validation("nothing to stack".into()))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            first.grid.ensure_matches(&p.grid)?;
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Volume3 { grid: first.grid, channels, data })
    }
}

/// Per-volume diffusion encoding: b-values (s/mm²) and b-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
    b0_threshold: f64,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self> {
        Self::with_threshold(bvals, bvecs, DEFAULT_B0_THRESHOLD)
    }

    pub fn with_threshold(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, b0_threshold: f64) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Format(format!("{} b-values but {} b-vectors", bvals.len(), bvecs.len())));
        }
        if bvals.is_empty() {
            return Err(Error::Validation("empty gradient table".into()));
        }
        for (n, (b, g)) in bvals.iter().zip(bvecs.iter()).enumerate() {
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::Validation(format!("volume {n}: b-value {b} must be finite and >= 0")));
            }
            if g.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!("volume {n}: non-finite b-vector")));
            }
            if *b >= b0_threshold {
                let norm = norm3(g);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Validation(format!(
                        "volume {n}: b-vector norm {norm:.6} is not unit for b = {b}"
                    )));
                }
            }
        }
        Ok(Self { bvals, bvecs, b0_threshold })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }
    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }
    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }
    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }
    pub fn b0_threshold(&self) -> f64 {
        self.b0_threshold
    }

    pub fn is_b0(&self, v: usize) -> bool {
        self.bvals[v] < self.b0_threshold
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.is_b0(v)).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| !self.is_b0(v)).collect()
    }

    /// Unit direction of a weighted volume (renormalized), zero for b0.
    pub fn unit_bvec(&self, v: usize) -> [f64; 3] {
        if self.is_b0(v) {
            return [0.0; 3];
        }
        let g = self.bvecs[v];
        let n = norm3(&g);
        [g[0] / n, g[1] / n, g[2] / n]
    }
}

pub(crate) fn norm3(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

/// Four-dimensional diffusion-weighted scan.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    grid: Grid3,
    volumes: Vec<Volume3>,
    gradients: GradientTable,
}

impl DwiVolume {
    pub fn new(grid: Grid3, volumes: Vec<Volume3>, gradients: GradientTable) -> Result<Self> {
        if volumes.len() != gradients.len() {
            return Err(Error::Validation(format!(
                "{} volumes but gradient table has {} entries",
                volumes.len(),
                gradients.len()
            )));
        }
        for v in &volumes {
            grid.ensure_matches(v.grid())?;
            if v.channels() != 1 {
                return Err(Error::Validation("DWI volumes must be single-channel".into()));
            }
        }
        if gradients.b0_indices().is_empty() {
            return Err(Error::Validation("DWI needs at least one b0 volume".into()));
        }
        Ok(Self { grid, volumes, gradients })
    }

    /// Build from a 4D image whose channels are the diffusion volumes.
    pub fn from_series(series: Volume3, gradients: GradientTable) -> Result<Self> {
        let grid = *series.grid();
        Self::new(grid, series.split_channels(), gradients)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
    pub fn volumes(&self) -> &[Volume3] {
        &self.volumes
    }
    pub fn volumes_mut(&mut self) -> &mut [Volume3] {
        &mut self.volumes
    }
    pub fn volume(&self, v: usize) -> &Volume3 {
        &self.volumes[v]
    }
    pub fn gradients(&self) -> &GradientTable {
        &self.gradients
    }
    pub fn len(&self) -> usize {
        self.volumes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Concatenate into one 4D image (channels = volumes).
    pub fn to_series(&self) -> Volume3 {
        let mut data = Vec::with_capacity(self.grid.len() * self.volumes.len());
        for v in &self.volumes {
            data.extend_from_slice(v.data());
        }
        Volume3 { grid: self.grid, channels: self.volumes.len(), data }
    }

    pub fn ensure_compatible(&self, other: &DwiVolume) -> Result<()> {
        self.grid.ensure_matches(&other.grid)?;
        if self.len() != other.len() {
            return Err(Error::Grid(format!("{} volumes vs {}", self.len(), other.len())));
        }
        Ok(())
    }
}

/// Boolean voxel selection on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid3,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid3, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::Validation(format!("mask length {} != grid {}", bits.len(), grid.len())));
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: Grid3) -> Self {
        Self { grid, bits: vec![false; grid.len()] }
    }

    pub fn full(grid: Grid3) -> Self {
        Self { grid, bits: vec![true; grid.len()] }
    }

    pub fn from_fn(grid: Grid3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let bits = (0..grid.len())
            .map(|idx| {
                let (i, j, k) = grid.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self { grid, bits }
    }

    /// Voxels where the volume's first channel is above `threshold`.
    pub fn from_threshold(v: &Volume3, threshold: f32) -> Self {
        Self { grid: *v.grid(), bits: v.channel(0).iter().map(|&x| x > threshold).collect() }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.index(i, j, k)]
    }
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.grid.index(i, j, k);
        self.bits[idx] = v;
    }
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_matches(&other.grid)?;
        Ok(Mask { grid: self.grid, bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect() })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_matches(&other.grid)?;
        Ok(Mask { grid: self.grid, bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect() })
    }

    pub fn not(&self) -> Mask {
        Mask { grid: self.grid, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Inclusive k-range covered by the mask, if any voxel is set.
    pub fn k_extent(&self) -> Option<(usize, usize)> {
        let plane = self.grid.nx() * self.grid.ny();
        let mut lo = None;
        let mut hi = None;
        for k in 0..self.grid.nz() {
            if self.bits[k * plane..(k + 1) * plane].iter().any(|&b| b) {
                lo.get_or_insert(k);
                hi = Some(k);
            }
        }
        lo.zip(hi)
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3 { grid: self.grid, channels: 1, data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() }
    }
}

/// Values of `v` (first channel) where `m` is set, in layout order.
pub fn restrict(v: &Volume3, m: &Mask) -> Result<Vec<f32>> {
    v.grid().ensure_matches(m.grid())?;
    Ok(v.channel(0).iter().zip(m.bits()).filter_map(|(&x, &b)| b.then_some(x)).collect())
}
