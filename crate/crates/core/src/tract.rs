//! Deterministic tensor streamline tracking and bundle agreement metrics.

use serde::{Deserialize, Serialize};

use crate::dti::{fit_dti, DiffusionTensor, TensorField, DEFAULT_SIGNAL_FLOOR};
use crate::error::{Error, Result};
use crate::util::{mean, par_map};
use crate::volume::{DwiVolume, Grid3, Mask, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackParams {
    pub step_mm: f64,
    pub fa_stop: f64,
    pub angle_stop_deg: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self { step_mm: 1.0, fa_stop: 0.2, angle_stop_deg: 45.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    /// World coordinates, mm.
    pub points: Vec<[f64; 3]>,
}

impl Streamline {
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Sign convention for the initial direction, so flipping v1 does not reorder points.
fn canonical(d: [f64; 3]) -> [f64; 3] {
    let flip = if d[2] != 0.0 {
        d[2] < 0.0
    } else if d[1] != 0.0 {
        d[1] < 0.0
    } else {
        d[0] < 0.0
    };
    if flip {
        [-d[0], -d[1], -d[2]]
    } else {
        d
    }
}

struct Field<'a> {
    tf: &'a TensorField,
    defined: Vec<bool>,
}

impl Field<'_> {
    /// Trilinear corners and weights at voxel position `q`, or `None` off the grid.
    fn corners(&self, q: [f64; 3]) -> Option<[(usize, f64); 8]> {
        let dims = self.tf.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(q[a] >= 0.0 && q[a] <= (dims[a] - 1) as f64) {
                return None;
            }
            let f = q[a].floor().min((dims[a].max(2) - 2) as f64).max(0.0);
            base[a] = f as usize;
            frac[a] = q[a] - f;
        }
        let mut out = [(0usize, 0.0); 8];
        for (n, slot) in out.iter_mut().enumerate() {
            let off = [n & 1, (n >> 1) & 1, (n >> 2) & 1];
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                idx[a] = (base[a] + off[a]).min(dims[a] - 1);
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            *slot = (self.tf.grid.index(idx[0], idx[1], idx[2]), w);
        }
        Some(out)
    }

    fn fa(&self, q: [f64; 3]) -> Option<f64> {
        let c = self.corners(q)?;
        Some(c.iter().map(|&(i, w)| if self.defined[i] { w * self.tf.fa.data()[i] as f64 } else { 0.0 }).sum())
    }

    /// Interpolated principal direction with every corner aligned to `reference`.
    fn direction(&self, q: [f64; 3], reference: [f64; 3]) -> Option<[f64; 3]> {
        let c = self.corners(q)?;
        let mut acc = [0.0; 3];
        for &(i, w) in &c {
            if !self.defined[i] || w == 0.0 {
                continue;
            }
            let v = self.tf.v1[i];
            let s = if dot(v, reference) < 0.0 { -w } else { w };
            for a in 0..3 {
                acc[a] += s * v[a];
            }
        }
        let n = dot(acc, acc).sqrt();
        (n > 1e-12).then(|| [acc[0] / n, acc[1] / n, acc[2] / n])
    }
}

fn follow(
    field: &Field,
    grid: &Grid3,
    start: [f64; 3],
    dir0: [f64; 3],
    p: &TrackParams,
    max_steps: usize,
) -> Vec<[f64; 3]> {
    let cos_stop = p.angle_stop_deg.to_radians().cos();
    let mut pts = Vec::new();
    let mut x = start;
    let mut prev = dir0;
    for _ in 0..max_steps {
        let Some(d) = field.direction(grid.to_voxel(x), prev) else { break };
        if dot(d, prev) < cos_stop {
            break;
        }
        let next = [x[0] + p.step_mm * d[0], x[1] + p.step_mm * d[1], x[2] + p.step_mm * d[2]];
        match field.fa(grid.to_voxel(next)) {
            Some(fa) if fa >= p.fa_stop => {}
            _ => break,
        }
        pts.push(next);
        x = next;
        prev = d;
    }
    pts
}

/// Bidirectional Euler tracking from every seed voxel centre, in seed-index order.
pub fn track(tf: &TensorField, seeds: &Mask, params: &TrackParams) -> Result<Vec<Streamline>> {
    tf.grid.ensure_matches(seeds.grid())?;
    if !(params.step_mm > 0.0) {
        return Err(Error::Validation("step must be positive".into()));
    }
    let grid = tf.grid;
    let field = Field { tf, defined: tf.defined().bits().to_vec() };
    let extent: f64 = (0..3).map(|a| grid.dims[a] as f64 * grid.spacing[a]).sum();
    let max_steps = (4.0 * extent / params.step_mm).ceil() as usize;
    let seeds = seeds.indices();
    let lines = par_map(&seeds, |&idx| {
        if !field.defined[idx] || (tf.fa.data()[idx] as f64) < params.fa_stop {
            return None;
        }
        let (i, j, k) = grid.coords(idx);
        let start = grid.world([i as f64, j as f64, k as f64]);
        let d0 = canonical(tf.v1[idx]);
        let fwd = follow(&field, &grid, start, d0, params, max_steps);
        let back = follow(&field, &grid, start, [-d0[0], -d0[1], -d0[2]], params, max_steps);
        let mut points: Vec<[f64; 3]> = back.into_iter().rev().collect();
        points.push(start);
        points.extend(fwd);
        (points.len() >= 3).then_some(Streamline { points })
    });
    Ok(lines.into_iter().flatten().collect())
}

/// Fit tensors over `mask`, track from `seeds` and summarize the bundle.
pub fn track_dwi(
    d: &DwiVolume,
    mask: &Mask,
    seeds: &Mask,
    params: &TrackParams,
) -> Result<(Vec<Streamline>, BundleStats)> {
    let tf = fit_dti(d, mask, DEFAULT_SIGNAL_FLOOR)?;
    let lines = track(&tf, seeds, params)?;
    let stats = bundle_stats(&lines, d.grid());
    Ok((lines, stats))
}

/// Tracking-only field from FA and principal-direction maps; voxels with a zero
/// direction are undefined.
pub fn field_from_maps(fa: &Volume3, v1: &Volume3) -> Result<TensorField> {
    let grid = *fa.grid();
    grid.ensure_matches(v1.grid())?;
    if fa.channels() != 1 || v1.channels() != 3 {
        return Err(Error::Validation(format!(
            "expected 1-channel FA and 3-channel v1, got {} and {}",
            fa.channels(),
            v1.channels()
        )));
    }
    let n = grid.len();
    let dirs: Vec<[f64; 3]> = (0..n).map(|i| [0, 1, 2].map(|c| v1.channel(c)[i] as f64)).collect();
    let defined: Vec<bool> = dirs.iter().map(|d| dot(*d, *d) > 1e-12).collect();
    let tensors = dirs
        .iter()
        .zip(&defined)
        .map(|(&d, &ok)| {
            ok.then(|| DiffusionTensor::from_matrix(&[0, 1, 2].map(|a| [0, 1, 2].map(|b| d[a] * d[b])), 0.0))
        })
        .collect();
    let mask = Mask::new(grid, defined)?;
    let mut tf = TensorField::from_tensors(grid, mask, tensors, Mask::empty(grid));
    tf.fa = fa.clone();
    for (slot, d) in tf.v1.iter_mut().zip(&dirs) {
        let norm = dot(*d, *d).sqrt();
        *slot = if norm > 1e-6 { d.map(|x| x / norm) } else { [0.0; 3] };
    }
    Ok(tf)
}

/// `2|a ∧ b| / (|a| + |b|)`; both empty gives 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let both = a.and(b)?.count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleStats {
    pub count: usize,
    pub mean_length: f64,
    pub occupancy: Mask,
    /// No streamlines; the other fields are zero.
    pub empty: bool,
}

pub fn bundle_stats(streamlines: &[Streamline], grid: &Grid3) -> BundleStats {
    let mut occupancy = Mask::empty(*grid);
    for s in streamlines {
        for &p in &s.points {
            let q = grid.to_voxel(p);
            let r = q.map(|c| c.round());
            if (0..3).all(|a| r[a] >= 0.0 && r[a] < grid.dims[a] as f64) {
                occupancy.set(r[0] as usize, r[1] as usize, r[2] as usize, true);
            }
        }
    }
    let lengths: Vec<f64> = streamlines.iter().map(Streamline::length).collect();
    BundleStats {
        count: streamlines.len(),
        mean_length: mean(&lengths).unwrap_or(0.0),
        occupancy,
        empty: streamlines.is_empty(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Agreement of paired measurements, `d = test - ref`, sample SD and ±1.96 SD limits.
pub fn bland_altman(reference: &[f64], test: &[f64]) -> Result<BlandAltman> {
    if reference.len() != test.len() {
        return Err(Error::Pairing(format!("{} reference values vs {} test values", reference.len(), test.len())));
    }
    if reference.len() < 2 {
        return Err(Error::Pairing("need at least two pairs".into()));
    }
    let d: Vec<f64> = test.iter().zip(reference).map(|(t, r)| t - r).collect();
    let m = mean(&d).expect("non-empty");
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    let sd = var.sqrt();
    Ok(BlandAltman { mean_diff: m, sd_diff: sd, loa_low: m - 1.96 * sd, loa_high: m + 1.96 * sd })
}
