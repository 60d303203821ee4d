//! Intensity normalization, resampling, FOV truncation/detection/splicing and
//! 2.5D sagittal patch extraction.
//!
//! Sagittal planes are addressed by `i` (axis 0). A plane is laid out as an
//! `H x W` image with rows running along `k` (H = nz) and columns along `j`
//! (W = ny), so a FOV slab at the top of the scan is a band of bottom rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DwiVolume, Grid3, Mask, Volume3};

pub const PATCH_RADIUS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn apply(&self, x: f32) -> f32 {
        ((x.max(0.0) as f64).min(self.scale) / self.scale) as f32
    }

    pub fn invert(&self, x: f32) -> f32 {
        (x as f64 * self.scale) as f32
    }

    pub fn invert_volume(&self, v: &Volume3) -> Volume3 {
        let mut out = v.clone();
        out.data_mut().iter_mut().for_each(|x| *x = self.invert(*x));
        out
    }
}

/// Percentile with linear interpolation between order statistics (`q` in [0, 100]).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_val, upper) = v.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    if frac == 0.0 || upper.is_empty() {
        return Some(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Some(lo_val + frac * (hi_val - lo_val))
}

fn robust_scale(values: impl Iterator<Item = f32>) -> Result<f64> {
    let floored: Vec<f64> = values.map(|x| (x as f64).max(0.0)).collect();
    if !floored.iter().any(|&x| x > 0.0) {
        return Err(Error::DegenerateInput("scan has no positive values".into()));
    }
    let p = percentile(&floored, 99.9).unwrap_or(0.0);
    if !(p > 0.0) {
        return Err(Error::DegenerateInput("99.9th percentile is zero".into()));
    }
    Ok(p)
}

/// Map a volume to [0, 1] by flooring at zero and clamping at its 99.9th percentile.
pub fn normalize_volume(v: &Volume3) -> Result<(Volume3, NormalizationRecord)> {
    let rec = NormalizationRecord { scale: robust_scale(v.data().iter().copied())? };
    let mut out = v.clone();
    out.data_mut().iter_mut().for_each(|x| *x = rec.apply(*x));
    Ok((out, rec))
}

/// Normalize a DWI with one scale pooled over all its volumes.
pub fn normalize_dwi(d: &DwiVolume) -> Result<(DwiVolume, NormalizationRecord)> {
    let rec = NormalizationRecord { scale: robust_scale(d.volumes().iter().flat_map(|v| v.data().iter().copied()))? };
    Ok((map_dwi(d, |x| rec.apply(x)), rec))
}

pub fn map_dwi(d: &DwiVolume, f: impl Fn(f32) -> f32) -> DwiVolume {
    let mut out = d.clone();
    for v in out.volumes_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = f(*x));
    }
    out
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Trilinear resampling onto a cube centered on the source's world-space center.
/// Samples outside the source lattice are zero.
pub fn resample_isotropic(v: &Volume3, target_spacing: f64, target_dims: [usize; 3]) -> Result<Volume3> {
    if !(target_spacing > 0.0) {
        return Err(Error::Validation(format!("target spacing {target_spacing} must be > 0")));
    }
    let src = *v.grid();
    let center = src.center();
    let origin = [0, 1, 2].map(|a| center[a] - (target_dims[a] as f64 - 1.0) / 2.0 * target_spacing);
    let dst = Grid3::new(target_dims, [target_spacing; 3], origin)?;
    let n = dst.len();
    let mut data = vec![0f32; n * v.channels()];
    for idx in 0..n {
        let (i, j, k) = dst.coords(idx);
        let p = dst.world([i as f64, j as f64, k as f64]);
        let q = src.to_voxel(p).map(snap);
        let mut inside = true;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let hi = (src.dims[a] - 1) as f64;
            if q[a] < 0.0 || q[a] > hi {
                inside = false;
                break;
            }
            let f = q[a].floor();
            base[a] = f as usize;
            frac[a] = q[a] - f;
            if base[a] == src.dims[a] - 1 {
                frac[a] = 0.0;
            }
        }
        if !inside {
            continue;
        }
        for c in 0..v.channels() {
            let mut acc = 0f64;
            for corner in 0..8 {
                let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut w = 1.0;
                let mut ix = [0usize; 3];
                for a in 0..3 {
                    w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                    ix[a] = base[a] + d[a];
                }
                if w == 0.0 {
                    continue;
                }
                acc += w * v.get_c(c, ix[0], ix[1], ix[2]) as f64;
            }
            data[c * n + idx] = acc as f32;
        }
    }
    Volume3::new(dst, v.channels(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" | "superior" => Ok(Side::Top),
            "bottom" | "inferior" => Ok(Side::Bottom),
            other => Err(Error::Validation(format!("unknown side {other:?}"))),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Top => "top",
            Side::Bottom => "bottom",
        })
    }
}

/// A zeroed slab of axial slices at one end of the k axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovCut {
    pub side: Side,
    pub cut_mm: f64,
    /// `None` for an empty slab.
    pub first_missing_k: Option<usize>,
    pub last_missing_k: Option<usize>,
}

impl FovCut {
    /// Slab of `round_half_up(cut_mm / sz)` slices.
    pub fn new(side: Side, cut_mm: f64, grid: &Grid3) -> Result<Self> {
        if !(cut_mm >= 0.0) || !cut_mm.is_finite() {
            return Err(Error::InvalidCut(format!("cut_mm = {cut_mm}")));
        }
        let slices = (cut_mm / grid.spacing[2] + 0.5).floor() as usize;
        Self::from_slices(side, slices, cut_mm, grid)
    }

    fn from_slices(side: Side, slices: usize, cut_mm: f64, grid: &Grid3) -> Result<Self> {
        let nz = grid.nz();
        if slices > nz {
            return Err(Error::InvalidCut(format!("{slices} slices exceed nz = {nz}")));
        }
        let range = match (slices, side) {
            (0, _) => None,
            (s, Side::Top) => Some((nz - s, nz - 1)),
            (s, Side::Bottom) => Some((0, s - 1)),
        };
        Ok(Self { side, cut_mm, first_missing_k: range.map(|r| r.0), last_missing_k: range.map(|r| r.1) })
    }

    pub fn empty(side: Side) -> Self {
        Self { side, cut_mm: 0.0, first_missing_k: None, last_missing_k: None }
    }

    pub fn slices(&self) -> usize {
        match (self.first_missing_k, self.last_missing_k) {
            (Some(a), Some(b)) => b - a + 1,
            _ => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.slices() == 0
    }

    pub fn contains_k(&self, k: usize) -> bool {
        matches!((self.first_missing_k, self.last_missing_k), (Some(a), Some(b)) if (a..=b).contains(&k))
    }

    /// Nearest acquired slice index adjacent to the slab.
    pub fn boundary_k(&self, nz: usize) -> Option<usize> {
        match (self.side, self.first_missing_k, self.last_missing_k) {
            (Side::Top, Some(a), _) if a > 0 => Some(a - 1),
            (Side::Bottom, _, Some(b)) if b + 1 < nz => Some(b + 1),
            _ => None,
        }
    }

    /// Mask of the slab voxels.
    pub fn slab_mask(&self, grid: &Grid3) -> Mask {
        Mask::from_fn(*grid, |_, _, k| self.contains_k(k))
    }

    /// Per-row mask of a sagittal plane (rows = k).
    pub fn row_mask(&self, nz: usize) -> Vec<bool> {
        (0..nz).map(|k| self.contains_k(k)).collect()
    }
}

fn slice_nonzero(d: &DwiVolume, k: usize) -> bool {
    let plane = d.grid().nx() * d.grid().ny();
    d.volumes().iter().any(|v| v.channel(0)[k * plane..(k + 1) * plane].iter().any(|&x| x != 0.0))
}

/// Zero `round(cut_mm / sz)` slices at one end of the k axis in every volume.
pub fn truncate_fov(d: &DwiVolume, side: Side, cut_mm: f64) -> Result<(DwiVolume, FovCut)> {
    let grid = *d.grid();
    let cut = FovCut::new(side, cut_mm, &grid)?;
    if cut.is_empty() {
        return Ok((d.clone(), cut));
    }
    let occupied: Vec<usize> = (0..grid.nz()).filter(|&k| slice_nonzero(d, k)).collect();
    if !occupied.is_empty() && occupied.iter().all(|&k| cut.contains_k(k)) {
        return Err(Error::InvalidCut(format!("cutting {cut_mm} mm from the {side} removes every non-empty slice")));
    }
    Ok((zero_slab(d, &cut), cut))
}

pub fn zero_slab(d: &DwiVolume, cut: &FovCut) -> DwiVolume {
    let mut out = d.clone();
    if let (Some(a), Some(b)) = (cut.first_missing_k, cut.last_missing_k) {
        let plane = d.grid().nx() * d.grid().ny();
        for v in out.volumes_mut() {
            v.data_mut()[a * plane..(b + 1) * plane].fill(0.0);
        }
    }
    out
}

/// Find an all-zero run of end slices that overlaps the brain's k-extent.
pub fn detect_fov_cutoff(d: &DwiVolume, brain_mask: &Mask) -> Option<FovCut> {
    let grid = *d.grid();
    let nz = grid.nz();
    let (brain_lo, brain_hi) = brain_mask.k_extent()?;
    let top_run = (0..nz).rev().take_while(|&k| !slice_nonzero(d, k)).count();
    let bottom_run = (0..nz).take_while(|&k| !slice_nonzero(d, k)).count();

    let sz = grid.spacing[2];
    let top = (top_run > 0 && nz - top_run <= brain_hi).then_some(top_run);
    let bottom = (bottom_run > 0 && bottom_run - 1 >= brain_lo).then_some(bottom_run);
    let (side, run) = match (top, bottom) {
        (Some(t), Some(b)) if b > t => (Side::Bottom, b),
        (Some(t), _) => (Side::Top, t),
        (None, Some(b)) => (Side::Bottom, b),
        (None, None) => return None,
    };
    FovCut::from_slices(side, run, run as f64 * sz, &grid).ok()
}

/// Acquired voxels everywhere except the slab, where `imputed` is used.
pub fn splice_imputation(acquired: &DwiVolume, imputed: &DwiVolume, cut: &FovCut) -> Result<DwiVolume> {
    acquired.ensure_compatible(imputed)?;
    let mut out = acquired.clone();
    if let (Some(a), Some(b)) = (cut.first_missing_k, cut.last_missing_k) {
        let plane = acquired.grid().nx() * acquired.grid().ny();
        for (dst, src) in out.volumes_mut().iter_mut().zip(imputed.volumes()) {
            dst.data_mut()[a * plane..(b + 1) * plane].copy_from_slice(&src.data()[a * plane..(b + 1) * plane]);
        }
    }
    Ok(out)
}

/// Baseline imputation: repeat the nearest acquired axial slice across the slab.
pub fn copy_nearest_slice(acquired: &DwiVolume, cut: &FovCut) -> DwiVolume {
    let mut out = acquired.clone();
    let nz = acquired.grid().nz();
    let plane = acquired.grid().nx() * acquired.grid().ny();
    if let (Some(a), Some(b), Some(src_k)) = (cut.first_missing_k, cut.last_missing_k, cut.boundary_k(nz)) {
        for v in out.volumes_mut() {
            let src: Vec<f32> = v.data()[src_k * plane..(src_k + 1) * plane].to_vec();
            for k in a..=b {
                v.data_mut()[k * plane..(k + 1) * plane].copy_from_slice(&src);
            }
        }
    }
    out
}

/// Reflect an index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(t: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = t.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Sagittal plane `i` of channel `c` as an `nz x ny` row-major image.
pub fn sagittal_plane(v: &Volume3, c: usize, i: usize) -> Vec<f32> {
    let g = v.grid();
    let mut out = Vec::with_capacity(g.ny() * g.nz());
    let data = v.channel(c);
    for k in 0..g.nz() {
        for j in 0..g.ny() {
            out.push(data[g.index(i, j, k)]);
        }
    }
    out
}

pub fn set_sagittal_plane(v: &mut Volume3, c: usize, i: usize, plane: &[f32]) {
    let g = *v.grid();
    let data = v.channel_mut(c);
    for k in 0..g.nz() {
        for j in 0..g.ny() {
            data[g.index(i, j, k)] = plane[k * g.ny() + j];
        }
    }
}

/// One sagittal slice plus `radius` reflected neighbours on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack25D {
    pub center_i: usize,
    pub radius: usize,
    pub h: usize,
    pub w: usize,
    /// `(2r + 1) * h * w` values, slice-major.
    pub slices: Vec<f32>,
    /// Offset relative to `center_i` of each slice.
    pub offsets: Vec<i64>,
}

impl PatchStack25D {
    pub fn depth(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn slice(&self, n: usize) -> &[f32] {
        &self.slices[n * self.h * self.w..(n + 1) * self.h * self.w]
    }

    pub fn center(&self) -> &[f32] {
        self.slice(self.radius)
    }
}

pub fn sagittal_stack(vol: &Volume3, i: usize, radius: usize) -> PatchStack25D {
    let g = vol.grid();
    let (h, w) = (g.nz(), g.ny());
    let offsets: Vec<i64> = (-(radius as i64)..=radius as i64).collect();
    let mut slices = Vec::with_capacity(offsets.len() * h * w);
    for &o in &offsets {
        let src = reflect_index(i as i64 + o, g.nx());
        slices.extend(sagittal_plane(vol, 0, src));
    }
    PatchStack25D { center_i: i, radius, h, w, slices, offsets }
}

pub fn extract_patches(vol: &Volume3, radius: usize) -> Vec<PatchStack25D> {
    (0..vol.grid().nx()).map(|i| sagittal_stack(vol, i, radius)).collect()
}

/// Which condition modalities feed the network; `false` drops a modality (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Modalities {
    pub structural: bool,
    pub orientation: bool,
    pub bvec: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self { structural: true, orientation: true, bvec: true }
    }
}

impl Modalities {
    pub fn channels(&self) -> usize {
        self.structural as usize + 3 * self.orientation as usize + 2 * self.bvec as usize
    }
}

/// Channel-concatenated network input for one sagittal position of one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    pub h: usize,
    pub w: usize,
    /// Acquired DWI slices (`2r + 1` channels).
    pub x_plus: Vec<f32>,
    pub x_plus_channels: usize,
    /// Structural, orientation and b-vector channels, in that order.
    pub conditions: Vec<f32>,
    pub condition_channels: usize,
    pub channel_names: Vec<String>,
}

impl ConditionStack {
    pub fn total_channels(&self) -> usize {
        self.x_plus_channels + self.condition_channels
    }
}

pub fn assemble_condition_stack(
    x_plus: &PatchStack25D,
    structural: &Volume3,
    dti_orient: &Volume3,
    bvec_map: &Volume3,
    sagittal_i: usize,
    modalities: Modalities,
) -> Result<ConditionStack> {
    let g = structural.grid();
    g.ensure_matches(dti_orient.grid())?;
    g.ensure_matches(bvec_map.grid())?;
    if x_plus.h != g.nz() || x_plus.w != g.ny() {
        return Err(Error::Grid(format!("patch is {}x{}, grid plane is {}x{}", x_plus.h, x_plus.w, g.nz(), g.ny())));
    }
    if dti_orient.channels() != 3 || bvec_map.channels() != 2 {
        return Err(Error::Validation("orientation map needs 3 channels and b-vector map 2".into()));
    }
    let mut names: Vec<String> = x_plus.offsets.iter().map(|o| format!("dwi[{o:+}]")).collect();
    let mut conditions = Vec::with_capacity(modalities.channels() * g.nz() * g.ny());
    if modalities.structural {
        conditions.extend(sagittal_plane(structural, 0, sagittal_i));
        names.push("structural".into());
    }
    if modalities.orientation {
        for (c, axis) in ["x", "y", "z"].iter().enumerate() {
            conditions.extend(sagittal_plane(dti_orient, c, sagittal_i));
            names.push(format!("orient_{axis}"));
        }
    }
    if modalities.bvec {
        for (c, name) in ["theta", "phi"].iter().enumerate() {
            conditions.extend(sagittal_plane(bvec_map, c, sagittal_i));
            names.push(format!("bvec_{name}"));
        }
    }
    Ok(ConditionStack {
        h: x_plus.h,
        w: x_plus.w,
        x_plus: x_plus.slices.clone(),
        x_plus_channels: x_plus.depth(),
        conditions,
        condition_channels: modalities.channels(),
        channel_names: names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GradientTable;

    fn ramp_dwi(n: usize, spacing: f64, volumes: usize) -> DwiVolume {
        let g = Grid3::cube(n, spacing).unwrap();
        let mut bvals = vec![0.0];
        let mut bvecs = vec![[0.0; 3]];
        for _ in 1..volumes {
            bvals.push(1300.0);
            bvecs.push([0.0, 0.0, 1.0]);
        }
        let t = GradientTable::new(bvals, bvecs).unwrap();
        let vols = (0..volumes).map(|v| Volume3::from_fn(g, |i, j, k| 1.0 + (i + 2 * j + 3 * k + v) as f32)).collect();
        DwiVolume::new(g, vols, t).unwrap()
    }

    /// Sort-and-interpolate percentile, written independently of `percentile`.
    fn brute_percentile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = q / 100.0 * (v.len() - 1) as f64;
        let lo = pos as usize;
        if lo + 1 >= v.len() {
            return v[lo];
        }
        v[lo] * (1.0 - (pos - lo as f64)) + v[lo + 1] * (pos - lo as f64)
    }

    #[test]
    fn percentile_of_ramp() {
        let vals: Vec<f64> = (1..=100000).map(|x| x as f64).collect();
        let p = percentile(&vals, 99.9).unwrap();
        assert!((p - brute_percentile(&vals, 99.9)).abs() < 1e-9);
        assert!((p - 99900.001).abs() < 1e-6);
    }

    #[test]
    fn normalize_ramp_and_constant() {
        let g = Grid3::new([100000, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::new(g, 1, (1..=100000).map(|x| x as f32).collect()).unwrap();
        let (n, rec) = normalize_volume(&v).unwrap();
        assert!((rec.scale - 99900.001).abs() < 1e-2);
        assert_eq!(n.data()[99999], 1.0);

        let c = Volume3::new(Grid3::cube(4, 1.0).unwrap(), 1, vec![5.0; 64]).unwrap();
        let (n, rec) = normalize_volume(&c).unwrap();
        assert_eq!(rec.scale, 5.0);
        assert!(n.data().iter().all(|&x| x == 1.0));

        let z = Volume3::zeros(Grid3::cube(2, 1.0).unwrap(), 1);
        assert!(matches!(normalize_volume(&z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn normalized_ramp_is_nearly_unchanged() {
        let g = Grid3::new([1001, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::new(g, 1, (0..=1000).map(|x| x as f32 / 1000.0).collect()).unwrap();
        let (n, rec) = normalize_volume(&v).unwrap();
        let brute = brute_percentile(&(0..=1000).map(|x| x as f64 / 1000.0).collect::<Vec<_>>(), 99.9);
        assert!((rec.scale - brute).abs() < 1e-6);
        for (a, b) in v.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let g = Grid3::cube(6, 2.0).unwrap();
        let v = Volume3::from_fn(g, |i, j, k| (i * 7 + j * 3 + k) as f32 * 0.37);
        let same = resample_isotropic(&v, 2.0, [6, 6, 6]).unwrap();
        assert_eq!(same.data(), v.data());

        let ones = Volume3::new(g, 1, vec![1.0; g.len()]).unwrap();
        let r = resample_isotropic(&ones, 1.5, [5, 5, 5]).unwrap();
        assert!(r.data().iter().all(|&x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn resample_ramp_midpoints() {
        let g = Grid3::new([8, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume3::from_fn(g, |i, _, _| (2 * i) as f32);
        // Spacing 1 mm over the same extent: every other sample is a midpoint.
        let src_center = g.center()[0];
        let r = resample_isotropic(&v, 1.0, [15, 1, 1]).unwrap();
        for t in 0..15 {
            let world = r.grid().world([t as f64, 0.0, 0.0])[0];
            assert!((world - (src_center - 7.0 + t as f64)).abs() < 1e-12);
            let expected =
                if t % 2 == 0 { v.get(t / 2, 0, 0) } else { (v.get(t / 2, 0, 0) + v.get(t / 2 + 1, 0, 0)) / 2.0 };
            assert!((r.get(t, 0, 0) - expected).abs() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn truncate_top_20mm() {
        let d = ramp_dwi(64, 2.0, 2);
        let (cut_dwi, cut) = truncate_fov(&d, Side::Top, 20.0).unwrap();
        assert_eq!((cut.first_missing_k, cut.last_missing_k), (Some(54), Some(63)));
        assert_eq!(cut.slices(), 10);
        assert_eq!(cut_dwi.volume(1).get(5, 5, 54), 0.0);
        assert_ne!(cut_dwi.volume(1).get(5, 5, 53), 0.0);
        let restored = splice_imputation(&cut_dwi, &d, &cut).unwrap();
        assert_eq!(restored, d);
    }

    #[test]
    fn truncate_zero_cut() {
        let d = ramp_dwi(8, 2.0, 2);
        let (same, cut) = truncate_fov(&d, Side::Bottom, 0.0).unwrap();
        assert!(cut.is_empty());
        assert_eq!(same, d);
        assert_eq!(splice_imputation(&d, &ramp_dwi(8, 2.0, 2), &cut).unwrap(), d);
    }

    #[test]
    fn truncate_everything_fails() {
        let d = ramp_dwi(8, 2.0, 2);
        assert!(matches!(truncate_fov(&d, Side::Top, 16.0), Err(Error::InvalidCut(_))));
    }

    #[test]
    fn detect_inverts_truncate() {
        let d = ramp_dwi(16, 2.0, 2);
        let brain = Mask::full(*d.grid());
        assert_eq!(detect_fov_cutoff(&d, &brain), None);
        let (cut_dwi, cut) = truncate_fov(&d, Side::Top, 10.0).unwrap();
        let found = detect_fov_cutoff(&cut_dwi, &brain).unwrap();
        assert_eq!(found.side, Side::Top);
        assert_eq!(found.slices(), cut.slices());
        assert_eq!(found.cut_mm, 10.0);
    }

    #[test]
    fn detect_ignores_air_only_cut() {
        let d = ramp_dwi(16, 2.0, 2);
        let brain = Mask::from_fn(*d.grid(), |_, _, k| (2..10).contains(&k));
        let (cut_dwi, _) = truncate_fov(&d, Side::Top, 8.0).unwrap();
        assert_eq!(detect_fov_cutoff(&cut_dwi, &brain), None);
    }

    #[test]
    fn splice_counts_changed_voxels() {
        let d = ramp_dwi(8, 1.0, 2);
        let cut = FovCut::new(Side::Top, 3.0, d.grid()).unwrap();
        let ones = map_dwi(&d, |_| 1.0);
        let out = splice_imputation(&d, &ones, &cut).unwrap();
        for v in 0..2 {
            let changed = out.volume(v).data().iter().zip(d.volume(v).data()).filter(|(a, b)| a != b).count();
            let expected = 3 * 64 - d.volume(v).data()[5 * 64..].iter().filter(|&&x| x == 1.0).count();
            assert_eq!(changed, expected);
        }
    }

    #[test]
    fn copy_baseline_repeats_boundary() {
        let d = ramp_dwi(8, 1.0, 2);
        let cut = FovCut::new(Side::Top, 2.0, d.grid()).unwrap();
        let out = copy_nearest_slice(&d, &cut);
        assert_eq!(out.volume(1).get(3, 2, 7), d.volume(1).get(3, 2, 5));
        let cut = FovCut::new(Side::Bottom, 2.0, d.grid()).unwrap();
        let out = copy_nearest_slice(&d, &cut);
        assert_eq!(out.volume(1).get(3, 2, 0), d.volume(1).get(3, 2, 2));
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect_index(-1, 10), 1);
        assert_eq!(reflect_index(-2, 10), 2);
        assert_eq!(reflect_index(10, 10), 8);
        assert_eq!(reflect_index(11, 10), 7);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn patches_reassemble() {
        let g = Grid3::new([7, 4, 5], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::from_fn(g, |i, j, k| (i * 100 + j * 10 + k) as f32);
        let stacks = extract_patches(&v, PATCH_RADIUS);
        assert_eq!(stacks.len(), 7);
        let mut rebuilt = Volume3::zeros(g, 1);
        for s in &stacks {
            assert_eq!(s.depth(), 11);
            assert_eq!(s.center(), sagittal_plane(&v, 0, s.center_i).as_slice());
            set_sagittal_plane(&mut rebuilt, 0, s.center_i, s.center());
        }
        assert_eq!(rebuilt, v);
        // i = 0: offsets -1, -2 read slices 1, 2
        assert_eq!(stacks[0].slice(4), sagittal_plane(&v, 0, 1).as_slice());
        assert_eq!(stacks[0].slice(3), sagittal_plane(&v, 0, 2).as_slice());
    }

    #[test]
    fn condition_channel_counts() {
        let g = Grid3::new([4, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let dwi = Volume3::from_fn(g, |i, _, _| i as f32);
        let structural = Volume3::from_fn(g, |_, j, _| j as f32);
        let orient = Volume3::zeros(g, 3);
        let bmap = crate::dti::bvec_map([1.0, 0.0, 0.0], &g);
        let stack = sagittal_stack(&dwi, 1, PATCH_RADIUS);
        let full = assemble_condition_stack(&stack, &structural, &orient, &bmap, 1, Modalities::default()).unwrap();
        assert_eq!(full.total_channels(), 17);
        assert_eq!(full.channel_names.len(), 17);
        let hw = 64;
        let theta = &full.conditions[4 * hw..5 * hw];
        assert!(theta.iter().all(|&x| x == theta[0]));
        let ablated = assemble_condition_stack(
            &stack,
            &structural,
            &orient,
            &bmap,
            1,
            Modalities { structural: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(ablated.total_channels(), 16);
    }
}
