//! Real even-order spherical harmonics, regularized signal fitting and the
//! imputation metrics (angular correlation coefficient, PSNR, WM split).

use std::f64::consts::PI;

use crate::dti::TensorField;
use crate::error::{Error, Result};
use crate::util::{pairwise_sum, par_map};
use crate::volume::{DwiVolume, Grid3, Mask, Volume3};

pub const DEFAULT_LAMBDA_LB: f64 = 0.006;
pub const DEFAULT_L_MAX: usize = 4;
pub const DEFAULT_WM_FA: f64 = 0.3;

const ACC_MIN_NORM: f64 = 1e-12;

/// Index map for the even-order real basis: `j = l(l-1)/2 + (m + l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShBasis {
    l_max: usize,
}

impl ShBasis {
    pub fn new(l_max: usize) -> Result<Self> {
        if l_max < 2 || l_max % 2 != 0 {
            return Err(Error::Unsupported(format!("l_max must be even and >= 2, got {l_max}")));
        }
        Ok(Self { l_max })
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn len(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 2) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, l: usize, m: i64) -> usize {
        l * l.saturating_sub(1) / 2 + (m + l as i64) as usize
    }

    /// `(l, m)` for every coefficient in index order.
    pub fn orders(&self) -> Vec<(usize, i64)> {
        (0..=self.l_max).step_by(2).flat_map(|l| (-(l as i64)..=l as i64).map(move |m| (l, m))).collect()
    }

    /// Evaluate every basis function at a unit direction.
    pub fn eval_all(&self, dir: &[f64; 3]) -> Vec<f64> {
        self.orders().iter().map(|&(l, m)| real_sh(l, m, dir)).collect()
    }
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l - m)! / (l + m)!
    ((l - m + 1)..=(l + m)).fold(1.0, |acc, k| acc / k as f64)
}

/// Associated Legendre `P_l^m(x)` without the Condon–Shortley phase.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    let mut pmm = 1.0;
    let mut fact = 1.0;
    for _ in 0..m {
        pmm *= fact * somx2;
        fact += 2.0;
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = (x * (2 * ll - 1) as f64 * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

fn real_sh(l: usize, m: i64, dir: &[f64; 3]) -> f64 {
    let r = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let cos_t = (dir[2] / r).clamp(-1.0, 1.0);
    let phi = dir[1].atan2(dir[0]);
    let am = m.unsigned_abs() as usize;
    let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial_ratio(l, am)).sqrt();
    let p = legendre(l, am, cos_t);
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => norm * p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * norm * p * (am as f64 * phi).sin(),
    }
}

/// Real symmetric spherical harmonic `Y_lm` at a unit direction (even `l` only).
pub fn sh_eval(l: usize, m: i64, direction: &[f64; 3]) -> Result<f64> {
    if l % 2 != 0 {
        return Err(Error::Unsupported(format!("odd order l = {l}")));
    }
    if m.unsigned_abs() as usize > l {
        return Err(Error::Validation(format!("|m| = {} exceeds l = {l}", m.abs())));
    }
    Ok(real_sh(l, m, direction))
}

/// Regularized least-squares projector `(BᵀB + λL)⁻¹Bᵀ` for a fixed direction set.
#[derive(Debug, Clone)]
pub struct ShFitter {
    basis: ShBasis,
    /// `R x n_dirs`, row-major.
    projector: Vec<f64>,
    n_dirs: usize,
}

impl ShFitter {
    pub fn new(basis: ShBasis, directions: &[[f64; 3]], lambda_lb: f64) -> Result<Self> {
        let r = basis.len();
        let n = directions.len();
        if n == 0 {
            return Err(Error::DegenerateInput("no directions".into()));
        }
        let b: Vec<Vec<f64>> = directions.iter().map(|d| basis.eval_all(d)).collect();
        let orders = basis.orders();
        let mut gram = vec![0.0; r * r];
        for a in 0..r {
            for c in 0..r {
                gram[a * r + c] = (0..n).map(|d| b[d][a] * b[d][c]).sum();
            }
            let l = orders[a].0 as f64;
            gram[a * r + a] += lambda_lb * l * l * (l + 1.0) * (l + 1.0);
        }
        let inv = invert_spd(&gram, r)?;
        let mut projector = vec![0.0; r * n];
        for a in 0..r {
            for d in 0..n {
                projector[a * n + d] = (0..r).map(|c| inv[a * r + c] * b[d][c]).sum();
            }
        }
        Ok(Self { basis, projector, n_dirs: n })
    }

    pub fn basis(&self) -> ShBasis {
        self.basis
    }

    pub fn fit_signal(&self, samples: &[f64]) -> Vec<f64> {
        debug_assert_eq!(samples.len(), self.n_dirs);
        (0..self.basis.len())
            .map(|a| {
                let row = &self.projector[a * self.n_dirs..(a + 1) * self.n_dirs];
                row.iter().zip(samples).map(|(p, s)| p * s).sum()
            })
            .collect()
    }
}

/// Cholesky-based inverse of a symmetric positive definite matrix.
fn invert_spd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    let scale = (0..n).fold(0.0f64, |s, i| s.max(a[i * n + i].abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 1e-12 * scale {
                    return Err(Error::Numerical(format!("normal matrix is singular at pivot {i}")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    Ok(inv)
}

/// SH coefficients over a set of voxels.
#[derive(Debug, Clone)]
pub struct ShField {
    pub basis: ShBasis,
    pub grid: Grid3,
    /// Linear indices of fitted voxels, ascending.
    pub voxels: Vec<usize>,
    /// `voxels.len() * R` coefficients.
    pub coeffs: Vec<f64>,
    /// Masked voxels dropped because their mean b0 was not positive.
    pub excluded: Mask,
}

impl ShField {
    pub fn coeffs_at(&self, n: usize) -> &[f64] {
        let r = self.basis.len();
        &self.coeffs[n * r..(n + 1) * r]
    }

    /// Position of a linear voxel index in `voxels`.
    pub fn position(&self, idx: usize) -> Option<usize> {
        self.voxels.binary_search(&idx).ok()
    }
}

/// Fit the attenuation `S / mean(S_b0)`, clamped to [0, 1], at every masked voxel.
pub fn fit_sh(d: &DwiVolume, mask: &Mask, l_max: usize, lambda_lb: f64) -> Result<ShField> {
    let grid = *d.grid();
    grid.ensure_matches(mask.grid())?;
    let basis = ShBasis::new(l_max)?;
    let t = d.gradients();
    let weighted = t.weighted_indices();
    let b0 = t.b0_indices();
    let dirs: Vec<[f64; 3]> = weighted.iter().map(|&v| t.unit_bvec(v)).collect();
    let fitter = ShFitter::new(basis, &dirs, lambda_lb)?;

    let candidates = mask.indices();
    let fits: Vec<Option<Vec<f64>>> = par_map(&candidates, |&idx| {
        let s0 = b0.iter().map(|&v| d.volume(v).data()[idx] as f64).sum::<f64>() / b0.len() as f64;
        if !(s0 > 0.0) {
            return None;
        }
        let s: Vec<f64> = weighted.iter().map(|&v| (d.volume(v).data()[idx] as f64 / s0).clamp(0.0, 1.0)).collect();
        Some(fitter.fit_signal(&s))
    });
    let mut voxels = Vec::new();
    let mut coeffs = Vec::new();
    let mut excluded = Mask::empty(grid);
    for (&idx, fit) in candidates.iter().zip(fits) {
        match fit {
            Some(c) => {
                voxels.push(idx);
                coeffs.extend(c);
            }
            None => {
                let (i, j, k) = grid.coords(idx);
                excluded.set(i, j, k, true);
            }
        }
    }
    Ok(ShField { basis, grid, voxels, coeffs, excluded })
}

/// ACC between two coefficient vectors, ignoring the `l = 0` term.
/// `None` when either anisotropic part is (numerically) zero.
pub fn acc_coeffs(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b).skip(1) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < ACC_MIN_NORM || nb < ACC_MIN_NORM {
        return None;
    }
    Some((ab / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct AccResult {
    pub per_voxel: Volume3,
    pub mean: f64,
    pub included: usize,
}

/// Angular correlation per voxel of `mask` and the mean over included voxels.
pub fn acc(a: &ShField, b: &ShField, mask: &Mask) -> Result<AccResult> {
    if a.basis != b.basis {
        return Err(Error::Basis(format!("l_max {} vs {}", a.basis.l_max(), b.basis.l_max())));
    }
    a.grid.ensure_matches(&b.grid)?;
    a.grid.ensure_matches(mask.grid())?;
    let mut per_voxel = Volume3::zeros(a.grid, 1);
    let mut values = Vec::new();
    for idx in mask.indices() {
        let (Some(pa), Some(pb)) = (a.position(idx), b.position(idx)) else { continue };
        if let Some(v) = acc_coeffs(a.coeffs_at(pa), b.coeffs_at(pb)) {
            per_voxel.data_mut()[idx] = v as f32;
            values.push(v);
        }
    }
    let mean = if values.is_empty() { f64::NAN } else { pairwise_sum(&values) / values.len() as f64 };
    Ok(AccResult { per_voxel, mean, included: values.len() })
}

/// PSNR in dB over the masked voxels of the selected volumes.
/// Returns `f64::INFINITY` when the images agree exactly.
pub fn psnr_volumes(reference: &DwiVolume, test: &DwiVolume, mask: &Mask, volumes: &[usize]) -> Result<f64> {
    reference.ensure_compatible(test)?;
    reference.grid().ensure_matches(mask.grid())?;
    let idx = mask.indices();
    if idx.is_empty() || volumes.is_empty() {
        return Err(Error::DegenerateInput("PSNR over an empty region".into()));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut sq = Vec::with_capacity(idx.len() * volumes.len());
    for &v in volumes {
        let r = reference.volume(v).data();
        let t = test.volume(v).data();
        for &i in &idx {
            peak = peak.max(r[i] as f64);
            let e = r[i] as f64 - t[i] as f64;
            sq.push(e * e);
        }
    }
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(reference: &DwiVolume, test: &DwiVolume, mask: &Mask) -> Result<f64> {
    let all: Vec<usize> = (0..reference.len()).collect();
    psnr_volumes(reference, test, mask, &all)
}

/// Split the fitted brain into FA ≥ threshold (WM) and the rest.
pub fn split_wm_mask(tf: &TensorField, fa_threshold: f64) -> (Mask, Mask) {
    let brain = &tf.mask;
    let wm_bits: Vec<bool> =
        brain.bits().iter().zip(tf.fa.data()).map(|(&b, &fa)| b && fa as f64 >= fa_threshold).collect();
    let non_wm_bits: Vec<bool> = brain.bits().iter().zip(&wm_bits).map(|(&b, &w)| b && !w).collect();
    (Mask::new(tf.grid, wm_bits).expect("same grid"), Mask::new(tf.grid, non_wm_bits).expect("same grid"))
}
