//! Diffusion tensor estimation and the derived orientation / b-vector condition maps.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::util::par_map;
use crate::volume::{norm3, DwiVolume, GradientTable, Grid3, Mask, Volume3};

pub const DEFAULT_SIGNAL_FLOOR: f64 = 1e-6;

const JACOBI_TOL: f64 = 1e-13;
const JACOBI_MAX_SWEEPS: usize = 50;

pub type Mat3 = [[f64; 3]; 3];

/// Symmetric tensor `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` in mm²/s plus `ln S0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTensor {
    pub d: [f64; 6],
    pub ln_s0: f64,
}

impl DiffusionTensor {
    pub fn from_matrix(m: &Mat3, ln_s0: f64) -> Self {
        Self { d: [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]], ln_s0 }
    }

    /// Tensor with principal axis `e1` and orthonormal frame `(e1, e2, e3)`.
    pub fn from_eigen(eigvals: [f64; 3], frame: [[f64; 3]; 3], ln_s0: f64) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (lam, e) in eigvals.iter().zip(frame.iter()) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += lam * e[r] * e[c];
                }
            }
        }
        Self::from_matrix(&m, ln_s0)
    }

    pub fn matrix(&self) -> Mat3 {
        let [xx, yy, zz, xy, xz, yz] = self.d;
        [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
    }

    /// Apparent diffusion coefficient along unit direction `g`.
    pub fn adc(&self, g: &[f64; 3]) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.d;
        xx * g[0] * g[0]
            + yy * g[1] * g[1]
            + zz * g[2] * g[2]
            + 2.0 * (xy * g[0] * g[1] + xz * g[0] * g[2] + yz * g[1] * g[2])
    }

    /// Stejskal–Tanner signal `S0 exp(-b gᵀDg)`.
    pub fn signal(&self, b: f64, g: &[f64; 3]) -> f64 {
        (self.ln_s0 - b * self.adc(g)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen3 {
    /// Descending.
    pub values: [f64; 3],
    /// `vectors[n]` pairs with `values[n]`.
    pub vectors: [[f64; 3]; 3],
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
pub fn eig_sym3(m: &Mat3) -> Eigen3 {
    let mut a = *m;
    // columns of v are eigenvectors
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let norm = frob(&a);
    if norm > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off = (2.0 * (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2])).sqrt();
            if off < JACOBI_TOL * norm {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- Jᵀ A J
                for k in 0..3 {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.map(|n| a[n][n]);
    let vectors = order.map(|n| [v[0][n], v[1][n], v[2][n]]);
    Eigen3 { values, vectors }
}

fn frob(m: &Mat3) -> f64 {
    m.iter().flat_map(|r| r.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Tensors with eigenvalue norm below this (mm²/s) are treated as zero.
const NEGLIGIBLE_DIFFUSIVITY: f64 = 1e-12;

/// FA with negative eigenvalues clamped to zero; (numerically) zero tensor gives 0.
pub fn fractional_anisotropy(eigvals: &[f64; 3]) -> f64 {
    let l = eigvals.map(|x| x.max(0.0));
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let num: f64 = l.iter().map(|x| (x - mean) * (x - mean)).sum();
    let den: f64 = l.iter().map(|x| x * x).sum();
    if den.sqrt() <= NEGLIGIBLE_DIFFUSIVITY {
        0.0
    } else {
        (1.5 * num / den).sqrt().min(1.0)
    }
}

pub fn mean_diffusivity(eigvals: &[f64; 3]) -> f64 {
    eigvals.iter().map(|x| x.max(0.0)).sum::<f64>() / 3.0
}

/// Fitted tensors with derived scalar maps over a mask.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub grid: Grid3,
    /// Voxels that were fitted (the input mask).
    pub mask: Mask,
    /// `None` outside the mask and where the fit failed.
    pub tensors: Vec<Option<DiffusionTensor>>,
    pub eigenvalues: Vec<[f64; 3]>,
    pub fa: Volume3,
    pub md: Volume3,
    /// Unit principal eigenvector, zero where undefined.
    pub v1: Vec<[f64; 3]>,
    /// Some signal was at or below the floor.
    pub fit_failed: Mask,
    /// A negative eigenvalue was clamped for FA/MD.
    pub clamped: Mask,
}

impl TensorField {
    /// Assemble a field from per-voxel tensors.
    pub fn from_tensors(grid: Grid3, mask: Mask, tensors: Vec<Option<DiffusionTensor>>, fit_failed: Mask) -> Self {
        let n = grid.len();
        let decomp: Vec<Option<Eigen3>> = par_map(&tensors, |t| t.map(|t| eig_sym3(&t.matrix())));
        let mut fa = vec![0f32; n];
        let mut md = vec![0f32; n];
        let mut v1 = vec![[0.0; 3]; n];
        let mut eigenvalues = vec![[0.0; 3]; n];
        let mut clamped = Mask::empty(grid);
        for (idx, e) in decomp.iter().enumerate() {
            if let Some(e) = e {
                fa[idx] = fractional_anisotropy(&e.values) as f32;
                md[idx] = mean_diffusivity(&e.values) as f32;
                v1[idx] = e.vectors[0];
                eigenvalues[idx] = e.values;
                if e.values.iter().any(|&x| x < 0.0) {
                    let (i, j, k) = grid.coords(idx);
                    clamped.set(i, j, k, true);
                }
            }
        }
        Self {
            grid,
            mask,
            tensors,
            eigenvalues,
            fa: Volume3::new(grid, 1, fa).expect("fa length"),
            md: Volume3::new(grid, 1, md).expect("md length"),
            v1,
            fit_failed,
            clamped,
        }
    }

    /// Voxels carrying a valid tensor.
    pub fn defined(&self) -> Mask {
        Mask::new(self.grid, self.tensors.iter().map(Option::is_some).collect()).expect("same grid")
    }

    /// Principal eigenvectors as a 3-channel volume.
    pub fn v1_volume(&self) -> Volume3 {
        let n = self.grid.len();
        let mut data = vec![0f32; 3 * n];
        for (idx, v) in self.v1.iter().enumerate() {
            for c in 0..3 {
                data[c * n + idx] = v[c] as f32;
            }
        }
        Volume3::new(self.grid, 3, data).expect("v1 length")
    }
}

/// Householder QR of a tall design matrix, kept for repeated solves.
struct QrSolver {
    rows: usize,
    cols: usize,
    /// Householder vectors, column-major per reflector.
    reflectors: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

impl QrSolver {
    fn new(a: &[Vec<f64>]) -> Result<Self> {
        let rows = a.len();
        let cols = a.first().map_or(0, Vec::len);
        if rows < cols {
            return Err(Error::DesignRank(format!("{rows} measurements for {cols} unknowns")));
        }
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut reflectors = Vec::with_capacity(cols);
        let scale = a.iter().flat_map(|r| r.iter()).fold(0.0f64, |s, x| s.max(x.abs()));
        for c in 0..cols {
            let mut v: Vec<f64> = (c..rows).map(|r| m[r][c]).collect();
            let alpha = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if alpha <= 1e-10 * scale.max(1.0) {
                return Err(Error::DesignRank(format!("column {c} is linearly dependent")));
            }
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * alpha;
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= vnorm);
            for cc in c..cols {
                let dot: f64 = (c..rows).map(|r| v[r - c] * m[r][cc]).sum();
                for r in c..rows {
                    m[r][cc] -= 2.0 * v[r - c] * dot;
                }
            }
            reflectors.push(v);
        }
        let r = (0..cols).map(|row| (0..cols).map(|c| if c >= row { m[row][c] } else { 0.0 }).collect()).collect();
        Ok(Self { rows, cols, reflectors, r })
    }

    fn solve(&self, y: &[f64]) -> Vec<f64> {
        let mut b = y.to_vec();
        for (c, v) in self.reflectors.iter().enumerate() {
            let dot: f64 = (c..self.rows).map(|r| v[r - c] * b[r]).sum();
            for r in c..self.rows {
                b[r] -= 2.0 * v[r - c] * dot;
            }
        }
        let mut x = vec![0.0; self.cols];
        for row in (0..self.cols).rev() {
            let s: f64 = ((row + 1)..self.cols).map(|c| self.r[row][c] * x[c]).sum();
            x[row] = (b[row] - s) / self.r[row][row];
        }
        x
    }
}

/// Row of the log-linear tensor design for one volume.
pub fn design_row(b: f64, g: &[f64; 3]) -> Vec<f64> {
    vec![
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
        1.0,
    ]
}

fn design_matrix(t: &GradientTable) -> Vec<Vec<f64>> {
    (0..t.len()).map(|v| design_row(t.bvals()[v], &t.unit_bvec(v))).collect()
}

/// Log-linear least-squares tensor fit over the masked voxels.
pub fn fit_dti(d: &DwiVolume, mask: &Mask, signal_floor: f64) -> Result<TensorField> {
    let grid = *d.grid();
    grid.ensure_matches(mask.grid())?;
    if mask.is_empty() {
        return Err(Error::DegenerateInput("empty mask".into()));
    }
    let t = d.gradients();
    let qr = QrSolver::new(&design_matrix(t))?;
    let voxels = mask.indices();
    let fits: Vec<(DiffusionTensor, bool)> = par_map(&voxels, |&idx| {
        let mut failed = false;
        let y: Vec<f64> = d
            .volumes()
            .iter()
            .map(|v| {
                let s = v.data()[idx] as f64;
                if s <= signal_floor {
                    failed = true;
                }
                s.max(signal_floor).ln()
            })
            .collect();
        let p = qr.solve(&y);
        (DiffusionTensor { d: [p[0], p[1], p[2], p[3], p[4], p[5]], ln_s0: p[6] }, failed)
    });
    let mut tensors = vec![None; grid.len()];
    let mut fit_failed = Mask::empty(grid);
    for (&idx, (tensor, failed)) in voxels.iter().zip(fits) {
        if failed {
            let (i, j, k) = grid.coords(idx);
            fit_failed.set(i, j, k, true);
        } else {
            tensors[idx] = Some(tensor);
        }
    }
    Ok(TensorField::from_tensors(grid, mask.clone(), tensors, fit_failed))
}

/// Angles between the principal eigenvector and each axis, scaled to [0, 1].
pub fn orientation_map(tf: &TensorField) -> Volume3 {
    let n = tf.grid.len();
    let mut data = vec![0f32; 3 * n];
    for (idx, t) in tf.tensors.iter().enumerate() {
        if t.is_none() {
            continue;
        }
        let v = tf.v1[idx];
        for a in 0..3 {
            let angle = v[a].abs().min(1.0).acos();
            data[a * n + idx] = (angle / FRAC_PI_2) as f32;
        }
    }
    Volume3::new(tf.grid, 3, data).expect("orientation length")
}

/// Polar angles of a b-vector, scaled: `(θ/π, (φ+π)/2π)`. Zero vector gives `(0, 0.5)`.
pub fn bvec_angles(g: [f64; 3]) -> (f64, f64) {
    let n = norm3(&g);
    if n == 0.0 {
        return (0.0, 0.5);
    }
    let theta = (g[2] / n).clamp(-1.0, 1.0).acos();
    let phi = if g[0] == 0.0 && g[1] == 0.0 { 0.0 } else { g[1].atan2(g[0]) };
    (theta / PI, (phi + PI) / (2.0 * PI))
}

/// Two constant channels holding the scaled polar angles of `g`.
pub fn bvec_map(g: [f64; 3], grid: &Grid3) -> Volume3 {
    let (theta, phi) = bvec_angles(g);
    let n = grid.len();
    let mut data = vec![theta as f32; 2 * n];
    data[n..].fill(phi as f32);
    Volume3::new(*grid, 2, data).expect("bvec map length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scheme() -> GradientTable {
        // b0 plus 12 non-collinear directions
        const H: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let dirs: Vec<[f64; 3]> = vec![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [H, H, 0.0],
            [H, 0.0, H],
            [0.0, H, H],
            [H, -H, 0.0],
            [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
            [-0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
            [0.0, -H, H],
        ];
        let mut bvals = vec![0.0];
        let mut bvecs = vec![[0.0; 3]];
        for g in dirs {
            bvals.push(1300.0);
            bvecs.push(g);
        }
        GradientTable::new(bvals, bvecs).unwrap()
    }

    fn synth(t: &DiffusionTensor, table: &GradientTable) -> DwiVolume {
        let g = Grid3::cube(1, 1.0).unwrap();
        let vols = (0..table.len())
            .map(|v| Volume3::new(g, 1, vec![t.signal(table.bvals()[v], &table.unit_bvec(v)) as f32]).unwrap())
            .collect();
        DwiVolume::new(g, vols, table.clone()).unwrap()
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = eig_sym3(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(e.values, [1.0, 1.0, 1.0]);
        let e = eig_sym3(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(e.values, [3.0, 2.0, 1.0]);
        assert_eq!(e.vectors[0].map(f64::abs), [0.0, 1.0, 0.0]);
        assert_eq!(e.vectors[2].map(f64::abs), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn eig_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in r..3 {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    m[r][c] = x;
                    m[c][r] = x;
                }
            }
            let e = eig_sym3(&m);
            let mut rec = [[0.0; 3]; 3];
            for n in 0..3 {
                for r in 0..3 {
                    for c in 0..3 {
                        rec[r][c] += e.values[n] * e.vectors[n][r] * e.vectors[n][c];
                    }
                }
            }
            let mut err = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    err += (rec[r][c] - m[r][c]).powi(2);
                }
            }
            assert!(err.sqrt() <= 1e-9 * frob(&m));
            assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|r| e.vectors[a][r] * e.vectors[b][r]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fit_isotropic_exact() {
        let t = DiffusionTensor { d: [0.7e-3, 0.7e-3, 0.7e-3, 0.0, 0.0, 0.0], ln_s0: 0.0 };
        let table = scheme();
        let d = synth(&t, &table);
        let tf = fit_dti(&d, &Mask::full(*d.grid()), DEFAULT_SIGNAL_FLOOR).unwrap();
        let fit = tf.tensors[0].unwrap();
        for c in 0..6 {
            assert!((fit.d[c] - t.d[c]).abs() < 1e-9, "component {c}: {} vs {}", fit.d[c], t.d[c]);
        }
        assert!(tf.fa.data()[0] < 1e-3);
    }

    #[test]
    fn fit_stick_tensor() {
        let t = DiffusionTensor::from_eigen(
            [1.7e-3, 0.2e-3, 0.2e-3],
            [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            0.0,
        );
        let d = synth(&t, &scheme());
        let tf = fit_dti(&d, &Mask::full(*d.grid()), DEFAULT_SIGNAL_FLOOR).unwrap();
        let v = tf.v1[0];
        assert!((v[2].abs() - 1.0).abs() < 1e-6);
        let analytic = (1.5 * (1.0 + 0.25 + 0.25) / (2.89 + 0.04 + 0.04f64)).sqrt();
        assert!((tf.fa.data()[0] as f64 - analytic).abs() < 1e-5);
    }

    #[test]
    fn fit_flat_signal_gives_zero_tensor() {
        let table = scheme();
        let g = Grid3::cube(1, 1.0).unwrap();
        let vols = (0..table.len()).map(|_| Volume3::new(g, 1, vec![0.8]).unwrap()).collect();
        let d = DwiVolume::new(g, vols, table).unwrap();
        let tf = fit_dti(&d, &Mask::full(g), DEFAULT_SIGNAL_FLOOR).unwrap();
        assert!(tf.tensors[0].unwrap().d.iter().all(|x| x.abs() < 1e-15));
        assert_eq!(tf.fa.data()[0], 0.0);
    }

    #[test]
    fn fit_flags_floor_and_rank() {
        let table = scheme();
        let g = Grid3::cube(1, 1.0).unwrap();
        let vols =
            (0..table.len()).map(|v| Volume3::new(g, 1, vec![if v == 3 { 0.0 } else { 0.5 }]).unwrap()).collect();
        let d = DwiVolume::new(g, vols, table).unwrap();
        let tf = fit_dti(&d, &Mask::full(g), DEFAULT_SIGNAL_FLOOR).unwrap();
        assert!(tf.fit_failed.get(0, 0, 0));
        assert!(tf.tensors[0].is_none());

        let collinear = GradientTable::new(
            vec![0.0, 1300.0, 1300.0, 1300.0, 1300.0, 1300.0, 1300.0],
            vec![
                [0.0; 3],
                [1.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
        )
        .unwrap();
        let vols = (0..7).map(|_| Volume3::new(g, 1, vec![0.5]).unwrap()).collect();
        let d = DwiVolume::new(g, vols, collinear).unwrap();
        assert!(matches!(fit_dti(&d, &Mask::full(g), DEFAULT_SIGNAL_FLOOR), Err(Error::DesignRank(_))));
    }

    fn single_voxel_field(v1: [f64; 3]) -> TensorField {
        let g = Grid3::cube(1, 1.0).unwrap();
        let e2 = if v1[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let d = v1[0] * e2[0] + v1[1] * e2[1] + v1[2] * e2[2];
        let mut e2 = [e2[0] - d * v1[0], e2[1] - d * v1[1], e2[2] - d * v1[2]];
        let n = norm3(&e2);
        e2.iter_mut().for_each(|x| *x /= n);
        let e3 = [v1[1] * e2[2] - v1[2] * e2[1], v1[2] * e2[0] - v1[0] * e2[2], v1[0] * e2[1] - v1[1] * e2[0]];
        let t = DiffusionTensor::from_eigen([1.7e-3, 0.2e-3, 0.2e-3], [v1, e2, e3], 0.0);
        TensorField::from_tensors(g, Mask::full(g), vec![Some(t)], Mask::empty(g))
    }

    #[test]
    fn orientation_channels() {
        let m = orientation_map(&single_voxel_field([1.0, 0.0, 0.0]));
        for (c, want) in [0.0f32, 1.0, 1.0].iter().enumerate() {
            assert!((m.channel(c)[0] - want).abs() < 1e-6);
        }
        let s = 1.0 / 3f64.sqrt();
        let m = orientation_map(&single_voxel_field([s, s, s]));
        let want = ((1.0 / 3f64.sqrt()).acos() / FRAC_PI_2) as f32;
        assert!((want - 0.6082).abs() < 1e-4);
        for c in 0..3 {
            assert!((m.channel(c)[0] - want).abs() < 1e-5);
        }
        let a = orientation_map(&single_voxel_field([0.6, 0.0, 0.8]));
        let b = orientation_map(&single_voxel_field([-0.6, 0.0, -0.8]));
        for c in 0..3 {
            assert!((a.channel(c)[0] - b.channel(c)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn bvec_map_values() {
        let g = Grid3::cube(3, 1.0).unwrap();
        let m = bvec_map([0.0, 0.0, 1.0], &g);
        assert!(m.channel(0).iter().all(|&x| x == 0.0));
        assert!(m.channel(1).iter().all(|&x| x == 0.5));
        let m = bvec_map([1.0, 0.0, 0.0], &g);
        assert!(m.channel(0).iter().all(|&x| (x - 0.5).abs() < 1e-7));
        assert!(m.channel(1).iter().all(|&x| (x - 0.5).abs() < 1e-7));
        assert_eq!(bvec_angles([0.0; 3]), (0.0, 0.5));
    }
}
