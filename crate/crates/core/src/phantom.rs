//! Synthetic multi-modal scans built from known tensor fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dti::{DiffusionTensor, TensorField};
use crate::error::{Error, Result};
use crate::util::{mix_seed, par_map_range};
use crate::volume::{DwiVolume, GradientTable, Grid3, Mask, Volume3};

pub const BACKGROUND_EIGENVALUES: [f64; 3] = [0.7e-3, 0.7e-3, 0.7e-3];
pub const BUNDLE_EIGENVALUES: [f64; 3] = [1.7e-3, 0.2e-3, 0.2e-3];
pub const DEFAULT_S0: f64 = 1000.0;
pub const DEFAULT_B: f64 = 1300.0;

const STRUCT_BACKGROUND: f32 = 500.0;
const STRUCT_BUNDLE: f32 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum BundleShape {
    /// Plate of fibres running along `direction`, `half_thickness` mm either side
    /// of the plane through `center` spanned by `direction` and `extent_axis`.
    Slab { center: [f64; 3], direction: [f64; 3], extent_axis: [f64; 3], half_thickness: f64 },
    /// Tube of radius `tube_radius` around a circle of `radius` about `axis`.
    Arc { center: [f64; 3], axis: [f64; 3], radius: f64, tube_radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub name: String,
    #[serde(flatten)]
    pub shape: BundleShape,
    pub eigenvalues: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub n_dirs: usize,
    pub n_b0: usize,
    pub b: f64,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        Self { n_dirs: 32, n_b0: 2, b: DEFAULT_B }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid3,
    /// Brain ellipsoid semi-axes (mm), centred on the grid.
    pub brain_semi_axes: [f64; 3],
    pub background_eigenvalues: [f64; 3],
    pub bundles: Vec<BundleSpec>,
    pub scheme: SchemeSpec,
    pub s0: f64,
    /// Rician noise level as an absolute signal value; 0 is noiseless.
    pub sigma: f64,
    pub seed: u64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Orthonormal frame whose first axis is `e1`.
fn frame_from(e1: [f64; 3], hint: [f64; 3]) -> [[f64; 3]; 3] {
    let e2 = normalize(cross(e1, hint))
        .or_else(|| normalize(cross(e1, [1.0, 0.0, 0.0])))
        .or_else(|| normalize(cross(e1, [0.0, 1.0, 0.0])))
        .expect("some axis is not parallel");
    let e3 = cross(e1, e2);
    [e1, e2, e3]
}

impl BundleSpec {
    /// Fibre direction at `p` if `p` lies inside the bundle.
    pub fn direction_at(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        match &self.shape {
            BundleShape::Slab { center, direction, extent_axis, half_thickness } => {
                let d = normalize(*direction)?;
                let n = normalize(cross(d, *extent_axis))?;
                (dot(sub(p, *center), n).abs() <= *half_thickness).then_some(d)
            }
            BundleShape::Arc { center, axis, radius, tube_radius } => {
                let a = normalize(*axis)?;
                let r = sub(p, *center);
                let along = dot(r, a);
                let radial = sub(r, [a[0] * along, a[1] * along, a[2] * along]);
                let rho = dot(radial, radial).sqrt();
                let dist = ((rho - radius).powi(2) + along * along).sqrt();
                if dist > *tube_radius || rho < 1e-9 {
                    return None;
                }
                normalize(cross(a, radial))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Validation(format!("bundle '{}' eigenvalues must be positive", self.name)));
        }
        let ok = match &self.shape {
            BundleShape::Slab { direction, extent_axis, half_thickness, .. } => {
                normalize(*direction).and_then(|d| normalize(cross(d, *extent_axis))).is_some() && *half_thickness > 0.0
            }
            BundleShape::Arc { axis, radius, tube_radius, .. } => {
                normalize(*axis).is_some() && *radius > 0.0 && *tube_radius > 0.0 && tube_radius < radius
            }
        };
        if !ok {
            return Err(Error::Validation(format!("bundle '{}' has degenerate geometry", self.name)));
        }
        Ok(())
    }
}

impl PhantomSpec {
    /// Stock phantoms: `"slab"` and `"arc+slab"`. The seed jitters bundle placement.
    pub fn preset(name: &str, n: usize, spacing: f64, scheme: SchemeSpec, sigma: f64, seed: u64) -> Result<Self> {
        let grid = Grid3::cube(n, spacing)?;
        let half = n as f64 * spacing / 2.0;
        let c = grid.center();
        let semi = [0.8 * half, 0.92 * half, half];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5eed]));
        let shift = rng.gen_range(-0.08..0.08) * half;
        let tilt = 30f64.to_radians();
        let slab = BundleSpec {
            name: "slab".into(),
            shape: BundleShape::Slab {
                center: [c[0], c[1] + shift, c[2]],
                direction: [0.0, tilt.sin(), tilt.cos()],
                extent_axis: [1.0, 0.0, 0.0],
                half_thickness: 0.16 * half,
            },
            eigenvalues: BUNDLE_EIGENVALUES,
        };
        let mut bundles = vec![slab];
        match name {
            "slab" => {}
            "arc+slab" => {
                let lift = rng.gen_range(0.3..0.4) * half;
                bundles.push(BundleSpec {
                    name: "arc".into(),
                    shape: BundleShape::Arc {
                        center: [c[0] + 0.3 * half, c[1], c[2] + lift],
                        axis: [1.0, 0.0, 0.0],
                        radius: 0.35 * half,
                        tube_radius: 0.1 * half,
                    },
                    eigenvalues: BUNDLE_EIGENVALUES,
                });
            }
            other => return Err(Error::Config(format!("unknown phantom preset '{other}'"))),
        }
        Ok(Self {
            grid,
            brain_semi_axes: semi,
            background_eigenvalues: BACKGROUND_EIGENVALUES,
            bundles,
            scheme,
            s0: DEFAULT_S0,
            sigma,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.background_eigenvalues.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Validation("background eigenvalues must be positive".into()));
        }
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Validation("brain semi-axes must be positive".into()));
        }
        if self.scheme.n_dirs < 6 || self.scheme.n_b0 == 0 {
            return Err(Error::Validation("scheme needs at least 6 directions and one b0".into()));
        }
        if !(self.s0 > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Validation("S0 must be positive and sigma non-negative".into()));
        }
        self.bundles.iter().try_for_each(BundleSpec::validate)
    }

    pub fn in_brain(&self, p: [f64; 3]) -> bool {
        let c = self.grid.center();
        let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / self.brain_semi_axes[a]).powi(2)).sum();
        q <= 1.0
    }
}

/// Per-voxel bundle labels: 0 is none, `n` is `names[n - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleLabels {
    pub grid: Grid3,
    pub labels: Vec<u8>,
    pub names: Vec<String>,
}

impl BundleLabels {
    pub fn mask(&self, label: u8) -> Mask {
        Mask::new(self.grid, self.labels.iter().map(|&l| l == label).collect()).expect("same grid")
    }

    pub fn any(&self) -> Mask {
        Mask::new(self.grid, self.labels.iter().map(|&l| l != 0).collect()).expect("same grid")
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3::new(self.grid, 1, self.labels.iter().map(|&l| l as f32).collect()).expect("same grid")
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub dwi: DwiVolume,
    pub structural: Volume3,
    pub brain: Mask,
    pub bundle_labels: BundleLabels,
    pub truth_tensors: TensorField,
    /// Voxels where a later bundle overrode an earlier one.
    pub overlaps: usize,
}

/// `n_dirs` directions spread by antipodal electrostatic repulsion on the upper
/// hemisphere, after `n_b0` zero-vector b0 entries.
pub fn default_scheme(n_dirs: usize, n_b0: usize, b: f64) -> Result<GradientTable> {
    if n_dirs < 6 {
        return Err(Error::Validation(format!("need at least 6 directions, got {n_dirs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts: Vec<[f64; 3]> = (0..n_dirs)
        .map(|_| loop {
            let p = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
            if let Some(u) = normalize(p) {
                break u;
            }
        })
        .collect();
    let mut step = 0.1;
    for _ in 0..3000 {
        let mut force = vec![[0.0; 3]; n_dirs];
        for i in 0..n_dirs {
            for j in 0..n_dirs {
                if i == j {
                    continue;
                }
                for s in [1.0, -1.0] {
                    let d = sub(pts[i], [s * pts[j][0], s * pts[j][1], s * pts[j][2]]);
                    let r2 = dot(d, d).max(1e-12);
                    let f = 1.0 / (r2 * r2.sqrt());
                    for a in 0..3 {
                        force[i][a] += f * d[a];
                    }
                }
            }
        }
        let fmax = force.iter().map(|f| dot(*f, *f).sqrt()).fold(0.0, f64::max).max(1e-12);
        for (p, f) in pts.iter_mut().zip(&force) {
            let moved = [p[0] + step * f[0] / fmax, p[1] + step * f[1] / fmax, p[2] + step * f[2] / fmax];
            *p = normalize(moved).unwrap_or(*p);
        }
        step *= 0.998;
    }
    let mut bvals = vec![0.0; n_b0];
    let mut bvecs = vec![[0.0; 3]; n_b0];
    for p in pts {
        let p = if p[2] < 0.0 { [-p[0], -p[1], -p[2]] } else { p };
        bvals.push(b);
        bvecs.push(p);
    }
    GradientTable::new(bvals, bvecs)
}

fn gaussian_blur(v: &[f32], dims: [usize; 3], sigma_vox: f64) -> Vec<f32> {
    let r = (3.0 * sigma_vox).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut cur: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let n = dims[axis] as i64;
        let mut out = vec![0.0; cur.len()];
        for idx in 0..cur.len() {
            let pos = (idx / strides[axis]) as i64 % n;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (t, w) in (-r..=r).zip(&kernel) {
                let q = pos + t;
                if q >= 0 && q < n {
                    acc += w * cur[(idx as i64 + t * strides[axis] as i64) as usize];
                    wsum += w;
                }
            }
            // renormalized at the borders
            out[idx] = acc / wsum;
        }
        cur = out;
    }
    cur.into_iter().map(|x| x as f32).collect()
}

/// Magnitude of a signal with independent Gaussian noise on both channels.
pub fn rician(s: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return s;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let a = s + n.sample(rng);
    let b = n.sample(rng);
    (a * a + b * b).sqrt()
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid;
    let n = grid.len();
    let scheme = default_scheme(spec.scheme.n_dirs, spec.scheme.n_b0, spec.scheme.b)?;
    let ln_s0 = spec.s0.ln();

    let mut brain_bits = vec![false; n];
    let mut labels = vec![0u8; n];
    let mut tensors: Vec<Option<DiffusionTensor>> = vec![None; n];
    let mut overlaps = 0;
    let background = DiffusionTensor::from_eigen(
        spec.background_eigenvalues,
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ln_s0,
    );
    for (idx, slot) in tensors.iter_mut().enumerate() {
        let (i, j, k) = grid.coords(idx);
        let p = grid.world([i as f64, j as f64, k as f64]);
        if !spec.in_brain(p) {
            continue;
        }
        brain_bits[idx] = true;
        let mut t = background;
        for (b, bundle) in spec.bundles.iter().enumerate() {
            if let Some(d) = bundle.direction_at(p) {
                if labels[idx] != 0 {
                    overlaps += 1;
                }
                labels[idx] = (b + 1) as u8;
                t = DiffusionTensor::from_eigen(bundle.eigenvalues, frame_from(d, [0.0, 0.0, 1.0]), ln_s0);
            }
        }
        *slot = Some(t);
    }
    if overlaps > 0 {
        log::info!("{overlaps} voxels covered by several bundles; later bundles win");
    }
    let brain = Mask::new(grid, brain_bits)?;

    let volumes: Vec<Volume3> = par_map_range(scheme.len(), |v| {
        let b = scheme.bvals()[v];
        let g = scheme.unit_bvec(v);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xd1, v as u64]));
        let data = tensors
            .iter()
            .map(|t| match t {
                Some(t) => rician(t.signal(b, &g), spec.sigma, &mut rng) as f32,
                None => 0.0,
            })
            .collect();
        Volume3::new(grid, 1, data).expect("grid length")
    });
    let dwi = DwiVolume::new(grid, volumes, scheme)?;

    let raw: Vec<f32> = (0..n)
        .map(|idx| match (brain.bits()[idx], labels[idx]) {
            (false, _) => 0.0,
            (true, 0) => STRUCT_BACKGROUND,
            (true, _) => STRUCT_BUNDLE,
        })
        .collect();
    let structural = Volume3::new(grid, 1, gaussian_blur(&raw, grid.dims, 0.6))?;

    let truth_tensors = TensorField::from_tensors(grid, brain.clone(), tensors, Mask::empty(grid));
    let names = spec.bundles.iter().map(|b| b.name.clone()).collect();
    Ok(Phantom { dwi, structural, brain, bundle_labels: BundleLabels { grid, labels, names }, truth_tensors, overlaps })
}
