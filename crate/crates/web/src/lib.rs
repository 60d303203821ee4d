//! Browser demo over a small synthetic scan. Each `#[wasm_bindgen]` export is a
//! thin wrapper over a plain function so the logic runs under native tests too.

use fovx::dti::{fit_dti, orientation_map, DEFAULT_SIGNAL_FLOOR};
use fovx::phantom::{default_scheme, generate, PhantomSpec, SchemeSpec};
use fovx::preprocess::{copy_nearest_slice, sagittal_plane, truncate_fov, Side};
use fovx::shmetrics::{acc_coeffs, ShBasis, ShFitter, DEFAULT_L_MAX};
use fovx::{DwiVolume, Mask, Result};
use wasm_bindgen::prelude::*;

const GRID: usize = 32;
const SPACING: f64 = 4.0;

fn js(e: fovx::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Rows of a sagittal plane reordered so the top of the head comes first.
fn top_first(plane: Vec<f32>, w: usize) -> Vec<f32> {
    plane.chunks(w).rev().flatten().copied().collect()
}

#[wasm_bindgen]
pub struct Demo {
    dwi: DwiVolume,
    brain: Mask,
}

impl Demo {
    pub fn build(seed: u64, preset: &str) -> Result<Self> {
        let scheme = SchemeSpec { n_dirs: 12, n_b0: 1, b: 1300.0 };
        let p = generate(&PhantomSpec::preset(preset, GRID, SPACING, scheme, 0.0, seed)?)?;
        Ok(Self { dwi: p.dwi, brain: p.brain })
    }

    fn mid(&self) -> usize {
        self.dwi.grid().nx() / 2
    }

    /// Mid-sagittal plane of `volume` after zeroing `cut_mm` from the top; the
    /// second plane fills the gap by copying the last acquired slice.
    pub fn truncation_planes(&self, cut_mm: f64, volume: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let v = volume.min(self.dwi.len() - 1);
        let (acq, cut) = truncate_fov(&self.dwi, Side::Top, cut_mm)?;
        let copy = copy_nearest_slice(&acq, &cut);
        let w = self.width();
        Ok((
            top_first(sagittal_plane(acq.volume(v), 0, self.mid()), w),
            top_first(sagittal_plane(copy.volume(v), 0, self.mid()), w),
        ))
    }

    /// Mid-sagittal orientation map as interleaved RGB in [0, 1], fitted on the acquired part only.
    pub fn orientation_rgb(&self, cut_mm: f64) -> Result<Vec<f32>> {
        let (acq, cut) = truncate_fov(&self.dwi, Side::Top, cut_mm)?;
        let mask = self.brain.and(&cut.slab_mask(acq.grid()).not())?;
        let orient = orientation_map(&fit_dti(&acq, &mask, DEFAULT_SIGNAL_FLOOR)?);
        let w = self.width();
        let channels: Vec<Vec<f32>> = (0..3).map(|c| top_first(sagittal_plane(&orient, c, self.mid()), w)).collect();
        Ok((0..channels[0].len()).flat_map(|p| channels.iter().map(move |ch| ch[p])).collect())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, preset: &str) -> std::result::Result<Demo, JsError> {
        Self::build(seed as u64, preset).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.dwi.grid().ny()
    }

    pub fn height(&self) -> usize {
        self.dwi.grid().nz()
    }

    pub fn volumes(&self) -> usize {
        self.dwi.len()
    }

    pub fn truncated(&self, cut_mm: f64, volume: usize) -> std::result::Result<Vec<f32>, JsError> {
        self.truncation_planes(cut_mm, volume).map(|p| p.0).map_err(js)
    }

    pub fn copy_baseline(&self, cut_mm: f64, volume: usize) -> std::result::Result<Vec<f32>, JsError> {
        self.truncation_planes(cut_mm, volume).map(|p| p.1).map_err(js)
    }

    pub fn orientation(&self, cut_mm: f64) -> std::result::Result<Vec<f32>, JsError> {
        self.orientation_rgb(cut_mm).map_err(js)
    }
}

fn stick_signal(dirs: &[[f64; 3]], fibre: [f64; 3]) -> Vec<f64> {
    let (l1, l2) = (1.7e-3, 0.2e-3);
    dirs.iter()
        .map(|g| {
            let c = g[0] * fibre[0] + g[1] * fibre[1] + g[2] * fibre[2];
            (-1300.0 * (l2 + (l1 - l2) * c * c)).exp()
        })
        .collect()
}

/// ACC between a single-fibre signal along z and the same fibre tilted by `angle_deg` about x.
pub fn rotation_acc(angle_deg: f64) -> Result<f64> {
    let table = default_scheme(32, 0, 1300.0)?;
    let dirs: Vec<[f64; 3]> = table.bvecs().to_vec();
    let fitter = ShFitter::new(ShBasis::new(DEFAULT_L_MAX)?, &dirs, 0.0)?;
    let t = angle_deg.to_radians();
    let a = fitter.fit_signal(&stick_signal(&dirs, [0.0, 0.0, 1.0]));
    let b = fitter.fit_signal(&stick_signal(&dirs, [0.0, t.sin(), t.cos()]));
    acc_coeffs(&a, &b).ok_or_else(|| fovx::Error::DegenerateInput("isotropic signal".into()))
}

#[wasm_bindgen]
pub fn acc_under_rotation(angle_deg: f64) -> std::result::Result<f64, JsError> {
    rotation_acc(angle_deg).map_err(js)
}
