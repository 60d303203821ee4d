//! Sample assembly with random FOV cuts, the two-shell training loop, model
//! selection and whole-scan imputation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize};

use crate::dti::{bvec_map, fit_dti, orientation_map, DEFAULT_SIGNAL_FLOOR};
use crate::error::{Error, Result};
use crate::nifti::{read_dwi, read_nifti, write_dwi, write_gradients, write_nifti};
use crate::nnet::{
    gan_losses, generator_objective, kl_divergence, reconstruction_loss, stack_inputs, Graph, ImputationModel,
    LossParts, LossWeights, ModelHyper, OptimConfig, Optimizer, Shell, Tensor, Var, DISCRIMINATOR, GENERATOR,
};
use crate::preprocess::{
    assemble_condition_stack, normalize_dwi, normalize_volume, sagittal_plane, sagittal_stack, set_sagittal_plane,
    splice_imputation, truncate_fov, ConditionStack, FovCut, Modalities, NormalizationRecord, Side, PATCH_RADIUS,
};
use crate::shmetrics::{acc, fit_sh, split_wm_mask, DEFAULT_LAMBDA_LB, DEFAULT_L_MAX, DEFAULT_WM_FA};
use crate::util::{mean, mix_seed, par_map, par_map_mut, par_map_range};
use crate::volume::{DwiVolume, GradientTable, Mask, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training cuts are drawn uniformly from this range, from either end.
    pub cut_range_mm: [f64; 2],
    /// Top cuts used for validation and model selection.
    pub validation_cuts_mm: Vec<f64>,
    pub test_cut_mm: f64,
    /// Cap on samples per shell per epoch; 0 keeps them all.
    pub samples_per_epoch: usize,
    pub validate_every: usize,
    pub max_cut_retries: usize,
    /// A preset name (`"desk"`, `"compact"`, `"large"`) or a full hyperparameter object.
    #[serde(deserialize_with = "model_spec")]
    pub model: ModelHyper,
    pub optim: OptimConfig,
}

fn model_spec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelHyper, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        Preset(String),
        Full(ModelHyper),
    }
    match Spec::deserialize(d)? {
        Spec::Preset(name) => ModelHyper::preset(&name).map_err(serde::de::Error::custom),
        Spec::Full(h) => Ok(h),
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 7,
            cut_range_mm: [20.0, 50.0],
            validation_cuts_mm: vec![30.0, 50.0],
            test_cut_mm: 50.0,
            samples_per_epoch: 0,
            validate_every: 1,
            max_cut_retries: 16,
            model: ModelHyper::desk(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.cut_range_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("cut range [{lo}, {hi}] must satisfy 0 < lo <= hi")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("epochs, batch_size and validate_every must be positive".into()));
        }
        if self.validation_cuts_mm.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("validation cuts must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.model.validate()
    }

    fn check_extent(&self, scan: &Scan) -> Result<()> {
        let extent = scan.dwi.grid().nz() as f64 * scan.dwi.grid().spacing[2];
        let worst = self.validation_cuts_mm.iter().copied().fold(self.cut_range_mm[1], f64::max);
        if worst >= extent {
            return Err(Error::Config(format!("cut of {worst} mm does not fit scan '{}' ({extent} mm tall)", scan.id)));
        }
        Ok(())
    }
}

/// A complete-FOV scan with its structural image and brain mask.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub dwi: DwiVolume,
    pub structural: Volume3,
    pub brain: Mask,
}

impl Scan {
    /// Read `dwi.nii`, `dwi.bval`, `dwi.bvec`, `t1.nii` and `brain.nii` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let dwi = read_dwi(dir.join("dwi.nii"), dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
        let structural = read_nifti(dir.join("t1.nii"))?;
        let brain_vol = read_nifti(dir.join("brain.nii"))?;
        dwi.grid().ensure_matches(structural.grid())?;
        dwi.grid().ensure_matches(brain_vol.grid())?;
        let brain = Mask::from_threshold(&brain_vol, 0.5);
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scan".into());
        Ok(Self { id, dwi, structural, brain })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_dwi(&self.dwi, dir.join("dwi.nii"))?;
        write_gradients(self.dwi.gradients(), dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
        write_nifti(&self.structural, dir.join("t1.nii"))?;
        write_nifti(&self.brain.to_volume(), dir.join("brain.nii"))?;
        Ok(())
    }
}

/// Scans split by identity into training and validation sets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Scan>,
    pub validation: Vec<Scan>,
}

impl Corpus {
    pub fn new(train: Vec<Scan>, validation: Vec<Scan>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("corpus has no training scans".into()));
        }
        for v in &validation {
            if train.iter().any(|t| t.id == v.id) {
                return Err(Error::Config(format!("scan '{}' is in both training and validation sets", v.id)));
            }
        }
        let g = *train[0].dwi.grid();
        for s in train.iter().chain(&validation) {
            g.ensure_matches(s.dwi.grid())?;
        }
        Ok(Self { train, validation })
    }

    /// Every subdirectory is one scan; the last `n_validation` (sorted by name) validate.
    pub fn load_dir(dir: impl AsRef<Path>, n_validation: usize) -> Result<Self> {
        let mut dirs: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("dwi.nii").exists())
            .collect();
        dirs.sort();
        if dirs.len() <= n_validation {
            return Err(Error::Config(format!("{} scans found, need more than {n_validation}", dirs.len())));
        }
        let mut scans = dirs.iter().map(Scan::load).collect::<Result<Vec<_>>>()?;
        let validation = scans.split_off(scans.len() - n_validation);
        Self::new(scans, validation)
    }
}

pub fn shell_of(t: &GradientTable, v: usize) -> Shell {
    if t.is_b0(v) {
        Shell::B0
    } else {
        Shell::Weighted
    }
}

/// Normalized, truncated scan with its condition maps.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub id: String,
    pub cut: FovCut,
    pub acquired: DwiVolume,
    /// Normalized complete-FOV data, present for training scans.
    pub truth: Option<DwiVolume>,
    pub structural: Volume3,
    pub orientation: Volume3,
    pub brain: Option<Mask>,
    pub record: NormalizationRecord,
}

impl PreparedScan {
    /// Normalize `acquired` and fit DTI on its acquired region only.
    pub fn new(
        id: &str,
        acquired: &DwiVolume,
        cut: FovCut,
        structural: &Volume3,
        brain: Option<&Mask>,
        truth: Option<&DwiVolume>,
    ) -> Result<Self> {
        let grid = *acquired.grid();
        grid.ensure_matches(structural.grid())?;
        let (acq, record) = normalize_dwi(acquired)?;
        let (structural, _) = normalize_volume(structural)?;
        let truth = truth.map(|t| {
            acquired.ensure_compatible(t)?;
            Ok::<_, Error>(crate::preprocess::map_dwi(t, |x| record.apply(x)))
        });
        let truth = truth.transpose()?;
        let support = match brain {
            Some(b) => b.clone(),
            None => {
                let b0 = acq.gradients().b0_indices()[0];
                Mask::from_threshold(acq.volume(b0), 0.0)
            }
        };
        let dti_mask = support.and(&cut.slab_mask(&grid).not())?;
        let tf = fit_dti(&acq, &dti_mask, DEFAULT_SIGNAL_FLOOR)?;
        Ok(Self {
            id: id.to_string(),
            cut,
            acquired: acq,
            truth,
            structural,
            orientation: orientation_map(&tf),
            brain: brain.cloned(),
            record,
        })
    }

    /// Sagittal indices whose slab rows touch the brain (all of them without a mask).
    pub fn active_slices(&self) -> Vec<usize> {
        let g = *self.acquired.grid();
        if self.cut.is_empty() {
            return Vec::new();
        }
        match &self.brain {
            None => (0..g.nx()).collect(),
            Some(b) => (0..g.nx())
                .filter(|&i| (0..g.nz()).any(|k| self.cut.contains_k(k) && (0..g.ny()).any(|j| b.get(i, j, k))))
                .collect(),
        }
    }

    pub fn stack(&self, v: usize, i: usize, modalities: Modalities) -> Result<ConditionStack> {
        let g = self.acquired.grid();
        let bvec = bvec_map(self.acquired.gradients().unit_bvec(v), g);
        let xp = sagittal_stack(self.acquired.volume(v), i, PATCH_RADIUS);
        assemble_condition_stack(&xp, &self.structural, &self.orientation, &bvec, i, modalities)
    }

    /// Per-pixel missing mask of a sagittal plane.
    pub fn missing_plane(&self) -> Vec<bool> {
        let g = self.acquired.grid();
        self.cut.row_mask(g.nz()).into_iter().flat_map(|m| std::iter::repeat(m).take(g.ny())).collect()
    }

    pub fn sample(&self, v: usize, i: usize, modalities: Modalities) -> Result<TrainSample> {
        let truth =
            self.truth.as_ref().ok_or_else(|| Error::Config(format!("scan '{}' has no ground truth", self.id)))?;
        Ok(TrainSample {
            stack: self.stack(v, i, modalities)?,
            truth: sagittal_plane(truth.volume(v), 0, i),
            missing: self.missing_plane(),
            shell: shell_of(self.acquired.gradients(), v),
            scan_id: self.id.clone(),
            volume: v,
            sagittal_i: i,
            cut: self.cut,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub stack: ConditionStack,
    pub truth: Vec<f32>,
    pub missing: Vec<bool>,
    pub shell: Shell,
    pub scan_id: String,
    pub volume: usize,
    pub sagittal_i: usize,
    pub cut: FovCut,
}

/// Side by fair coin, depth uniform over the configured range.
pub fn draw_cut(cfg: &TrainConfig, rng: &mut impl Rng) -> (Side, f64) {
    let side = if rng.gen::<bool>() { Side::Top } else { Side::Bottom };
    let [lo, hi] = cfg.cut_range_mm;
    let cut = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    (side, cut)
}

/// Draw a cut, truncate and prepare; redraws cuts that leave nothing to learn from.
pub fn prepare_training_scan(scan: &Scan, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<PreparedScan> {
    let mut last = None;
    for _ in 0..cfg.max_cut_retries.max(1) {
        let (side, cut_mm) = draw_cut(cfg, rng);
        match truncate_fov(&scan.dwi, side, cut_mm) {
            Ok((acq, cut)) if !cut.is_empty() => {
                let p = PreparedScan::new(&scan.id, &acq, cut, &scan.structural, Some(&scan.brain), Some(&scan.dwi))?;
                if !p.active_slices().is_empty() {
                    return Ok(p);
                }
                last = Some(Error::InvalidCut(format!("{cut_mm} mm from the {side} misses the brain")));
            }
            Ok(_) => last = Some(Error::InvalidCut(format!("{cut_mm} mm removes no slice"))),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::InvalidCut("no cut drawn".into())))
}

/// One epoch pass over a scan for one shell: lazily yields a sample per
/// (volume, sagittal slice) whose slab rows intersect the brain.
pub struct SampleStream {
    prepared: PreparedScan,
    modalities: Modalities,
    keys: Vec<(usize, usize)>,
    pos: usize,
}

impl SampleStream {
    pub fn prepared(&self) -> &PreparedScan {
        &self.prepared
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl Iterator for SampleStream {
    type Item = Result<TrainSample>;
    fn next(&mut self) -> Option<Self::Item> {
        let &(v, i) = self.keys.get(self.pos)?;
        self.pos += 1;
        Some(self.prepared.sample(v, i, self.modalities))
    }
}

fn sample_keys(p: &PreparedScan, shell: Shell) -> Vec<(usize, usize)> {
    let t = p.acquired.gradients();
    let slices = p.active_slices();
    (0..t.len()).filter(|&v| shell_of(t, v) == shell).flat_map(|v| slices.iter().map(move |&i| (v, i))).collect()
}

pub fn make_samples(scan: &Scan, cfg: &TrainConfig, shell: Shell, rng: &mut impl Rng) -> Result<SampleStream> {
    let prepared = prepare_training_scan(scan, cfg, rng)?;
    let keys = sample_keys(&prepared, shell);
    Ok(SampleStream { prepared, modalities: cfg.model.modalities, keys, pos: 0 })
}

/// The b0 and diffusion-weighted models used together at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub b0: ImputationModel,
    pub weighted: ImputationModel,
}

impl ModelPair {
    pub fn get(&self, shell: Shell) -> &ImputationModel {
        match shell {
            Shell::B0 => &self.b0,
            Shell::Weighted => &self.weighted,
        }
    }

    fn get_mut(&mut self, shell: Shell) -> &mut ImputationModel {
        match shell {
            Shell::B0 => &mut self.b0,
            Shell::Weighted => &mut self.weighted,
        }
    }
}

/// Impute the slab of a truncated scan and splice it back; acquired voxels are untouched.
pub fn impute_scan(
    acquired: &DwiVolume,
    cut: &FovCut,
    structural: &Volume3,
    brain: Option<&Mask>,
    b0_model: Option<&ImputationModel>,
    weighted_model: Option<&ImputationModel>,
) -> Result<DwiVolume> {
    if cut.is_empty() {
        return Ok(acquired.clone());
    }
    let t = acquired.gradients();
    let models: Vec<&ImputationModel> = (0..t.len())
        .map(|v| {
            let shell = shell_of(t, v);
            let m = match shell {
                Shell::B0 => b0_model,
                Shell::Weighted => weighted_model,
            };
            m.ok_or_else(|| Error::Config(format!("no model for the {shell} shell")))
        })
        .collect::<Result<_>>()?;
    for m in &models {
        if m.hyper.x_plus_channels != 2 * PATCH_RADIUS + 1 {
            return Err(Error::Config(format!("model expects {} x+ channels", m.hyper.x_plus_channels)));
        }
    }
    let p = PreparedScan::new("impute", acquired, *cut, structural, brain, None)?;
    let g = *acquired.grid();
    let active = p.active_slices();
    let keys: Vec<(usize, usize)> = (0..t.len()).flat_map(|v| active.iter().map(move |&i| (v, i))).collect();
    let planes: Vec<Vec<f32>> = par_map(&keys, |&(v, i)| -> Result<Vec<f32>> {
        let stack = p.stack(v, i, models[v].hyper.modalities)?;
        models[v].infer(&stack)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut imputed = p.acquired.clone();
    for vol in imputed.volumes_mut() {
        vol.data_mut().fill(0.0);
    }
    for (&(v, i), plane) in keys.iter().zip(&planes) {
        set_sagittal_plane(&mut imputed.volumes_mut()[v], 0, i, plane);
    }
    for vol in imputed.volumes_mut() {
        vol.data_mut().iter_mut().for_each(|x| *x = p.record.invert(*x));
    }
    if let Some(b) = brain {
        // slab voxels outside the brain are air
        for vol in imputed.volumes_mut() {
            for (x, &inside) in vol.data_mut().iter_mut().zip(b.bits()) {
                if !inside {
                    *x = 0.0;
                }
            }
        }
    }
    debug_assert_eq!(*imputed.grid(), g);
    splice_imputation(acquired, &imputed, cut)
}

pub fn impute_with_pair(
    acquired: &DwiVolume,
    cut: &FovCut,
    structural: &Volume3,
    brain: Option<&Mask>,
    pair: &ModelPair,
) -> Result<DwiVolume> {
    impute_scan(acquired, cut, structural, brain, Some(&pair.b0), Some(&pair.weighted))
}

/// Mean ACC between SH fits of `truth` and `test` over `region`.
pub fn region_acc(truth: &DwiVolume, test: &DwiVolume, region: &Mask) -> Result<f64> {
    let a = fit_sh(truth, region, DEFAULT_L_MAX, DEFAULT_LAMBDA_LB)?;
    let b = fit_sh(test, region, DEFAULT_L_MAX, DEFAULT_LAMBDA_LB)?;
    Ok(acc(&a, &b, region)?.mean)
}

/// Mean absolute intensity error over `region`, all volumes.
pub fn region_l1(truth: &DwiVolume, test: &DwiVolume, region: &Mask) -> Result<f64> {
    truth.ensure_compatible(test)?;
    let idx = region.indices();
    if idx.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation region".into()));
    }
    let per: Vec<f64> = truth
        .volumes()
        .iter()
        .zip(test.volumes())
        .flat_map(|(a, b)| idx.iter().map(move |&i| (a.data()[i] - b.data()[i]).abs() as f64))
        .collect();
    Ok(mean(&per).expect("non-empty"))
}

/// Slab voxels inside the brain.
pub fn slab_region(cut: &FovCut, brain: &Mask) -> Result<Mask> {
    cut.slab_mask(brain.grid()).and(brain)
}

/// Voxels of `region` whose reference tensor has FA at or above the WM threshold.
pub fn fibrous_region(reference: &DwiVolume, region: &Mask) -> Result<Mask> {
    let tf = fit_dti(reference, region, DEFAULT_SIGNAL_FLOOR)?;
    Ok(split_wm_mask(&tf, DEFAULT_WM_FA).0)
}

/// Mean slab ACC over validation scans, one entry per top cut.
pub fn validation_scores(pair: &ModelPair, scans: &[Scan], cuts_mm: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cuts_mm.len());
    for &c in cuts_mm {
        let mut accs = Vec::with_capacity(scans.len());
        for s in scans {
            let (acq, cut) = truncate_fov(&s.dwi, Side::Top, c)?;
            let imputed = impute_with_pair(&acq, &cut, &s.structural, Some(&s.brain), pair)?;
            accs.push(region_acc(&s.dwi, &imputed, &slab_region(&cut, &s.brain)?)?);
        }
        out.push(mean(&accs).unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// Index of the best finite score; ties go to the later entry.
pub fn argmax_latest(scores: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (n, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.map_or(true, |b| s >= scores[b]) {
            best = Some(n);
        }
    }
    best.ok_or_else(|| Error::Selection("no checkpoint has a finite validation score".into()))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub pair: ModelPair,
}

/// Score every checkpoint on top cuts of the validation scans and return the best one
/// together with all scores (mean over cuts, equal weights).
pub fn select_model<'a>(
    checkpoints: &'a [Checkpoint],
    validation: &[Scan],
    cuts_mm: &[f64],
) -> Result<(&'a Checkpoint, Vec<f64>)> {
    if checkpoints.is_empty() {
        return Err(Error::Selection("no checkpoints".into()));
    }
    if checkpoints.len() == 1 {
        return Ok((&checkpoints[0], vec![f64::NAN]));
    }
    if validation.is_empty() {
        return Err(Error::Selection("no validation scans".into()));
    }
    let scores = checkpoints
        .iter()
        .map(|c| validation_scores(&c.pair, validation, cuts_mm).map(|v| mean(&v).unwrap_or(f64::NAN)))
        .collect::<Result<Vec<_>>>()?;
    Ok((&checkpoints[argmax_latest(&scores)?], scores))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    /// `λ_rec·rec + λ_kl·kl + λ_gan·loss_G`.
    pub objective: f64,
    /// Per validation cut; NaN when validation did not run this epoch.
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: ModelPair,
    pub selected_epoch: usize,
    pub log_b0: Vec<EpochLog>,
    pub log_dwi: Vec<EpochLog>,
    /// `(epoch, per-cut validation ACC, selection score)` for validated epochs.
    pub validation: Vec<(usize, Vec<f64>, f64)>,
    pub validation_cuts_mm: Vec<f64>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

fn eps_for(seed: u64, epoch: usize, batch: usize, sample: usize, shell: Shell, z: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, batch as u64, sample as u64, shell as u64]));
    (0..z).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

struct SampleGraph {
    g: Graph<f32>,
    out: Var,
    fake: Var,
    cond: Var,
    rec: Var,
    kl: Var,
}

struct Optimizers {
    gen: Optimizer<f32>,
    disc: Optimizer<f32>,
}

fn sum_grads(
    model_store_len: usize,
    store_id: usize,
    parts: &[crate::nnet::Grads<f32>],
    shapes: &[Tensor<f32>],
) -> Vec<Tensor<f32>> {
    debug_assert_eq!(model_store_len, shapes.len());
    let mut acc: Vec<Tensor<f32>> = shapes.iter().map(|t| Tensor::zeros(&t.shape)).collect();
    for g in parts {
        g.accumulate_into(store_id, &mut acc);
    }
    let inv = 1.0 / parts.len().max(1) as f32;
    acc.iter_mut().for_each(|t| t.scale(inv));
    acc
}

/// One D-step followed by one G-step on a minibatch.
fn train_step(
    model: &mut ImputationModel,
    opts: &mut Optimizers,
    batch: &[TrainSample],
    eps: Vec<Vec<f32>>,
    w: &LossWeights,
) -> Result<LossParts> {
    let use_gan = w.gan > 0.0;
    let mut graphs: Vec<(SampleGraph, &TrainSample)> = Vec::with_capacity(batch.len());
    {
        let built: Vec<Result<SampleGraph>> = par_map_range(batch.len(), |n| {
            let s = &batch[n];
            let m = &*model;
            let mut g = Graph::new();
            let (xp, cond) = stack_inputs(&mut g, &s.stack);
            let (code, out) = m.generate(&mut g, xp, cond, Some(eps[n].clone()))?;
            let rec = reconstruction_loss(&mut g, out, &s.truth, &s.missing);
            let kl = kl_divergence(&mut g, &code);
            let fake = g.mask_select(out, &s.truth, s.missing.clone());
            Ok(SampleGraph { g, out, fake, cond, rec, kl })
        });
        for (r, s) in built.into_iter().zip(batch) {
            graphs.push((r?, s));
        }
    }
    let n = graphs.len() as f64;
    let mut parts = LossParts::default();
    for (sg, _) in &graphs {
        parts.rec += sg.g.value(sg.rec).item() as f64 / n;
        parts.kl += sg.g.value(sg.kl).item() as f64 / n;
    }

    if use_gan {
        let m = &*model;
        let d_results: Vec<Result<(f64, crate::nnet::Grads<f32>)>> = par_map_mut(&mut graphs, |(sg, s)| {
            let g = &mut sg.g;
            let (_, h, wd) = crate::nnet::tensor::chw(&g.value(sg.out).shape);
            let real = g.constant(Tensor::from_f32(&[1, h, wd], &s.truth));
            let fake_detached = g.constant(g.value(sg.fake).clone());
            let d_real = m.discriminate(g, real, sg.cond);
            let d_fake = m.discriminate(g, fake_detached, sg.cond);
            let (loss_d, _) = gan_losses(g, d_real, d_fake);
            Ok((g.value(loss_d).item() as f64, g.backward(loss_d)?))
        });
        let mut grads = Vec::with_capacity(d_results.len());
        for r in d_results {
            let (ld, gr) = r?;
            parts.disc += ld / n;
            grads.push(gr);
        }
        let avg = sum_grads(model.discriminator.len(), DISCRIMINATOR, &grads, model.discriminator.tensors());
        drop(grads);
        opts.disc.step(&mut model.discriminator, &avg)?;
    }

    let m = &*model;
    let g_results: Vec<Result<(f64, crate::nnet::Grads<f32>)>> = par_map_mut(&mut graphs, |(sg, _)| {
        let g = &mut sg.g;
        let loss_g = if use_gan {
            let d_fake = m.discriminate(g, sg.fake, sg.cond);
            let d_real_dummy = d_fake;
            Some(gan_losses(g, d_real_dummy, d_fake).1)
        } else {
            None
        };
        let obj = generator_objective(g, sg.rec, sg.kl, loss_g, w);
        let lg = loss_g.map_or(0.0, |v| g.value(v).item() as f64);
        Ok((lg, g.backward(obj)?))
    });
    let mut grads = Vec::with_capacity(g_results.len());
    for r in g_results {
        let (lg, gr) = r?;
        parts.gen += lg / n;
        grads.push(gr);
    }
    drop(graphs);
    let avg = sum_grads(model.generator.len(), GENERATOR, &grads, model.generator.tensors());
    opts.gen.step(&mut model.generator, &avg)?;
    Ok(parts)
}

fn log_row(epoch: usize, p: &LossParts, w: &LossWeights, val: &[f64]) -> EpochLog {
    EpochLog {
        epoch,
        loss_rec: p.rec,
        loss_kl: p.kl,
        loss_g: p.gen,
        loss_d: p.disc,
        objective: crate::nnet::total_loss(p, w),
        val_acc: val.to_vec(),
    }
}

/// Train the b0 and diffusion-weighted models with alternating D/G steps.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    for s in corpus.train.iter().chain(&corpus.validation) {
        cfg.check_extent(s)?;
    }
    let shells = [Shell::B0, Shell::Weighted];
    let mut pair = ModelPair {
        b0: ImputationModel::new(cfg.model.clone(), Shell::B0, mix_seed(&[cfg.seed, 1]))?,
        weighted: ImputationModel::new(cfg.model.clone(), Shell::Weighted, mix_seed(&[cfg.seed, 2]))?,
    };
    let mut opts: Vec<Optimizers> = shells
        .iter()
        .map(|&s| {
            let m = pair.get(s);
            Optimizers {
                gen: Optimizer::new(cfg.optim, &m.generator),
                disc: Optimizer::new(cfg.optim, &m.discriminator),
            }
        })
        .collect();
    let weights = LossWeights::from(&cfg.model);
    let n_val = cfg.validation_cuts_mm.len();
    let mut logs: [Vec<EpochLog>; 2] = [Vec::new(), Vec::new()];
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut validation = Vec::new();
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.epochs {
        // draws happen in scan order so the stream does not depend on thread count
        let seeds: Vec<u64> =
            (0..corpus.train.len()).map(|s| mix_seed(&[cfg.seed, epoch as u64, s as u64, 0xc0])).collect();
        let prepared: Vec<PreparedScan> = par_map_range(corpus.train.len(), |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[s]);
            prepare_training_scan(&corpus.train[s], cfg, &mut rng)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut epoch_parts = [LossParts::default(); 2];
        for (si, &shell) in shells.iter().enumerate() {
            let mut keys: Vec<(usize, usize, usize)> = prepared
                .iter()
                .enumerate()
                .flat_map(|(s, p)| sample_keys(p, shell).into_iter().map(move |(v, i)| (s, v, i)))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, si as u64, 0x5f]));
            keys.shuffle(&mut rng);
            if cfg.samples_per_epoch > 0 {
                keys.truncate(cfg.samples_per_epoch);
            }
            let z = cfg.model.z_dim;
            let mut sums = LossParts::default();
            let mut batches = 0usize;
            for (b, chunk) in keys.chunks(cfg.batch_size).enumerate() {
                let samples: Vec<TrainSample> =
                    par_map(chunk, |&(s, v, i)| prepared[s].sample(v, i, cfg.model.modalities))
                        .into_iter()
                        .collect::<Result<_>>()?;
                let eps = (0..samples.len()).map(|n| eps_for(cfg.seed, epoch, b, n, shell, z)).collect();
                match train_step(pair.get_mut(shell), &mut opts[si], &samples, eps, &weights) {
                    Ok(p) => {
                        sums.rec += p.rec;
                        sums.kl += p.kl;
                        sums.gen += p.gen;
                        sums.disc += p.disc;
                        batches += 1;
                    }
                    Err(e @ (Error::Graph(_) | Error::Numerical(_))) => {
                        aborted = Some(format!("epoch {epoch}, {shell} model: {e}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            let nb = batches.max(1) as f64;
            epoch_parts[si] =
                LossParts { rec: sums.rec / nb, kl: sums.kl / nb, gen: sums.gen / nb, disc: sums.disc / nb };
        }

        let validate_now = !corpus.validation.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs);
        let val = if validate_now {
            let v = validation_scores(&pair, &corpus.validation, &cfg.validation_cuts_mm)?;
            let score = mean(&v).unwrap_or(f64::NAN);
            log::info!("epoch {epoch}: validation ACC {v:?}");
            validation.push((epoch, v.clone(), score));
            v
        } else {
            vec![f64::NAN; n_val]
        };
        for si in 0..2 {
            logs[si].push(log_row(epoch, &epoch_parts[si], &weights, &val));
        }
        log::info!(
            "epoch {epoch}: b0 objective {:.4}, weighted objective {:.4}",
            logs[0].last().map_or(f64::NAN, |l| l.objective),
            logs[1].last().map_or(f64::NAN, |l| l.objective)
        );
        if validate_now || corpus.validation.is_empty() {
            checkpoints.push(Checkpoint { epoch, pair: pair.clone() });
        }
    }

    let (models, selected_epoch) = if validation.is_empty() {
        match checkpoints.pop() {
            Some(c) => (c.pair, c.epoch),
            // aborted before any checkpoint: last finite state
            None => (pair, logs[0].len()),
        }
    } else {
        let scores: Vec<f64> = validation.iter().map(|v| v.2).collect();
        let best = argmax_latest(&scores)?;
        let c = checkpoints.swap_remove(best);
        (c.pair, c.epoch)
    };
    let [log_b0, log_dwi] = logs;
    Ok(TrainOutcome {
        models,
        selected_epoch,
        log_b0,
        log_dwi,
        validation,
        validation_cuts_mm: cfg.validation_cuts_mm.clone(),
        aborted,
    })
}

/// CSV with columns `epoch, loss_rec, loss_kl, loss_g, loss_d, val_acc_<cut>...`.
pub fn write_train_log(log: &[EpochLog], cuts_mm: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "loss_rec".into(), "loss_kl".into(), "loss_g".into(), "loss_d".into()];
    header.extend(cuts_mm.iter().map(|c| format!("val_acc_{c}")));
    w.write_record(&header)?;
    for row in log {
        let mut rec = vec![row.epoch.to_string()];
        rec.extend([row.loss_rec, row.loss_kl, row.loss_g, row.loss_d].iter().map(|x| format!("{x:.8}")));
        rec.extend(row.val_acc.iter().map(|x| if x.is_finite() { format!("{x:.8}") } else { String::new() }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec, SchemeSpec};

    fn scan(seed: u64) -> Scan {
        let spec =
            PhantomSpec::preset("slab", 16, 8.0, SchemeSpec { n_dirs: 8, n_b0: 1, b: 1300.0 }, 0.0, seed).unwrap();
        let p = generate(&spec).unwrap();
        Scan { id: format!("s{seed}"), dwi: p.dwi, structural: p.structural, brain: p.brain }
    }

    #[test]
    fn partial_config_and_model_preset() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"epochs": 3, "model": "compact", "optim": {"lr": 0.001}}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model, ModelHyper::compact());
        assert_eq!(cfg.optim.lr, 0.001);
        assert_eq!(cfg.optim.beta1, OptimConfig::default().beta1);
        let cfg: TrainConfig = serde_json::from_str(r#"{"model": {"z_dim": 5}}"#).unwrap();
        assert_eq!(cfg.model, ModelHyper { z_dim: 5, ..ModelHyper::desk() });
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"model": "huge"}"#).is_err());
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            cut_range_mm: [20.0, 40.0],
            validation_cuts_mm: vec![30.0, 50.0],
            samples_per_epoch: 8,
            model: ModelHyper {
                z_dim: 2,
                encoder_channels: vec![2, 4],
                base_channels: 2,
                depth: 2,
                disc_channels: vec![2, 2],
                ..ModelHyper::desk()
            },
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn augmentation_marginals() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let draws: Vec<(Side, f64)> = (0..n).map(|_| draw_cut(&cfg, &mut rng)).collect();
        let m = draws.iter().map(|d| d.1).sum::<f64>() / n as f64;
        let top = draws.iter().filter(|d| d.0 == Side::Top).count() as f64 / n as f64;
        assert!((m - 35.0).abs() < 1.0, "{m}");
        assert!((top - 0.5).abs() < 0.03, "{top}");
        assert!(draws.iter().all(|d| (20.0..=50.0).contains(&d.1)));
    }

    #[test]
    fn samples_have_missing_rows_and_count_bound() {
        let s = scan(1);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stream = make_samples(&s, &cfg, Shell::Weighted, &mut rng).unwrap();
        let slices = stream.prepared().active_slices().len();
        let n = stream.len();
        assert_eq!(n, 8 * slices);
        assert!(n <= 8 * 16);
        for sample in stream {
            let sample = sample.unwrap();
            assert!(sample.missing.iter().any(|&m| m));
            assert_eq!(sample.shell, Shell::Weighted);
            assert!(sample.truth.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn sample_stream_deterministic() {
        let s = scan(1);
        let cfg = tiny_cfg();
        let collect = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            make_samples(&s, &cfg, Shell::B0, &mut rng).unwrap().map(|x| x.unwrap().stack.x_plus).collect::<Vec<_>>()
        };
        assert_eq!(collect(), collect());
    }

    #[test]
    fn conditions_do_not_see_the_slab() {
        let s = scan(2);
        let (acq, cut) = truncate_fov(&s.dwi, Side::Top, 40.0).unwrap();
        let p = PreparedScan::new("x", &acq, cut, &s.structural, Some(&s.brain), Some(&s.dwi)).unwrap();
        let g = *acq.grid();
        for idx in cut.slab_mask(&g).indices() {
            for c in 0..3 {
                assert_eq!(p.orientation.channel(c)[idx], 0.0);
            }
        }
    }

    #[test]
    fn selection_rule() {
        assert_eq!(argmax_latest(&[0.5, 0.7, 0.7]).unwrap(), 2);
        assert_eq!(argmax_latest(&[0.9]).unwrap(), 0);
        assert_eq!(argmax_latest(&[f64::NAN, 0.1, f64::NAN]).unwrap(), 1);
        assert!(matches!(argmax_latest(&[f64::NAN]), Err(Error::Selection(_))));
    }

    #[test]
    fn empty_cut_is_identity_and_splice_keeps_acquired() {
        let s = scan(3);
        let cfg = tiny_cfg();
        let b0 = ImputationModel::new(cfg.model.clone(), Shell::B0, 1).unwrap();
        let w = ImputationModel::new(cfg.model.clone(), Shell::Weighted, 2).unwrap();
        let same =
            impute_scan(&s.dwi, &FovCut::empty(Side::Top), &s.structural, Some(&s.brain), Some(&b0), Some(&w)).unwrap();
        assert_eq!(same, s.dwi);

        let (acq, cut) = truncate_fov(&s.dwi, Side::Top, 40.0).unwrap();
        let out = impute_scan(&acq, &cut, &s.structural, Some(&s.brain), Some(&b0), Some(&w)).unwrap();
        let slab = cut.slab_mask(acq.grid());
        for (a, b) in acq.volumes().iter().zip(out.volumes()) {
            for idx in 0..a.data().len() {
                if !slab.bits()[idx] {
                    assert_eq!(a.data()[idx].to_bits(), b.data()[idx].to_bits());
                }
            }
        }
        // every brain voxel in the slab was filled
        let region = slab_region(&cut, &s.brain).unwrap();
        for v in out.volumes() {
            assert!(region.indices().iter().all(|&i| v.data()[i] > 0.0));
        }
        assert!(matches!(impute_scan(&acq, &cut, &s.structural, None, Some(&b0), None), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_split_clean() {
        let corpus = Corpus::new(vec![scan(1), scan(2)], vec![scan(3)]).unwrap();
        let cfg = tiny_cfg();
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.log_b0, b.log_b0);
        assert!(a.aborted.is_none());
        assert_eq!(a.log_dwi.len(), 2);
        assert!(a.models.b0.is_finite() && a.models.weighted.is_finite());
        assert!(Corpus::new(vec![scan(1)], vec![scan(1)]).is_err());
    }

    #[test]
    fn single_checkpoint_selected_unconditionally() {
        let cfg = tiny_cfg();
        let pair = ModelPair {
            b0: ImputationModel::new(cfg.model.clone(), Shell::B0, 1).unwrap(),
            weighted: ImputationModel::new(cfg.model.clone(), Shell::Weighted, 2).unwrap(),
        };
        let cps = vec![Checkpoint { epoch: 4, pair }];
        let (c, _) = select_model(&cps, &[], &[30.0]).unwrap();
        assert_eq!(c.epoch, 4);
    }
}
