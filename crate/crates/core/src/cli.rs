//! Command-line front end: argument parsing, subcommands and run manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dti::{fit_dti, orientation_map, DEFAULT_SIGNAL_FLOOR};
use crate::error::{Error, Result};
use crate::nifti::{read_dwi, read_gradients, read_nifti, write_dwi, write_gradients, write_nifti};
use crate::nnet::{load_checkpoint, save_checkpoint, ModelHyper, OptimConfig};
use crate::phantom::{generate, PhantomSpec, SchemeSpec};
use crate::preprocess::{copy_nearest_slice, detect_fov_cutoff, truncate_fov, FovCut, Side};
use crate::shmetrics::{acc, fit_sh, psnr_volumes, split_wm_mask, DEFAULT_LAMBDA_LB, DEFAULT_L_MAX, DEFAULT_WM_FA};
use crate::tract::{bland_altman, dice, field_from_maps, track, track_dwi, BlandAltman, TrackParams};
use crate::training::{
    fibrous_region, impute_scan, impute_with_pair, region_acc, region_l1, slab_region, train, write_train_log, Corpus,
    Scan, TrainConfig, TrainOutcome,
};
use crate::volume::{DwiVolume, Mask};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Parser, Debug, Serialize)]
#[command(name = "fovx", version, about = "Field-of-view extension for diffusion MRI")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Generate a synthetic scan with known tensors.
    Phantom(PhantomArgs),
    /// Zero a slab of axial slices at one end.
    Truncate(TruncateArgs),
    /// Detect an incomplete FOV and report the cutoff.
    Qa(QaArgs),
    /// Fit tensors and write FA, MD, v1 and orientation maps.
    FitDti(FitDtiArgs),
    /// Train the b0 and diffusion-weighted models on a corpus.
    Train(TrainArgs),
    /// Fill the missing slab of a truncated scan.
    Impute(ImputeArgs),
    /// ACC and PSNR of an imputed scan against its reference.
    Evaluate(EvaluateArgs),
    /// Deterministic tracking from FA and v1 maps.
    Tract(TractArgs),
    /// Dice and Bland-Altman agreement between paired bundle masks.
    TractCompare(TractCompareArgs),
    /// Phantoms, truncation, training, imputation, evaluation and tracking in one run.
    E2e(E2eArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct DwiIn {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    #[arg(long)]
    pub bvec: PathBuf,
}

impl DwiIn {
    fn read(&self) -> Result<DwiVolume> {
        read_dwi(&self.input, &self.bval, &self.bvec)
    }

    fn paths(&self) -> Vec<&Path> {
        vec![&self.input, &self.bval, &self.bvec]
    }
}

#[derive(Args, Debug, Serialize)]
pub struct PhantomArgs {
    #[arg(long, default_value = "slab")]
    pub preset: String,
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    #[arg(long, default_value_t = 32)]
    pub dirs: usize,
    #[arg(long, default_value_t = 2)]
    pub b0s: usize,
    #[arg(long, default_value_t = 1300.0)]
    pub b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TruncateArgs {
    #[command(flatten)]
    pub dwi: DwiIn,
    #[arg(long, default_value = "top")]
    pub side: Side,
    #[arg(long)]
    pub mm: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cut_json: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct QaArgs {
    #[command(flatten)]
    pub dwi: DwiIn,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub scan_id: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FitDtiArgs {
    #[command(flatten)]
    pub dwi: DwiIn,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out_fa: Option<PathBuf>,
    #[arg(long)]
    pub out_md: Option<PathBuf>,
    #[arg(long)]
    pub out_v1: Option<PathBuf>,
    #[arg(long)]
    pub out_orient: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory of scan subdirectories (dwi.nii, dwi.bval, dwi.bvec, t1.nii, brain.nii).
    #[arg(long)]
    pub corpus: PathBuf,
    /// TrainConfig JSON; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scans (last by name) held out for model selection.
    #[arg(long, default_value_t = 1)]
    pub validation: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub dwi: DwiIn,
    #[arg(long)]
    pub structural: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub model_b0: PathBuf,
    #[arg(long)]
    pub model_dwi: PathBuf,
    /// Cut description; detected from the zero slices when absent.
    #[arg(long)]
    pub cut_json: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub bval: PathBuf,
    #[arg(long)]
    pub bvec: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub cut_json: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TractArgs {
    #[arg(long)]
    pub fa: PathBuf,
    #[arg(long)]
    pub v1: PathBuf,
    #[arg(long)]
    pub seeds: PathBuf,
    #[arg(long)]
    pub out_trk: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value_t = 0.2)]
    pub fa_stop: f64,
    #[arg(long, default_value_t = 45.0)]
    pub angle: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TractCompareArgs {
    /// Reference bundle masks, paired in order with `--test-mask`.
    #[arg(long = "ref-mask", required = true, num_args = 1..)]
    pub ref_masks: Vec<PathBuf>,
    #[arg(long = "test-mask", required = true, num_args = 1..)]
    pub test_masks: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct E2eArgs {
    #[arg(long, default_value = "slab")]
    pub preset: String,
    /// `quick` (seconds, 32³) or `full` (64³, the acceptance setting).
    #[arg(long, default_value = "quick")]
    pub profile: String,
    #[arg(long, default_value = "e2e-out")]
    pub out_dir: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub version: String,
    pub seed: u64,
    pub duration_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), sha256_hex(&std::fs::read(p)?));
    }
    Ok(out)
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    std::fs::create_dir_all(dir_of(path))?;
    Ok(())
}

fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_threshold(&read_nifti(path)?, 0.5))
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fovx: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(|e| Error::Config(e.to_string()))?;
        return pool.install(|| dispatch(cli));
    }
    dispatch(cli)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let (out_dir, inputs) = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, seed)?,
        Command::Truncate(a) => cmd_truncate(a)?,
        Command::Qa(a) => cmd_qa(a)?,
        Command::FitDti(a) => cmd_fit_dti(a)?,
        Command::Train(a) => cmd_train(a, cli.seed)?,
        Command::Impute(a) => cmd_impute(a)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
        Command::Tract(a) => cmd_tract(a)?,
        Command::TractCompare(a) => cmd_tract_compare(a)?,
        Command::E2e(a) => cmd_e2e(a, seed)?,
    };
    let Some(out_dir) = out_dir else { return Ok(()) };
    let config = serde_json::to_vec(&cli.command)?;
    let manifest = RunManifest {
        command: command_name(&cli.command).to_string(),
        config_hash: sha256_hex(&config),
        inputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        duration_s: start.elapsed().as_secs_f64(),
    };
    write_json(&manifest, &out_dir.join("manifest.json"))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom(_) => "phantom",
        Command::Truncate(_) => "truncate",
        Command::Qa(_) => "qa",
        Command::FitDti(_) => "fit-dti",
        Command::Train(_) => "train",
        Command::Impute(_) => "impute",
        Command::Evaluate(_) => "evaluate",
        Command::Tract(_) => "tract",
        Command::TractCompare(_) => "tract-compare",
        Command::E2e(_) => "e2e",
    }
}

type Outcome = (Option<PathBuf>, BTreeMap<String, String>);

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<Outcome> {
    let scheme = SchemeSpec { n_dirs: a.dirs, n_b0: a.b0s, b: a.b };
    let spec = PhantomSpec::preset(&a.preset, a.grid, a.spacing, scheme, a.sigma, seed)?;
    let p = generate(&spec)?;
    let scan = Scan { id: String::new(), dwi: p.dwi, structural: p.structural, brain: p.brain };
    scan.save(&a.out_dir)?;
    write_nifti(&p.bundle_labels.to_volume(), a.out_dir.join("bundles.nii"))?;
    let tf = &p.truth_tensors;
    let n = tf.grid.len();
    let mut d = vec![0f32; 6 * n];
    for (idx, t) in tf.tensors.iter().enumerate() {
        if let Some(t) = t {
            for c in 0..6 {
                d[c * n + idx] = t.d[c] as f32;
            }
        }
    }
    write_nifti(&crate::Volume3::new(tf.grid, 6, d)?, a.out_dir.join("truth_tensor.nii"))?;
    write_nifti(&tf.fa, a.out_dir.join("truth_fa.nii"))?;
    write_nifti(&tf.v1_volume(), a.out_dir.join("truth_v1.nii"))?;
    Ok((Some(a.out_dir.clone()), BTreeMap::new()))
}

fn cmd_truncate(a: &TruncateArgs) -> Result<Outcome> {
    let d = a.dwi.read()?;
    let (cut_dwi, cut) = truncate_fov(&d, a.side, a.mm)?;
    ensure_parent(&a.out)?;
    write_dwi(&cut_dwi, &a.out)?;
    write_json(&cut, &a.cut_json)?;
    Ok((Some(dir_of(&a.out)), digest_inputs(&a.dwi.paths())?))
}

#[derive(Debug, Serialize)]
struct QaRow {
    scan_id: String,
    side: String,
    cut_mm: f64,
}

fn cmd_qa(a: &QaArgs) -> Result<Outcome> {
    let d = a.dwi.read()?;
    let mask = read_mask(&a.mask)?;
    d.grid().ensure_matches(mask.grid())?;
    let id = a
        .scan_id
        .clone()
        .unwrap_or_else(|| a.dwi.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let row = match detect_fov_cutoff(&d, &mask) {
        Some(c) => QaRow { scan_id: id, side: c.side.to_string(), cut_mm: c.cut_mm },
        None => QaRow { scan_id: id, side: "none".into(), cut_mm: 0.0 },
    };
    let mut paths = a.dwi.paths();
    paths.push(&a.mask);
    let inputs = digest_inputs(&paths)?;
    match &a.out {
        Some(out) => {
            ensure_parent(out)?;
            let mut w = csv::Writer::from_path(out)?;
            w.serialize(&row)?;
            w.flush()?;
            Ok((Some(dir_of(out)), inputs))
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.serialize(&row)?;
            w.flush()?;
            Ok((None, inputs))
        }
    }
}

fn cmd_fit_dti(a: &FitDtiArgs) -> Result<Outcome> {
    let d = a.dwi.read()?;
    let mask = match &a.mask {
        Some(p) => read_mask(p)?,
        None => Mask::full(*d.grid()),
    };
    let tf = fit_dti(&d, &mask, DEFAULT_SIGNAL_FLOOR)?;
    let mut first = None;
    let outputs = [
        (&a.out_fa, tf.fa.clone()),
        (&a.out_md, tf.md.clone()),
        (&a.out_v1, tf.v1_volume()),
        (&a.out_orient, orientation_map(&tf)),
    ];
    for (path, vol) in outputs {
        if let Some(p) = path {
            ensure_parent(p)?;
            write_nifti(&vol, p)?;
            first.get_or_insert_with(|| dir_of(p));
        }
    }
    let mut paths = a.dwi.paths();
    if let Some(m) = &a.mask {
        paths.push(m);
    }
    Ok((first, digest_inputs(&paths)?))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    selected_epoch: usize,
    aborted: Option<String>,
    validation: Vec<ValidationRow>,
    train_scans: Vec<String>,
    validation_scans: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ValidationRow {
    epoch: usize,
    acc_per_cut: Vec<Option<f64>>,
    score: Option<f64>,
}

fn save_training(outcome: &TrainOutcome, corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&outcome.models.b0, dir.join("model_b0.ckpt"))?;
    save_checkpoint(&outcome.models.weighted, dir.join("model_dwi.ckpt"))?;
    write_train_log(&outcome.log_b0, &outcome.validation_cuts_mm, dir.join("train_log_b0.csv"))?;
    write_train_log(&outcome.log_dwi, &outcome.validation_cuts_mm, dir.join("train_log_dwi.csv"))?;
    let report = TrainReport {
        selected_epoch: outcome.selected_epoch,
        aborted: outcome.aborted.clone(),
        validation: outcome
            .validation
            .iter()
            .map(|(e, v, s)| ValidationRow {
                epoch: *e,
                acc_per_cut: v.iter().map(|&x| finite_or_none(x)).collect(),
                score: finite_or_none(*s),
            })
            .collect(),
        train_scans: corpus.train.iter().map(|s| s.id.clone()).collect(),
        validation_scans: corpus.validation.iter().map(|s| s.id.clone()).collect(),
    };
    write_json(&report, &dir.join("train_report.json"))
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = Corpus::load_dir(&a.corpus, a.validation)?;
    let outcome = train(&corpus, &cfg)?;
    if let Some(reason) = &outcome.aborted {
        log::warn!("training stopped early: {reason}");
    }
    save_training(&outcome, &corpus, &a.out_dir)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(&a.corpus)? {
        let dir = entry?.path();
        for f in ["dwi.nii", "dwi.bval", "dwi.bvec", "t1.nii", "brain.nii"] {
            if dir.join(f).exists() {
                files.push(dir.join(f));
            }
        }
    }
    files.extend(a.config.iter().cloned());
    files.sort();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    Ok((Some(a.out_dir.clone()), digest_inputs(&refs)?))
}

fn cmd_impute(a: &ImputeArgs) -> Result<Outcome> {
    let d = a.dwi.read()?;
    let structural = read_nifti(&a.structural)?;
    let mask = a.mask.as_deref().map(read_mask).transpose()?;
    let cut: FovCut = match &a.cut_json {
        Some(p) => read_json(p)?,
        None => {
            let support = mask.clone().unwrap_or_else(|| Mask::full(*d.grid()));
            detect_fov_cutoff(&d, &support).unwrap_or(FovCut::empty(Side::Top))
        }
    };
    let b0 = load_checkpoint(&a.model_b0)?;
    let dwi = load_checkpoint(&a.model_dwi)?;
    let out = impute_scan(&d, &cut, &structural, mask.as_ref(), Some(&b0), Some(&dwi))?;
    ensure_parent(&a.out)?;
    write_dwi(&out, &a.out)?;
    let mut paths = a.dwi.paths();
    paths.extend([a.structural.as_path(), a.model_b0.as_path(), a.model_dwi.as_path()]);
    paths.extend(a.mask.as_deref());
    paths.extend(a.cut_json.as_deref());
    Ok((Some(dir_of(&a.out)), digest_inputs(&paths)?))
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvaluationReport {
    pub acc_mean: Option<f64>,
    pub acc_wm_mean: Option<f64>,
    pub psnr_wm_b0: Option<f64>,
    pub psnr_wm_dwi: Option<f64>,
    pub psnr_nonwm_b0: Option<f64>,
    pub psnr_nonwm_dwi: Option<f64>,
    pub voxels_included: usize,
}

/// ACC and PSNR of `test` against `reference` over `region`, split by reference FA.
pub fn evaluate(reference: &DwiVolume, test: &DwiVolume, region: &Mask) -> Result<EvaluationReport> {
    reference.ensure_compatible(test)?;
    let a = fit_sh(reference, region, DEFAULT_L_MAX, DEFAULT_LAMBDA_LB)?;
    let b = fit_sh(test, region, DEFAULT_L_MAX, DEFAULT_LAMBDA_LB)?;
    let all = acc(&a, &b, region)?;
    let tf = fit_dti(reference, region, DEFAULT_SIGNAL_FLOOR)?;
    let (wm, non_wm) = split_wm_mask(&tf, DEFAULT_WM_FA);
    let wm_acc = acc(&a, &b, &wm)?;
    let t = reference.gradients();
    let psnr = |m: &Mask, vols: Vec<usize>| -> Option<f64> {
        if m.is_empty() || vols.is_empty() {
            return None;
        }
        psnr_volumes(reference, test, m, &vols).ok().filter(|x| x.is_finite())
    };
    Ok(EvaluationReport {
        acc_mean: finite_or_none(all.mean),
        acc_wm_mean: finite_or_none(wm_acc.mean),
        psnr_wm_b0: psnr(&wm, t.b0_indices()),
        psnr_wm_dwi: psnr(&wm, t.weighted_indices()),
        psnr_nonwm_b0: psnr(&non_wm, t.b0_indices()),
        psnr_nonwm_dwi: psnr(&non_wm, t.weighted_indices()),
        voxels_included: all.included,
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let table = read_gradients(&a.bval, &a.bvec)?;
    let reference = DwiVolume::from_series(read_nifti(&a.reference)?, table.clone())?;
    let test = DwiVolume::from_series(read_nifti(&a.test)?, table)?;
    let mut region = read_mask(&a.mask)?;
    if let Some(p) = &a.cut_json {
        let cut: FovCut = read_json(p)?;
        region = slab_region(&cut, &region)?;
    }
    let report = evaluate(&reference, &test, &region)?;
    write_json(&report, &a.report)?;
    let mut paths = vec![a.reference.as_path(), a.test.as_path(), a.bval.as_path(), a.bvec.as_path(), a.mask.as_path()];
    paths.extend(a.cut_json.as_deref());
    Ok((Some(dir_of(&a.report)), digest_inputs(&paths)?))
}

fn cmd_tract(a: &TractArgs) -> Result<Outcome> {
    let tf = field_from_maps(&read_nifti(&a.fa)?, &read_nifti(&a.v1)?)?;
    let seeds = read_mask(&a.seeds)?;
    let params = TrackParams { step_mm: a.step, fa_stop: a.fa_stop, angle_stop_deg: a.angle };
    let lines = track(&tf, &seeds, &params)?;
    let points: Vec<&Vec<[f64; 3]>> = lines.iter().map(|s| &s.points).collect();
    write_json(&points, &a.out_trk)?;
    let stats = crate::tract::bundle_stats(&lines, &tf.grid);
    ensure_parent(&a.out_mask)?;
    write_nifti(&stats.occupancy.to_volume(), &a.out_mask)?;
    Ok((Some(dir_of(&a.out_trk)), digest_inputs(&[a.fa.as_path(), a.v1.as_path(), a.seeds.as_path()])?))
}

fn cmd_tract_compare(a: &TractCompareArgs) -> Result<Outcome> {
    if a.ref_masks.len() != a.test_masks.len() {
        return Err(Error::Pairing(format!(
            "{} reference masks vs {} test masks",
            a.ref_masks.len(),
            a.test_masks.len()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "name", "value"])?;
    let (mut ref_vol, mut test_vol) = (Vec::new(), Vec::new());
    for (n, (r, t)) in a.ref_masks.iter().zip(&a.test_masks).enumerate() {
        let (r, t) = (read_mask(r)?, read_mask(t)?);
        let voxel_mm3: f64 = r.grid().spacing.iter().product();
        w.write_record(["dice", &format!("pair{n}"), &format!("{:.6}", dice(&r, &t)?)])?;
        ref_vol.push(r.count() as f64 * voxel_mm3);
        test_vol.push(t.count() as f64 * voxel_mm3);
    }
    if ref_vol.len() >= 2 {
        let ba = bland_altman(&ref_vol, &test_vol)?;
        for (name, v) in
            [("mean_diff", ba.mean_diff), ("sd_diff", ba.sd_diff), ("loa_low", ba.loa_low), ("loa_high", ba.loa_high)]
        {
            w.write_record(["bland_altman_volume_mm3", name, &format!("{v:.6}")])?;
        }
    }
    ensure_parent(&a.report)?;
    std::fs::write(&a.report, w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;
    let paths: Vec<&Path> = a.ref_masks.iter().chain(&a.test_masks).map(PathBuf::as_path).collect();
    Ok((Some(dir_of(&a.report)), digest_inputs(&paths)?))
}

/// Data and training settings for one end-to-end run.
#[derive(Debug, Clone, Serialize)]
pub struct E2eProfile {
    pub grid: usize,
    pub spacing: f64,
    pub dirs: usize,
    pub b0s: usize,
    pub sigma: f64,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub train: TrainConfig,
}

impl E2eProfile {
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "quick" => Ok(Self {
                grid: 32,
                spacing: 4.0,
                dirs: 12,
                b0s: 1,
                sigma: 20.0,
                n_train: 2,
                n_validation: 1,
                n_test: 2,
                train: TrainConfig {
                    epochs: 2,
                    batch_size: 4,
                    samples_per_epoch: 16,
                    model: ModelHyper {
                        z_dim: 4,
                        encoder_channels: vec![4, 8],
                        base_channels: 4,
                        depth: 2,
                        disc_channels: vec![4, 8],
                        ..ModelHyper::compact()
                    },
                    optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
                    ..TrainConfig::default()
                },
            }),
            "full" => Ok(Self {
                grid: 64,
                spacing: 2.0,
                dirs: 32,
                b0s: 2,
                sigma: 20.0,
                n_train: 6,
                n_validation: 1,
                n_test: 2,
                train: TrainConfig {
                    epochs: 12,
                    samples_per_epoch: 256,
                    validate_every: 4,
                    model: ModelHyper::compact(),
                    optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
                    ..TrainConfig::default()
                },
            }),
            other => Err(Error::Config(format!("unknown e2e profile '{other}'"))),
        }
    }

    pub fn scan(&self, preset: &str, sigma: f64, seed: u64, id: &str) -> Result<(Scan, Mask)> {
        let scheme = SchemeSpec { n_dirs: self.dirs, n_b0: self.b0s, b: crate::phantom::DEFAULT_B };
        let spec = PhantomSpec::preset(preset, self.grid, self.spacing, scheme, sigma, seed)?;
        let p = generate(&spec)?;
        let bundles = p.bundle_labels.any();
        Ok((Scan { id: id.to_string(), dwi: p.dwi, structural: p.structural, brain: p.brain }, bundles))
    }
}

/// Slab metrics of one imputation against the complete scan.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SlabScore {
    pub acc: Option<f64>,
    pub acc_fibrous: Option<f64>,
    pub l1: f64,
    pub dice: f64,
    pub mean_length_mm: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct E2eScanReport {
    pub scan: String,
    pub cut: FovCut,
    pub model: SlabScore,
    pub copy: SlabScore,
    pub reference_mean_length_mm: f64,
    pub evaluation: EvaluationReport,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct E2eReport {
    pub preset: String,
    pub profile: String,
    pub seed: u64,
    pub selected_epoch: usize,
    pub aborted: Option<String>,
    pub objective_first: [f64; 2],
    pub objective_last: [f64; 2],
    pub checkpoint_sha256: [String; 2],
    pub scans: Vec<E2eScanReport>,
    pub length_agreement_model: Option<BlandAltman>,
    pub length_agreement_copy: Option<BlandAltman>,
}

/// Seeds for bundle tracking: bundle voxels in the acquired part of the brain.
pub fn acquired_seeds(bundles: &Mask, cut: &FovCut) -> Result<Mask> {
    bundles.and(&cut.slab_mask(bundles.grid()).not())
}

/// Score `test` against `truth` on the slab and by tracking from `seeds`.
pub fn slab_score(
    truth: &DwiVolume,
    test: &DwiVolume,
    brain: &Mask,
    cut: &FovCut,
    seeds: &Mask,
    reference: &crate::tract::BundleStats,
) -> Result<SlabScore> {
    let region = slab_region(cut, brain)?;
    let fibrous = fibrous_region(truth, &region)?;
    let (_, stats) = track_dwi(test, brain, seeds, &TrackParams::default())?;
    Ok(SlabScore {
        acc: finite_or_none(region_acc(truth, test, &region)?),
        acc_fibrous: if fibrous.is_empty() { None } else { finite_or_none(region_acc(truth, test, &fibrous)?) },
        l1: region_l1(truth, test, &region)?,
        dice: dice(&reference.occupancy, &stats.occupancy)?,
        mean_length_mm: stats.mean_length,
    })
}

pub fn run_e2e(preset: &str, profile_name: &str, seed: u64, out_dir: &Path) -> Result<E2eReport> {
    let profile = E2eProfile::named(profile_name)?;
    let mut cfg = profile.train.clone();
    cfg.seed = seed;
    let make = |role: u64, n: usize, prefix: &str| -> Result<Vec<(Scan, Mask)>> {
        (0..n).map(|i| profile.scan(preset, profile.sigma, mix(seed, role, i), &format!("{prefix}{i:02}"))).collect()
    };
    let train_scans = make(1, profile.n_train, "train")?;
    let val_scans = make(2, profile.n_validation, "val")?;
    let test_scans = make(3, profile.n_test, "test")?;
    let corpus =
        Corpus::new(train_scans.into_iter().map(|s| s.0).collect(), val_scans.into_iter().map(|s| s.0).collect())?;
    log::info!("training on {} scans", corpus.train.len());
    let outcome = train(&corpus, &cfg)?;
    let model_dir = out_dir.join("model");
    save_training(&outcome, &corpus, &model_dir)?;

    let mut scans = Vec::new();
    let (mut len_ref, mut len_model, mut len_copy) = (Vec::new(), Vec::new(), Vec::new());
    for (scan, bundles) in &test_scans {
        let (acq, cut) = truncate_fov(&scan.dwi, Side::Top, cfg.test_cut_mm)?;
        let imputed = impute_with_pair(&acq, &cut, &scan.structural, Some(&scan.brain), &outcome.models)?;
        let copy = copy_nearest_slice(&acq, &cut);
        let dir = out_dir.join(&scan.id);
        std::fs::create_dir_all(&dir)?;
        write_dwi(&acq, dir.join("cut.nii"))?;
        write_gradients(acq.gradients(), dir.join("dwi.bval"), dir.join("dwi.bvec"))?;
        write_json(&cut, &dir.join("cut.json"))?;
        write_dwi(&imputed, dir.join("imputed.nii"))?;

        let seeds = acquired_seeds(bundles, &cut)?;
        let (_, reference) = track_dwi(&scan.dwi, &scan.brain, &seeds, &TrackParams::default())?;
        let model = slab_score(&scan.dwi, &imputed, &scan.brain, &cut, &seeds, &reference)?;
        let copy = slab_score(&scan.dwi, &copy, &scan.brain, &cut, &seeds, &reference)?;
        len_ref.push(reference.mean_length);
        len_model.push(model.mean_length_mm);
        len_copy.push(copy.mean_length_mm);
        scans.push(E2eScanReport {
            scan: scan.id.clone(),
            cut,
            evaluation: evaluate(&scan.dwi, &imputed, &slab_region(&cut, &scan.brain)?)?,
            model,
            copy,
            reference_mean_length_mm: reference.mean_length,
        });
    }
    let objective = |log: &[crate::training::EpochLog], first: bool| {
        let row = if first { log.first() } else { log.last() };
        row.map_or(f64::NAN, |r| r.objective)
    };
    let report = E2eReport {
        preset: preset.to_string(),
        profile: profile_name.to_string(),
        seed,
        selected_epoch: outcome.selected_epoch,
        aborted: outcome.aborted.clone(),
        objective_first: [objective(&outcome.log_b0, true), objective(&outcome.log_dwi, true)],
        objective_last: [objective(&outcome.log_b0, false), objective(&outcome.log_dwi, false)],
        checkpoint_sha256: [
            sha256_hex(&std::fs::read(model_dir.join("model_b0.ckpt"))?),
            sha256_hex(&std::fs::read(model_dir.join("model_dwi.ckpt"))?),
        ],
        scans,
        length_agreement_model: bland_altman(&len_ref, &len_model).ok(),
        length_agreement_copy: bland_altman(&len_ref, &len_copy).ok(),
    };
    write_json(&report, &out_dir.join("report.json"))?;
    Ok(report)
}

fn mix(seed: u64, role: u64, i: usize) -> u64 {
    crate::util::mix_seed(&[seed, role, i as u64])
}

fn cmd_e2e(a: &E2eArgs, seed: u64) -> Result<Outcome> {
    std::fs::create_dir_all(&a.out_dir)?;
    run_e2e(&a.preset, &a.profile, seed, &a.out_dir)?;
    Ok((Some(a.out_dir.clone()), BTreeMap::new()))
}
