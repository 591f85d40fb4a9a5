//! End-to-end commands over a directory layout of simulated cases.
//!
//! A case directory holds `volume.*`, `labels.*`, `brain.mask.*`,
//! `tissue.mask.*`, `motion.csv` and ground-truth maps under `gt/`. `fit`
//! adds a map directory (default `fit/`) with the pre-processed volume, the
//! arterial and venous curves and the fitted maps; `infer` adds `cnn/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_volume, svd_volume, FitConfig, VolumeFit, DEFAULT_SVD_THRESHOLD};
use crate::phantom::{
    builtin_scene, generate_phantom, ground_truth_maps, AcquisitionConfig, GammaVariateParams,
    LesionKind, NoiseMotionConfig, TissueParamField,
};
use crate::preprocess::{
    filter_volume, register_timeseries, BilateralConfig, RegistrationConfig, ShiftLog,
};
use crate::regressor::{
    infer, slice_samples, train, History, Regressor, Sample, TrainConfig, UNetConfig, OUTPUT_KINDS,
};
use crate::validate::{evaluate_cohort, CohortCase, SegmentationThresholds, ValidationReport};
use crate::vascular::{pvc_scale_aif, select_aif, select_vof, VascularSelection};
use crate::volume::{
    read_map_set, read_mask, read_volume, write_curve_csv, write_map_set, write_mask,
    write_u8_volume, write_volume, BinaryMask, Curve, MapKind, MapSet, TimeSeriesVolume, U8Volume,
};

pub const VOLUME: &str = "volume";
pub const LABELS: &str = "labels";
pub const BRAIN_MASK: &str = "brain.mask";
pub const TISSUE_MASK: &str = "tissue.mask";
pub const GT_DIR: &str = "gt";
pub const FIT_DIR: &str = "fit";
pub const CNN_DIR: &str = "cnn";
pub const PREPROCESSED: &str = "preprocessed";
pub const MODEL_FILE: &str = "model.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub options: &'a T,
}

pub fn write_run_json<T: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    options: &T,
) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads: rayon::current_num_threads(),
            options,
        },
    )
}

/// Case subdirectories (`case_*`) of `dir`, sorted by name.
pub fn case_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.is_dir() && e.file_name().to_string_lossy().starts_with("case_") {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no case_* directories in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn case_id(dir: &Path) -> String {
    dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOptions {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub dt: f64,
    pub noise_sigma: f64,
    /// Largest injected in-plane shift in pixels.
    pub max_shift: u32,
    /// Fraction of frames that receive a shift.
    pub motion_fraction: f64,
    pub healthy_fraction: f64,
    pub penumbra_only_fraction: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            nt: 89,
            dt: 0.5,
            noise_sigma: 2.0,
            max_shift: 3,
            motion_fraction: 0.3,
            healthy_fraction: 0.1,
            penumbra_only_fraction: 0.2,
        }
    }
}

impl SimulateOptions {
    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            nt: self.nt,
            dt: self.dt,
            ..AcquisitionConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let fractions = [
            self.motion_fraction,
            self.healthy_fraction,
            self.penumbra_only_fraction,
        ];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || self.healthy_fraction + self.penumbra_only_fraction > 1.0
        {
            return Err(Error::InvalidArgument(
                "case fractions must lie in [0, 1] and sum to at most 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Seed of case `index` in a run seeded with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

pub struct SimulatedCase {
    pub id: String,
    pub lesion: LesionKind,
    pub scene: TissueParamField,
    pub volume: TimeSeriesVolume,
    pub ground_truth: MapSet,
    pub motion: Vec<(i64, i64)>,
}

pub fn simulate_case(opts: &SimulateOptions, seed: u64, index: usize) -> Result<SimulatedCase> {
    opts.validate()?;
    let cs = case_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(cs);
    let u: f64 = rng.random();
    let lesion = if u < opts.healthy_fraction {
        LesionKind::Healthy
    } else if u < opts.healthy_fraction + opts.penumbra_only_fraction {
        LesionKind::PenumbraOnly
    } else {
        LesionKind::CoreAndPenumbra
    };
    let scene = builtin_scene(opts.nx, opts.ny, cs, lesion)?;
    let acq = opts.acquisition();
    let aif = GammaVariateParams::default();
    let motion =
        NoiseMotionConfig::random_schedule(opts.nt, opts.max_shift, opts.motion_fraction, cs);
    let nm = NoiseMotionConfig {
        noise_sigma_hu: opts.noise_sigma,
        max_shift_px: opts.max_shift,
        shift_schedule: motion.clone(),
        rng_seed: cs,
    };
    let volume = generate_phantom(&scene, &acq, &aif, &nm)?;
    let ground_truth = MapSet::new(ground_truth_maps(&scene, &acq, &aif)?)?;
    Ok(SimulatedCase {
        id: format!("case_{index:03}"),
        lesion,
        scene,
        volume,
        ground_truth,
        motion,
    })
}

pub fn write_case(case: &SimulatedCase, dir: &Path) -> Result<()> {
    write_volume(&case.volume, dir.join(VOLUME))?;
    write_u8_volume(
        &U8Volume {
            kind: "LABELS".into(),
            dims: case.scene.dims,
            spacing: case.scene.spacing,
            values: case.scene.label_bytes(),
        },
        dir.join(LABELS),
    )?;
    write_mask(&case.scene.brain_mask(), dir.join(BRAIN_MASK))?;
    write_mask(&case.scene.perfused_mask(), dir.join(TISSUE_MASK))?;
    write_map_set(&case.ground_truth, dir.join(GT_DIR), "")?;
    let mut motion = String::from("frame,dx,dy\n");
    for (t, (dx, dy)) in case.motion.iter().enumerate() {
        motion.push_str(&format!("{t},{dx},{dy}\n"));
    }
    write_text(&dir.join("motion.csv"), &motion)
}

/// Simulates `cases` cases numbered from `first_index` into
/// `out_dir/case_NNN`.
pub fn cmd_simulate(
    opts: &SimulateOptions,
    cases: usize,
    first_index: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    opts.validate()?;
    if cases == 0 {
        return Err(Error::InvalidArgument("--cases must be at least 1".into()));
    }
    let mut dirs = Vec::with_capacity(cases);
    for i in first_index..first_index + cases {
        let case = simulate_case(opts, seed, i)?;
        let dir = out_dir.join(&case.id);
        write_case(&case, &dir)?;
        dirs.push(dir);
    }
    write_run_json(out_dir, "simulate", seed, &(opts, cases, first_index))?;
    Ok(dirs)
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub skip_register: bool,
    pub reference_frame: usize,
    pub max_shift: u32,
    pub filter: bool,
    pub sigma_spatial: f64,
    pub sigma_intensity: f64,
    pub n_aif: usize,
    pub n_vof: usize,
    /// Rescale the arterial curve to the venous area.
    pub pvc: bool,
    /// Truncated-SVD deconvolution instead of the box-IRF regression.
    pub svd: bool,
    pub svd_threshold: f64,
    pub refine: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        let b = BilateralConfig::default();
        Self {
            skip_register: false,
            reference_frame: 0,
            max_shift: RegistrationConfig::default().max_shift,
            filter: true,
            // 3 mm pixels: a 2 px kernel spans a small core and biases its CBV up
            sigma_spatial: 1.0,
            sigma_intensity: b.sigma_intensity,
            n_aif: 100,
            n_vof: 100,
            pvc: false,
            svd: false,
            svd_threshold: DEFAULT_SVD_THRESHOLD,
            refine: true,
        }
    }
}

/// Registration (optional) followed by bilateral filtering (optional).
pub fn preprocess_volume(
    vol: &TimeSeriesVolume,
    opts: &FitOptions,
) -> Result<(TimeSeriesVolume, Option<ShiftLog>)> {
    let (registered, log) = if opts.skip_register {
        (vol.clone(), None)
    } else {
        let cfg = RegistrationConfig {
            max_shift: opts.max_shift,
            ..RegistrationConfig::default()
        };
        let (r, log) = register_timeseries(vol, opts.reference_frame, &cfg)?;
        (r, Some(log))
    };
    let out = if opts.filter {
        let cfg = BilateralConfig {
            sigma_spatial: opts.sigma_spatial,
            sigma_intensity: opts.sigma_intensity,
            radius: None,
        };
        filter_volume(&registered, &cfg)?
    } else {
        registered
    };
    Ok((out, log))
}

pub struct FitArtifacts {
    pub preprocessed: TimeSeriesVolume,
    pub shifts: Option<ShiftLog>,
    pub aif: VascularSelection,
    pub vof: VascularSelection,
    /// Arterial curve used for deconvolution (after correction if enabled).
    pub input_function: Curve,
    pub fit: VolumeFit,
}

/// Pre-processing, vascular curve selection inside `vessel_mask` and
/// per-voxel fitting inside `fit_mask`.
pub fn fit_case(
    vol: &TimeSeriesVolume,
    vessel_mask: &BinaryMask,
    fit_mask: &BinaryMask,
    opts: &FitOptions,
) -> Result<FitArtifacts> {
    let (pre, shifts) = preprocess_volume(vol, opts)?;
    let aif = select_aif(&pre, vessel_mask, opts.n_aif)?;
    let vof = select_vof(&pre, vessel_mask, opts.n_vof)?;
    let input_function = if opts.pvc {
        pvc_scale_aif(&aif.curve, &vof.curve)?
    } else {
        aif.curve.clone()
    };
    let cfg = FitConfig {
        refine: opts.refine,
        ..FitConfig::for_dt(pre.dt())
    };
    let fit = if opts.svd {
        svd_volume(
            &pre,
            &input_function,
            opts.svd_threshold,
            cfg.units,
            fit_mask,
        )?
    } else {
        fit_volume(&pre, &input_function, &cfg, fit_mask)?
    };
    Ok(FitArtifacts {
        preprocessed: pre,
        shifts,
        aif,
        vof,
        input_function,
        fit,
    })
}

/// Fits one case directory, writing into `case_dir/out_sub`.
pub fn cmd_fit(
    case_dir: &Path,
    out_sub: &str,
    opts: &FitOptions,
    seed: u64,
) -> Result<FitArtifacts> {
    let vol = read_volume(case_dir.join(VOLUME))?;
    let brain = read_mask(case_dir.join(BRAIN_MASK))?;
    let tissue = read_mask(case_dir.join(TISSUE_MASK))?;
    let art = fit_case(&vol, &brain, &tissue, opts)?;
    let out = case_dir.join(out_sub);
    let suffix = if opts.svd { "_svd" } else { "" };
    write_map_set(&art.fit.maps, &out, suffix)?;
    write_volume(&art.preprocessed, out.join(PREPROCESSED))?;
    write_curve_csv(&art.input_function, out.join("aif.csv"))?;
    write_curve_csv(&art.vof.curve, out.join("vof.csv"))?;
    art.aif.write_voxels_csv(out.join("aif_voxels.csv"))?;
    art.vof.write_voxels_csv(out.join("vof_voxels.csv"))?;
    if let Some(log) = &art.shifts {
        log.write_csv(out.join("shifts.csv"))?;
    }
    art.fit
        .summary
        .write_json(out.join(format!("fit_summary{suffix}.json")))?;
    write_run_json(&out, "fit", seed, opts)?;
    Ok(art)
}

// ------------------------------------------------------------ train / infer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub depth: usize,
    pub base_channels: usize,
    /// Case subdirectory holding the input volume and target maps.
    pub source_sub: String,
    pub train: TrainConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            source_sub: FIT_DIR.into(),
            train: TrainConfig::default(),
        }
    }
}

/// Training pairs of one fitted case: its pre-processed volume and fitted
/// maps.
pub fn case_samples(
    model: &Regressor,
    case_dir: &Path,
    source_sub: &str,
) -> Result<Vec<Sample<f32>>> {
    let src = case_dir.join(source_sub);
    let vol = read_volume(src.join(PREPROCESSED))?;
    let maps = read_map_set(&src, &OUTPUT_KINDS, "")?;
    slice_samples(model, &vol, &maps)
}

pub struct TrainOutcome {
    pub model: Regressor,
    pub history: History,
}

/// Trains on fitted cases and writes `model.json`, `model.weights` and
/// `history.csv` into `out_dir`.
pub fn cmd_train(
    train_dirs: &[PathBuf],
    val_dirs: &[PathBuf],
    opts: &TrainOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if train_dirs.is_empty() || val_dirs.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs training and validation cases".into(),
        ));
    }
    let first = read_volume(train_dirs[0].join(&opts.source_sub).join(PREPROCESSED))?;
    let config = UNetConfig {
        in_channels: first.nt(),
        out_channels: 3,
        depth: opts.depth,
        base_channels: opts.base_channels,
    };
    let model = Regressor::new(config, seed)?;
    let load = |dirs: &[PathBuf]| -> Result<Vec<Sample<f32>>> {
        let mut all = Vec::new();
        for d in dirs {
            all.extend(case_samples(&model, d, &opts.source_sub)?);
        }
        Ok(all)
    };
    let train_set = load(train_dirs)?;
    let val_set = load(val_dirs)?;
    let cfg = TrainConfig { seed, ..opts.train };
    let (net, history) = train(model.net.clone(), &train_set, &val_set, &cfg)?;
    let model = Regressor { net, ..model };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    model.save(&out_dir.join(MODEL_FILE))?;
    history.write_csv(&out_dir.join("history.csv"))?;
    write_json(&out_dir.join("history.json"), &history)?;
    write_run_json(out_dir, "train", seed, &(opts, train_dirs, val_dirs))?;
    Ok(TrainOutcome { model, history })
}

/// Predicts CBV, CBF and TTP for a volume and writes them into `out`.
pub fn cmd_infer(model_path: &Path, volume_stem: &Path, out: &Path) -> Result<MapSet> {
    let model = Regressor::load(model_path)?;
    let vol = read_volume(volume_stem)?;
    let maps = infer(&model, &vol)?;
    write_map_set(&maps, out, "")?;
    Ok(maps)
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub reference_sub: String,
    pub test_sub: String,
    pub reference_suffix: String,
    pub test_suffix: String,
    pub mask: String,
    pub thresholds: SegmentationThresholds,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            reference_sub: FIT_DIR.into(),
            test_sub: CNN_DIR.into(),
            reference_suffix: String::new(),
            test_suffix: String::new(),
            mask: TISSUE_MASK.into(),
            thresholds: SegmentationThresholds::default(),
        }
    }
}

const SEGMENT_KINDS: [MapKind; 3] = [MapKind::Cbv, MapKind::Cbf, MapKind::Ttp];

pub fn load_cohort(case_dirs: &[PathBuf], opts: &ValidateOptions) -> Result<Vec<CohortCase>> {
    case_dirs
        .iter()
        .map(|d| {
            Ok(CohortCase {
                id: case_id(d),
                reference: read_map_set(
                    d.join(&opts.reference_sub),
                    &SEGMENT_KINDS,
                    &opts.reference_suffix,
                )?,
                test: read_map_set(d.join(&opts.test_sub), &SEGMENT_KINDS, &opts.test_suffix)?,
                mask: read_mask(d.join(&opts.mask))?,
            })
        })
        .collect()
}

/// Evaluates a cohort and writes `report.json`, `report.csv` and
/// `summary.txt` into `out_dir`.
pub fn cmd_validate(
    case_dirs: &[PathBuf],
    opts: &ValidateOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<ValidationReport> {
    if case_dirs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a cohort needs at least 3 cases, got {}",
            case_dirs.len()
        )));
    }
    let cohort = load_cohort(case_dirs, opts)?;
    let report = evaluate_cohort(&cohort, &opts.thresholds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    report.write_json(&out_dir.join("report.json"))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    write_text(&out_dir.join("summary.txt"), &report.summary_table())?;
    write_run_json(out_dir, "validate", seed, opts)?;
    Ok(report)
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub train_cases: usize,
    pub val_cases: usize,
    pub test_cases: usize,
    pub simulate: SimulateOptions,
    pub fit: FitOptions,
    pub train: TrainOptions,
    pub validate: ValidateOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            train_cases: 100,
            val_cases: 15,
            test_cases: 12,
            simulate: SimulateOptions::default(),
            fit: FitOptions::default(),
            train: TrainOptions::default(),
            validate: ValidateOptions::default(),
        }
    }
}

pub struct PipelineOutcome {
    pub history: History,
    pub report: ValidationReport,
    pub train_seconds: f64,
}

/// simulate -> fit -> train -> infer -> validate under `out_dir`.
pub fn cmd_pipeline(opts: &PipelineOptions, seed: u64, out_dir: &Path) -> Result<PipelineOutcome> {
    if opts.train_cases == 0 || opts.val_cases == 0 {
        return Err(Error::InvalidArgument(
            "pipeline needs training and validation cases".into(),
        ));
    }
    if opts.test_cases < 3 {
        return Err(Error::InvalidArgument(
            "pipeline needs at least 3 test cases".into(),
        ));
    }
    let splits = [
        ("train", opts.train_cases, 0),
        ("val", opts.val_cases, opts.train_cases),
        ("test", opts.test_cases, opts.train_cases + opts.val_cases),
    ];
    let mut dirs: Vec<Vec<PathBuf>> = Vec::new();
    for (name, n, first) in splits {
        let split_dir = out_dir.join(name);
        let cases = cmd_simulate(&opts.simulate, n, first, seed, &split_dir)?;
        for c in &cases {
            cmd_fit(c, FIT_DIR, &opts.fit, seed)?;
        }
        dirs.push(cases);
    }
    let start = std::time::Instant::now();
    let trained = cmd_train(
        &dirs[0],
        &dirs[1],
        &opts.train,
        seed,
        &out_dir.join("model"),
    )?;
    let train_seconds = start.elapsed().as_secs_f64();
    let model_path = out_dir.join("model").join(MODEL_FILE);
    for c in &dirs[2] {
        cmd_infer(
            &model_path,
            &c.join(FIT_DIR).join(PREPROCESSED),
            &c.join(CNN_DIR),
        )?;
    }
    let validate = ValidateOptions {
        reference_sub: FIT_DIR.into(),
        test_sub: CNN_DIR.into(),
        ..opts.validate.clone()
    };
    let report = cmd_validate(&dirs[2], &validate, seed, &out_dir.join("report"))?;
    write_run_json(out_dir, "pipeline", seed, opts)?;
    Ok(PipelineOutcome {
        history: trained.history,
        report,
        train_seconds,
    })
}
