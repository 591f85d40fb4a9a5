//! Command-line front end. Exit codes: 0 success, 1 computation error,
//! 2 usage or input error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::pipeline::{
    case_dirs, cmd_fit, cmd_infer, cmd_pipeline, cmd_simulate, cmd_train, cmd_validate,
    write_run_json, FitOptions, PipelineOptions, SimulateOptions, TrainOptions, ValidateOptions,
    CNN_DIR, FIT_DIR,
};
use crate::regressor::TrainConfig;
use crate::validate::SegmentationThresholds;

#[derive(Debug, Parser)]
#[command(
    name = "ctperf",
    version,
    about = "CT perfusion simulation, fitting, map regression and validation"
)]
pub struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ctperf_out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate phantom cases into <out-dir>/case_NNN.
    Simulate {
        #[arg(long, default_value_t = 1)]
        cases: usize,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Register, filter, select vascular curves and fit maps for case directories.
    Fit {
        /// Case directories (each with volume, brain.mask, tissue.mask).
        #[arg(required = true)]
        cases: Vec<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
        /// Subdirectory of each case receiving the outputs.
        #[arg(long, default_value = FIT_DIR)]
        out_sub: String,
    },
    /// Train the map regressor on fitted cases.
    Train {
        /// Directory of fitted training cases.
        #[arg(long)]
        train: PathBuf,
        /// Directory of fitted validation cases.
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        train_args: TrainArgs,
    },
    /// Predict CBV, CBF and TTP from a registered volume and a model only.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Volume stem; writes maps into <out-dir>.
        #[arg(long, conflicts_with = "cases")]
        volume: Option<PathBuf>,
        /// Directory of cases; reads <case>/<input-sub> and writes <case>/<out-sub>.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long, default_value = "fit/preprocessed")]
        input_sub: String,
        #[arg(long, default_value = CNN_DIR)]
        out_sub: String,
    },
    /// Segment and compare paired map directories of a cohort.
    Validate {
        /// Directory of case_* subdirectories.
        #[arg(long)]
        cases: PathBuf,
        #[command(flatten)]
        val: ValidateArgs,
    },
    /// simulate -> fit -> train -> infer -> validate in one seeded run.
    Pipeline {
        #[arg(long, default_value_t = 100)]
        train_cases: usize,
        #[arg(long, default_value_t = 15)]
        val_cases: usize,
        #[arg(long, default_value_t = 12)]
        test_cases: usize,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        train_args: TrainArgs,
        #[command(flatten)]
        val: ValidateArgs,
    },
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 64)]
    pub nx: usize,
    #[arg(long, default_value_t = 64)]
    pub ny: usize,
    /// Time frames.
    #[arg(long, default_value_t = 89)]
    pub nt: usize,
    /// Frame interval in s.
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    /// Gaussian noise in HU.
    #[arg(long, default_value_t = 2.0)]
    pub noise: f64,
    /// Largest injected shift in pixels.
    #[arg(long, default_value_t = 3)]
    pub max_shift: u32,
    #[arg(long, default_value_t = 0.3)]
    pub motion_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub healthy_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub penumbra_only_fraction: f64,
}

impl SimArgs {
    fn options(&self) -> SimulateOptions {
        SimulateOptions {
            nx: self.nx,
            ny: self.ny,
            nt: self.nt,
            dt: self.dt,
            noise_sigma: self.noise,
            max_shift: self.max_shift,
            motion_fraction: self.motion_fraction,
            healthy_fraction: self.healthy_fraction,
            penumbra_only_fraction: self.penumbra_only_fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub skip_register: bool,
    #[arg(long, default_value_t = 0)]
    pub reference_frame: usize,
    /// Registration search radius in pixels.
    #[arg(long, default_value_t = 10)]
    pub register_max_shift: u32,
    #[arg(long)]
    pub no_filter: bool,
    /// Bilateral spatial sigma in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_spatial: f64,
    #[arg(long, default_value_t = 20.0)]
    pub sigma_intensity: f64,
    /// Voxels averaged into the arterial curve.
    #[arg(long, default_value_t = 100)]
    pub n_arterial: usize,
    /// Voxels averaged into the venous curve.
    #[arg(long, default_value_t = 100)]
    pub n_venous: usize,
    /// Partial-volume correction of the arterial curve by the venous area.
    #[arg(long)]
    pub pvc: bool,
    /// Truncated-SVD deconvolution; maps are written with suffix _svd.
    #[arg(long)]
    pub svd: bool,
    #[arg(long, default_value_t = 0.2)]
    pub svd_threshold: f64,
    /// Grid search only.
    #[arg(long)]
    pub no_refine: bool,
}

impl FitArgs {
    fn options(&self) -> FitOptions {
        FitOptions {
            skip_register: self.skip_register,
            reference_frame: self.reference_frame,
            max_shift: self.register_max_shift,
            filter: !self.no_filter,
            sigma_spatial: self.sigma_spatial,
            sigma_intensity: self.sigma_intensity,
            n_aif: self.n_arterial,
            n_vof: self.n_venous,
            pvc: self.pvc,
            svd: self.svd,
            svd_threshold: self.svd_threshold,
            refine: !self.no_refine,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before the rate halves.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Case subdirectory with the pre-processed volume and target maps.
    #[arg(long, default_value = FIT_DIR)]
    pub source_sub: String,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            depth: self.depth,
            base_channels: self.base_channels,
            source_sub: self.source_sub.clone(),
            train: TrainConfig {
                lr0: self.lr,
                momentum: self.momentum,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, default_value = FIT_DIR)]
    pub reference: String,
    #[arg(long, default_value = CNN_DIR)]
    pub test: String,
    #[arg(long, default_value = "")]
    pub reference_suffix: String,
    #[arg(long, default_value = "")]
    pub test_suffix: String,
    /// Analysis mask stem inside each case.
    #[arg(long, default_value = "tissue.mask")]
    pub mask: String,
    #[arg(long, default_value_t = 1.5)]
    pub core_cbv: f64,
    #[arg(long, default_value_t = 0.3)]
    pub core_cbf_frac: f64,
    /// Penumbra TTP margin over the healthy median, in s.
    #[arg(long, default_value_t = 2.5)]
    pub ttp_margin: f64,
    #[arg(long, default_value_t = 1.0)]
    pub penumbra_cbf_frac: f64,
    #[arg(long, default_value_t = 5)]
    pub min_component: usize,
}

impl ValidateArgs {
    fn options(&self) -> ValidateOptions {
        ValidateOptions {
            reference_sub: self.reference.clone(),
            test_sub: self.test.clone(),
            reference_suffix: self.reference_suffix.clone(),
            test_suffix: self.test_suffix.clone(),
            mask: self.mask.clone(),
            thresholds: SegmentationThresholds {
                core_cbv: self.core_cbv,
                core_cbf_frac: self.core_cbf_frac,
                penumbra_ttp_margin: self.ttp_margin,
                penumbra_cbf_frac: self.penumbra_cbf_frac,
                min_component_voxels: self.min_component,
            },
        }
    }
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::MalformedSidecar { .. }
        | Error::UnknownVersion(_)
        | Error::LengthMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::Shape(_)
        | Error::Csv { .. } => 2,
        _ => 1,
    }
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let out = cli.out_dir.as_path();
    let seed = cli.seed;
    match &cli.command {
        Command::Simulate { cases, sim } => {
            let dirs = cmd_simulate(&sim.options(), *cases, 0, seed, out)?;
            eprintln!("simulated {} case(s) into {}", dirs.len(), out.display());
        }
        Command::Fit {
            cases,
            fit,
            out_sub,
        } => {
            let opts = fit.options();
            for c in cases {
                let art = cmd_fit(c, out_sub, &opts, seed)?;
                let s = art.fit.summary;
                eprintln!(
                    "{}: {} voxels, {} ok, {} zero-signal, {} at grid boundary",
                    c.display(),
                    s.voxels_total,
                    s.voxels_ok,
                    s.voxels_zero_signal,
                    s.voxels_boundary
                );
            }
        }
        Command::Train {
            train,
            val,
            train_args,
        } => {
            let r = cmd_train(
                &case_dirs(train)?,
                &case_dirs(val)?,
                &train_args.options(),
                seed,
                out,
            )?;
            eprintln!(
                "trained {} epochs: val mse {:.3e} -> {:.3e} (best epoch {})",
                r.history.records.len() - 1,
                r.history.initial_val_mse(),
                r.history.best_val_mse(),
                r.history.best_epoch
            );
        }
        Command::Infer {
            model,
            volume,
            cases,
            input_sub,
            out_sub,
        } => match (volume, cases) {
            (Some(v), None) => {
                cmd_infer(model, v, out)?;
                write_run_json(out, "infer", seed, &(model, v))?;
            }
            (None, Some(dir)) => {
                for c in case_dirs(dir)? {
                    cmd_infer(model, &c.join(input_sub), &c.join(out_sub))?;
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "infer needs --volume or --cases".into(),
                ))
            }
        },
        Command::Validate { cases, val } => {
            let r = cmd_validate(&case_dirs(cases)?, &val.options(), seed, out)?;
            print!("{}", r.summary_table());
        }
        Command::Pipeline {
            train_cases,
            val_cases,
            test_cases,
            sim,
            fit,
            train_args,
            val,
        } => {
            let opts = PipelineOptions {
                train_cases: *train_cases,
                val_cases: *val_cases,
                test_cases: *test_cases,
                simulate: sim.options(),
                fit: fit.options(),
                train: train_args.options(),
                validate: val.options(),
            };
            let r = cmd_pipeline(&opts, seed, out)?;
            let h = &r.history;
            println!(
                "training {:.0} s, {} epochs, val mse {:.3e} -> {:.3e}",
                r.train_seconds,
                h.records.len() - 1,
                h.initial_val_mse(),
                h.best_val_mse()
            );
            print!("{}", r.report.summary_table());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
