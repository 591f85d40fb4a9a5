//! The full seeded experiment at reduced size: simulate, fit, train, infer
//! and validate. `ctperf pipeline` runs the same code with desk defaults.
//!
//! cargo run --release --example desk_pipeline -- [out_dir]

use std::path::PathBuf;

use ctperf::pipeline::{cmd_pipeline, PipelineOptions, TrainOptions};
use ctperf::regressor::TrainConfig;

fn main() -> ctperf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk_out".into()));
    let opts = PipelineOptions {
        train_cases: 12,
        val_cases: 3,
        test_cases: 4,
        train: TrainOptions {
            train: TrainConfig {
                max_epochs: 40,
                ..TrainConfig::default()
            },
            ..TrainOptions::default()
        },
        ..PipelineOptions::default()
    };
    let r = cmd_pipeline(&opts, 1, &out)?;
    println!("training took {:.0} s", r.train_seconds);
    print!("{}", r.report.summary_table());
    println!("artifacts in {}", out.display());
    Ok(())
}
