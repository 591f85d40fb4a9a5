//! Trains a small map regressor on simulated, fitted slices, saves it, and
//! predicts maps for an unseen scan from the volume alone.
//!
//! cargo run --release --example train_and_infer -- [out_dir]

use std::path::PathBuf;

use ctperf::pipeline::{cmd_fit, cmd_simulate, cmd_train, FitOptions, SimulateOptions, TrainOptions, FIT_DIR, PREPROCESSED};
use ctperf::regressor::{infer, Regressor, TrainConfig};
use ctperf::volume::{read_volume, MapKind};

fn main() -> ctperf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_out".into()));
    let sim = SimulateOptions {
        nx: 32,
        ny: 32,
        ..SimulateOptions::default()
    };
    let fit = FitOptions {
        refine: false,
        ..FitOptions::default()
    };
    let train_dirs = cmd_simulate(&sim, 6, 0, 3, &out.join("train"))?;
    let val_dirs = cmd_simulate(&sim, 2, 6, 3, &out.join("val"))?;
    let test_dirs = cmd_simulate(&sim, 1, 8, 3, &out.join("test"))?;
    for d in train_dirs.iter().chain(&val_dirs).chain(&test_dirs) {
        cmd_fit(d, FIT_DIR, &fit, 3)?;
    }
    let opts = TrainOptions {
        train: TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        },
        ..TrainOptions::default()
    };
    let trained = cmd_train(&train_dirs, &val_dirs, &opts, 3, &out.join("model"))?;
    let h = &trained.history;
    println!(
        "{} epochs, val mse {:.3e} -> {:.3e}, lr decays at {:?}",
        h.records.len() - 1,
        h.initial_val_mse(),
        h.best_val_mse(),
        h.decay_epochs
    );

    let model = Regressor::load(&out.join("model").join("model.json"))?;
    let vol = read_volume(test_dirs[0].join(FIT_DIR).join(PREPROCESSED))?;
    let maps = infer(&model, &vol)?;
    for kind in [MapKind::Cbv, MapKind::Cbf, MapKind::Ttp] {
        let v = maps.require(kind)?.values();
        let max = v.iter().copied().fold(0.0f32, f32::max);
        println!("{:<4} max {:.2} {}", kind.tag(), max, kind.units());
    }
    Ok(())
}
