//! Verifies the hand-written backward pass of the encoder-decoder against
//! central finite differences in double precision, over every parameter.

use std::time::Instant;

use ctperf::regressor::layers::Tensor;
use ctperf::regressor::{grad_check, Sample, UNet, UNetConfig};
use rand::{Rng, SeedableRng};

fn main() -> ctperf::Result<()> {
    let cfg = UNetConfig {
        in_channels: 89,
        out_channels: 3,
        depth: 2,
        base_channels: 4,
    };
    let net = UNet::<f64>::new(cfg, 0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut random = |c: usize| Tensor::new(c, 8, 8, (0..c * 64).map(|_| rng.random_range(0.0..1.0)).collect());
    let sample = Sample {
        input: random(89)?,
        target: random(3)?,
        mask: None,
    };
    let start = Instant::now();
    let r = grad_check(&net, &sample, 1e-5)?;
    println!(
        "{} parameters, max relative error {:.2e} ({:.1} s)",
        r.n_params,
        r.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    let (i, a, n) = r.worst;
    println!("worst parameter {i}: analytic {a:.6e}, numeric {n:.6e}");
    println!("{} components above 1e-4", r.n_above_1e4);
    Ok(())
}
