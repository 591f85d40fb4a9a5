//! Box-IRF regression on a noiseless phantom with the true input function,
//! compared against ground truth and against the truncated-SVD baseline.

use ctperf::fit::{fit_volume, svd_volume, FitConfig, DEFAULT_SVD_THRESHOLD};
use ctperf::phantom::{
    builtin_stroke_scene, gamma_variate, generate_phantom, ground_truth_maps, AcquisitionConfig, GammaVariateParams,
    NoiseMotionConfig, UnitConversion,
};
use ctperf::volume::{MapKind, MapSet};

fn main() -> ctperf::Result<()> {
    let scene = builtin_stroke_scene(64, 64, 1)?;
    let acq = AcquisitionConfig::default();
    let params = GammaVariateParams::default();
    let vol = generate_phantom(&scene, &acq, &params, &NoiseMotionConfig::default())?;
    let aif = gamma_variate(&params, acq.grid())?;
    let mask = scene.perfused_mask();

    let nlr = fit_volume(&vol, &aif, &FitConfig::default(), &mask)?;
    println!(
        "regression: {} voxels, {} ok, {:.0} voxels/s",
        nlr.summary.voxels_total, nlr.summary.voxels_ok, nlr.summary.throughput_voxels_per_s
    );
    let gt = MapSet::new(ground_truth_maps(&scene, &acq, &params)?)?;
    for kind in [MapKind::Cbv, MapKind::Cbf, MapKind::Mtt, MapKind::Delay, MapKind::Ttp] {
        let (f, g) = (nlr.maps.require(kind)?.values(), gt.require(kind)?.values());
        let worst = mask
            .indices()
            .iter()
            .map(|&i| ((f[i] - g[i]).abs() / g[i].abs().max(1e-3)) as f64)
            .fold(0.0, f64::max);
        println!("  {:<5} worst relative error {:.2e}", kind.tag(), worst);
    }

    let svd = svd_volume(&vol, &aif, DEFAULT_SVD_THRESHOLD, UnitConversion::default(), &mask)?;
    let mut rel: Vec<f64> = mask
        .indices()
        .iter()
        .map(|&i| {
            let (a, b) = (svd.maps.require(MapKind::Cbf).unwrap().values()[i], nlr.maps.require(MapKind::Cbf).unwrap().values()[i]);
            ((a - b) / b).abs() as f64
        })
        .collect();
    rel.sort_by(f64::total_cmp);
    println!("SVD vs regression CBF: median relative difference {:.1}%", 100.0 * rel[rel.len() / 2]);
    Ok(())
}
