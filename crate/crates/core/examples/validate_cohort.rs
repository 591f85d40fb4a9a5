//! Threshold segmentation and a cohort report comparing fitted maps from
//! noisy scans against ground truth, with healthy cases excluded.

use ctperf::phantom::{builtin_scene, gamma_variate, generate_phantom, ground_truth_maps, AcquisitionConfig, GammaVariateParams, LesionKind, NoiseMotionConfig};
use ctperf::fit::{fit_volume, FitConfig};
use ctperf::validate::{evaluate_cohort, CohortCase, SegmentationThresholds};
use ctperf::volume::MapSet;

fn main() -> ctperf::Result<()> {
    let acq = AcquisitionConfig::default();
    let params = GammaVariateParams::default();
    let aif = gamma_variate(&params, acq.grid())?;
    let cfg = FitConfig { refine: false, ..FitConfig::default() };
    let kinds = [LesionKind::CoreAndPenumbra, LesionKind::CoreAndPenumbra, LesionKind::PenumbraOnly, LesionKind::Healthy, LesionKind::CoreAndPenumbra];
    let mut cases = Vec::new();
    for (i, &kind) in kinds.iter().enumerate() {
        let scene = builtin_scene(64, 64, 40 + i as u64, kind)?;
        let vol = generate_phantom(&scene, &acq, &params, &NoiseMotionConfig::noise_only(1.0, i as u64))?;
        let mask = scene.perfused_mask();
        let fitted = fit_volume(&vol, &aif, &cfg, &mask)?;
        cases.push(CohortCase {
            id: format!("case_{i:03}"),
            reference: MapSet::new(ground_truth_maps(&scene, &acq, &params)?)?,
            test: fitted.maps,
            mask,
        });
    }
    let report = evaluate_cohort(&cases, &SegmentationThresholds::default())?;
    print!("{}", report.summary_table());
    print!("{}", report.to_csv());
    Ok(())
}
