//! Automatic arterial and venous curve selection and partial-volume
//! correction.

use ctperf::phantom::{
    builtin_stroke_scene, gamma_variate, generate_phantom, AcquisitionConfig, GammaVariateParams, Label,
    NoiseMotionConfig,
};
use ctperf::vascular::{curve_features, pvc_scale_aif, select_aif, select_vof};

fn main() -> ctperf::Result<()> {
    let scene = builtin_stroke_scene(64, 64, 5)?;
    let acq = AcquisitionConfig::default();
    let params = GammaVariateParams::default();
    let vol = generate_phantom(&scene, &acq, &params, &NoiseMotionConfig::noise_only(2.0, 5))?;
    let brain = scene.brain_mask();

    let aif = select_aif(&vol, &brain, 100)?;
    let vof = select_vof(&vol, &brain, 100)?;
    let on = |voxels: &[ctperf::vascular::ScoredVoxel], l: Label| voxels.iter().filter(|v| scene.labels[v.index] == l).count();
    println!("arterial pick: {}/100 artery voxels", on(&aif.voxels, Label::Artery));
    println!("venous pick:   {}/100 vein voxels", on(&vof.voxels, Label::Vein));

    let truth = gamma_variate(&params, acq.grid())?;
    for (name, c) in [("true input", &truth), ("arterial", &aif.curve), ("venous", &vof.curve)] {
        let f = curve_features(c)?;
        println!("{name:>10}: peak {:6.1} HU at {:4.1} s, fwhm {:?}, area {:7.1}", f.peak, f.ttp, f.fwhm, f.auc);
    }
    let corrected = pvc_scale_aif(&aif.curve, &vof.curve)?;
    println!("corrected arterial area {:.1}", curve_features(&corrected)?.auc);
    Ok(())
}
