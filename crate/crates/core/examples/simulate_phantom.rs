//! Builds a stroke scene, synthesizes a noisy time series and writes the
//! volume, label map and ground-truth maps.
//!
//! cargo run --release --example simulate_phantom -- [out_dir]

use ctperf::phantom::{
    builtin_stroke_scene, generate_phantom, ground_truth_maps, AcquisitionConfig, GammaVariateParams, Label,
    NoiseMotionConfig,
};
use ctperf::volume::{write_map, write_mask, write_volume, MapSet};

fn main() -> ctperf::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantom_out".into());
    let scene = builtin_stroke_scene(64, 64, 7)?;
    for label in [Label::Tissue, Label::Penumbra, Label::Core, Label::Artery, Label::Vein] {
        println!("{label:?}: {} voxels", scene.count(label));
    }
    let acq = AcquisitionConfig::default();
    let aif = GammaVariateParams::default();
    let vol = generate_phantom(&scene, &acq, &aif, &NoiseMotionConfig::noise_only(2.0, 7))?;
    println!("volume dims {:?}, dt {} s, duration {} s", vol.dims(), vol.dt(), acq.duration());

    write_volume(&vol, format!("{out}/volume"))?;
    write_mask(&scene.brain_mask(), format!("{out}/brain.mask"))?;
    let gt = MapSet::new(ground_truth_maps(&scene, &acq, &aif)?)?;
    for m in gt.maps() {
        write_map(m, format!("{out}/gt/{}", m.kind().stem()))?;
    }
    println!("wrote {out}/");
    Ok(())
}
