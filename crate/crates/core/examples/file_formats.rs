//! Raw payload + JSON sidecar round trips for volumes, maps and masks, and
//! normalized map storage.

use ctperf::volume::{
    denormalize_map, normalize_map, read_map, read_mask, read_volume, write_map, write_mask, write_volume, BinaryMask,
    MapKind, ParametricMap, TimeSeriesVolume,
};

fn main() -> ctperf::Result<()> {
    let dir = std::env::temp_dir().join("ctperf_formats");
    let vol = TimeSeriesVolume::from_fn([8, 8, 2, 5], [3.0, 3.0, 5.0], 0.5, 0.0, |x, y, z, t| {
        35.0 + (x + y + z) as f32 + t as f32 * 0.5
    })?;
    write_volume(&vol, dir.join("volume"))?;
    assert_eq!(read_volume(dir.join("volume"))?, vol);
    println!("{}", std::fs::read_to_string(dir.join("volume.json")).unwrap());

    let cbv = ParametricMap::new(MapKind::Cbv, [8, 8, 2], [3.0, 3.0, 5.0], (0..128).map(|i| i as f32 / 16.0).collect())?;
    let norm = normalize_map(&cbv, MapKind::Cbv.default_range())?;
    write_map(&norm, dir.join("cbv_norm"))?;
    let back = denormalize_map(&read_map(dir.join("cbv_norm"))?)?;
    let err = back.values().iter().zip(cbv.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    println!("normalized round trip max error {err:.1e}");

    let mask = BinaryMask::from_bools([8, 8, 2], [3.0, 3.0, 5.0], (0..128).map(|i| i % 3 == 0))?;
    write_mask(&mask, dir.join("brain.mask"))?;
    assert_eq!(read_mask(dir.join("brain.mask"))?, mask);
    println!("files in {}", dir.display());
    Ok(())
}
