//! Spatial pre-processing: translation-only motion correction followed by a
//! per-frame bilateral filter.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Frame, TimeSeriesVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Search radius in pixels along each axis.
    pub max_shift: u32,
    /// Parabolic sub-pixel refinement of the correlation peak (reported only).
    pub subpixel: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_shift: 10,
            subpixel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftFlag {
    Reference,
    Ok,
    /// Estimation failed; the frame was left in place.
    NoTexture,
}

impl fmt::Display for ShiftFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftFlag::Reference => "reference",
            ShiftFlag::Ok => "ok",
            ShiftFlag::NoTexture => "no_texture",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub frame: usize,
    /// Estimated displacement of the frame relative to the reference.
    pub dx: i64,
    pub dy: i64,
    pub subpixel: Option<(f64, f64)>,
    pub flag: ShiftFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftLog {
    pub reference: usize,
    pub entries: Vec<ShiftEntry>,
}

impl ShiftLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,dx,dy,flag\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.frame, e.dx, e.dy, e.flag));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Running sums for normalized cross-correlation over an overlap region.
#[derive(Default, Clone, Copy)]
struct NccAccum {
    n: f64,
    sf: f64,
    sr: f64,
    sff: f64,
    srr: f64,
    sfr: f64,
}

impl NccAccum {
    #[inline]
    fn push(&mut self, f: f64, r: f64) {
        self.n += 1.0;
        self.sf += f;
        self.sr += r;
        self.sff += f * f;
        self.srr += r * r;
        self.sfr += f * r;
    }

    fn merge(&mut self, o: &NccAccum) {
        self.n += o.n;
        self.sf += o.sf;
        self.sr += o.sr;
        self.sff += o.sff;
        self.srr += o.srr;
        self.sfr += o.sfr;
    }

    fn ncc(&self) -> Option<f64> {
        if self.n < 2.0 {
            return None;
        }
        let vf = self.sff - self.sf * self.sf / self.n;
        let vr = self.srr - self.sr * self.sr / self.n;
        let cov = self.sfr - self.sf * self.sr / self.n;
        let denom = (vf * vr).sqrt();
        let tiny = 1e-12 * (self.sff.abs() + self.srr.abs()).max(1e-300);
        if !(vf > tiny && vr > tiny && denom > 0.0) {
            return None;
        }
        Some(cov / denom)
    }
}

fn is_constant(frame: &Frame) -> bool {
    let first = frame.data[0];
    frame.data.iter().all(|&v| v == first)
}

/// Correlation accumulator for candidate displacement `(dx, dy)`:
/// pairs `frame(p)` with `reference(p - d)` wherever both exist.
fn accumulate(frame: &Frame, reference: &Frame, dx: i64, dy: i64) -> NccAccum {
    let (nx, ny) = (frame.nx as i64, frame.ny as i64);
    let mut acc = NccAccum::default();
    let y_lo = dy.max(0);
    let y_hi = (ny + dy).min(ny);
    let x_lo = dx.max(0);
    let x_hi = (nx + dx).min(nx);
    for y in y_lo..y_hi {
        let frow = (y * nx) as usize;
        let rrow = ((y - dy) * nx) as usize;
        for x in x_lo..x_hi {
            acc.push(
                frame.data[frow + x as usize],
                reference.data[rrow + (x - dx) as usize],
            );
        }
    }
    acc
}

fn better(a: (f64, i64, i64), b: (f64, i64, i64)) -> bool {
    // higher score, then smaller norm, then lexicographic
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    let na = a.1 * a.1 + a.2 * a.2;
    let nb = b.1 * b.1 + b.2 * b.2;
    if na != nb {
        return na < nb;
    }
    (a.1, a.2) < (b.1, b.2)
}

struct ShiftEstimate {
    dx: i64,
    dy: i64,
    subpixel: Option<(f64, f64)>,
}

fn estimate_stack(
    frames: &[Frame],
    refs: &[Frame],
    cfg: &RegistrationConfig,
) -> Result<ShiftEstimate> {
    let (nx, ny) = (refs[0].nx, refs[0].ny);
    for (f, r) in frames.iter().zip(refs) {
        if f.nx != r.nx || f.ny != r.ny {
            return Err(Error::Shape("frame and reference differ in size".into()));
        }
    }
    if nx < 8 || ny < 8 {
        return Err(Error::InvalidArgument(format!(
            "registration needs frames of at least 8x8, got {nx}x{ny}"
        )));
    }
    if frames.iter().all(is_constant) || refs.iter().all(is_constant) {
        return Err(Error::NoTexture);
    }
    let m = (cfg.max_shift as i64).min(nx as i64 / 2).min(ny as i64 / 2);
    let side = (2 * m + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -m..=m {
        for dx in -m..=m {
            let mut acc = NccAccum::default();
            for (f, r) in frames.iter().zip(refs) {
                acc.merge(&accumulate(f, r, dx, dy));
            }
            if let Some(s) = acc.ncc() {
                scores[(dx + m) as usize + side * (dy + m) as usize] = s;
                let cand = (s, dx, dy);
                if best.map_or(true, |b| better(cand, b)) {
                    best = Some(cand);
                }
            }
        }
    }
    let (_, dx, dy) = best.ok_or(Error::NoTexture)?;
    let subpixel = cfg.subpixel.then(|| {
        let at = |x: i64, y: i64| -> Option<f64> {
            if x.abs() > m || y.abs() > m {
                return None;
            }
            let s = scores[(x + m) as usize + side * (y + m) as usize];
            s.is_finite().then_some(s)
        };
        let vertex = |lo: Option<f64>, c: f64, hi: Option<f64>| -> f64 {
            match (lo, hi) {
                (Some(l), Some(h)) => {
                    let d = l - 2.0 * c + h;
                    if d < 0.0 {
                        (0.5 * (l - h) / d).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            }
        };
        let c = at(dx, dy).unwrap_or(0.0);
        (
            dx as f64 + vertex(at(dx - 1, dy), c, at(dx + 1, dy)),
            dy as f64 + vertex(at(dx, dy - 1), c, at(dx, dy + 1)),
        )
    });
    Ok(ShiftEstimate { dx, dy, subpixel })
}

/// Integer displacement `d` of `frame` relative to `reference`, i.e.
/// `frame(p) ≈ reference(p - d)`, maximizing normalized cross-correlation
/// over `|dx|, |dy| <= max_shift`.
pub fn estimate_shift(
    frame: &Frame,
    reference: &Frame,
    cfg: &RegistrationConfig,
) -> Result<(i64, i64)> {
    let est = estimate_stack(
        std::slice::from_ref(frame),
        std::slice::from_ref(reference),
        cfg,
    )?;
    Ok((est.dx, est.dy))
}

/// Like [`estimate_shift`] but also returns the parabolic sub-pixel peak.
pub fn estimate_shift_subpixel(
    frame: &Frame,
    reference: &Frame,
    cfg: &RegistrationConfig,
) -> Result<(f64, f64)> {
    let cfg = RegistrationConfig {
        subpixel: true,
        ..*cfg
    };
    let est = estimate_stack(
        std::slice::from_ref(frame),
        std::slice::from_ref(reference),
        &cfg,
    )?;
    Ok(est.subpixel.unwrap_or((est.dx as f64, est.dy as f64)))
}

/// Aligns every frame to frame `reference_index` by translating it by the
/// negated estimated displacement (zero-fill). All slices of a time point
/// share one shift. Frames whose shift cannot be estimated are left in place
/// and flagged.
pub fn register_timeseries(
    vol: &TimeSeriesVolume,
    reference_index: usize,
    cfg: &RegistrationConfig,
) -> Result<(TimeSeriesVolume, ShiftLog)> {
    let [_, _, nz, nt] = vol.dims();
    if reference_index >= nt {
        return Err(Error::InvalidArgument(format!(
            "reference frame {reference_index} out of range for {nt} frames"
        )));
    }
    let refs: Vec<Frame> = (0..nz).map(|z| vol.frame(z, reference_index)).collect();
    let entries: Vec<ShiftEntry> = (0..nt)
        .into_par_iter()
        .map(|t| {
            if t == reference_index {
                return ShiftEntry {
                    frame: t,
                    dx: 0,
                    dy: 0,
                    subpixel: cfg.subpixel.then_some((0.0, 0.0)),
                    flag: ShiftFlag::Reference,
                };
            }
            let frames: Vec<Frame> = (0..nz).map(|z| vol.frame(z, t)).collect();
            match estimate_stack(&frames, &refs, cfg) {
                Ok(e) => ShiftEntry {
                    frame: t,
                    dx: e.dx,
                    dy: e.dy,
                    subpixel: e.subpixel,
                    flag: ShiftFlag::Ok,
                },
                Err(_) => ShiftEntry {
                    frame: t,
                    dx: 0,
                    dy: 0,
                    subpixel: None,
                    flag: ShiftFlag::NoTexture,
                },
            }
        })
        .collect();
    let out = vol.map_frames(|_, t, frame| {
        let e = &entries[t];
        if e.dx == 0 && e.dy == 0 {
            frame
        } else {
            frame.translate(-e.dx, -e.dy)
        }
    })?;
    Ok((
        out,
        ShiftLog {
            reference: reference_index,
            entries,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralConfig {
    /// Spatial Gaussian width in pixels.
    pub sigma_spatial: f64,
    /// Range Gaussian width in HU.
    pub sigma_intensity: f64,
    /// Window radius in pixels; `None` means `ceil(2 * sigma_spatial)`.
    pub radius: Option<usize>,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            sigma_spatial: 2.0,
            sigma_intensity: 20.0,
            radius: None,
        }
    }
}

impl BilateralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_spatial > 0.0 && self.sigma_intensity > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bilateral sigmas must be positive, got {} / {}",
                self.sigma_spatial, self.sigma_intensity
            )))
        }
    }

    pub fn window_radius(&self) -> usize {
        self.radius
            .unwrap_or_else(|| (2.0 * self.sigma_spatial).ceil() as usize)
    }
}

/// Edge-preserving smoothing of one frame; samples outside the frame are
/// taken from the nearest border pixel.
pub fn bilateral_filter(frame: &Frame, cfg: &BilateralConfig) -> Result<Frame> {
    cfg.validate()?;
    let r = cfg.window_radius() as i64;
    let (nx, ny) = (frame.nx as i64, frame.ny as i64);
    let side = (2 * r + 1) as usize;
    let inv_s = -0.5 / (cfg.sigma_spatial * cfg.sigma_spatial);
    let inv_r = -0.5 / (cfg.sigma_intensity * cfg.sigma_intensity);
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| ((dx * dx + dy * dy) as f64 * inv_s).exp()))
        .collect();
    let mut out = Vec::with_capacity(frame.data.len());
    for y in 0..ny {
        for x in 0..nx {
            let center = frame.data[(x + nx * y) as usize];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -r..=r {
                let qy = (y + dy).clamp(0, ny - 1);
                let row = (qy * nx) as usize;
                let krow = (dy + r) as usize * side;
                for dx in -r..=r {
                    let qx = (x + dx).clamp(0, nx - 1);
                    let v = frame.data[row + qx as usize];
                    let d = v - center;
                    let w = spatial[krow + (dx + r) as usize] * (d * d * inv_r).exp();
                    num += w * v;
                    den += w;
                }
            }
            out.push(num / den);
        }
    }
    Frame::new(frame.nx, frame.ny, out)
}

/// Applies [`bilateral_filter`] to every frame of a volume.
pub fn filter_volume(vol: &TimeSeriesVolume, cfg: &BilateralConfig) -> Result<TimeSeriesVolume> {
    cfg.validate()?;
    let [_, _, nz, nt] = vol.dims();
    let frames: Vec<Frame> = (0..nt * nz)
        .into_par_iter()
        .map(|i| bilateral_filter(&vol.frame(i % nz, i / nz), cfg))
        .collect::<Result<_>>()?;
    let mut it = frames.into_iter();
    vol.map_frames(|_, _, _| it.next().expect("one filtered frame per input frame"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{
        builtin_stroke_scene, generate_phantom, AcquisitionConfig, GammaVariateParams,
        NoiseMotionConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(nx: usize, ny: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..12)
            .map(|_| {
                (
                    rng.random_range(0.0..nx as f64),
                    rng.random_range(0.0..ny as f64),
                    rng.random_range(1.5..5.0),
                    rng.random_range(-50.0..50.0),
                )
            })
            .collect();
        let data = (0..ny)
            .flat_map(|y| (0..nx).map(move |x| (x, y)))
            .map(|(x, y)| {
                35.0 + blobs
                    .iter()
                    .map(|(cx, cy, s, a)| {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum::<f64>()
            })
            .collect();
        Frame::new(nx, ny, data).unwrap()
    }

    #[test]
    fn identical_frames_have_zero_shift() {
        let f = textured(32, 32, 1);
        assert_eq!(
            estimate_shift(&f, &f, &RegistrationConfig::default()).unwrap(),
            (0, 0)
        );
    }

    #[test]
    fn shifted_reference_is_recovered() {
        let base = textured(48, 40, 2);
        let reference = base.translate(3, -2);
        assert_eq!(
            estimate_shift(&base, &reference, &RegistrationConfig::default()).unwrap(),
            (-3, 2)
        );
    }

    #[test]
    fn constant_frame_has_no_texture() {
        let f = Frame::filled(16, 16, 35.0);
        let r = textured(16, 16, 3);
        assert!(matches!(
            estimate_shift(&f, &r, &RegistrationConfig::default()),
            Err(Error::NoTexture)
        ));
    }

    #[test]
    fn small_frames_are_rejected() {
        let f = textured(7, 16, 3);
        assert!(estimate_shift(&f, &f, &RegistrationConfig::default()).is_err());
    }

    #[test]
    fn subpixel_peak_stays_near_integer_on_integer_shift() {
        let base = textured(40, 40, 4);
        let moved = base.translate(2, 1);
        let (fx, fy) =
            estimate_shift_subpixel(&moved, &base, &RegistrationConfig::default()).unwrap();
        assert!((fx - 2.0).abs() <= 0.5 && (fy - 1.0).abs() <= 0.5);
    }

    fn textured_phantom(schedule: Vec<(i64, i64)>, max_shift: u32) -> TimeSeriesVolume {
        let scene = builtin_stroke_scene(48, 48, 21).unwrap();
        let acq = AcquisitionConfig {
            texture_hu: 20.0,
            skull_hu: 1000.0,
            ..AcquisitionConfig::default()
        };
        let nm = NoiseMotionConfig {
            noise_sigma_hu: 0.0,
            max_shift_px: max_shift,
            shift_schedule: schedule,
            rng_seed: 5,
        };
        generate_phantom(&scene, &acq, &GammaVariateParams::default(), &nm).unwrap()
    }

    #[test]
    fn registration_removes_injected_motion() {
        let nt = AcquisitionConfig::default().nt;
        let schedule = NoiseMotionConfig::random_schedule(nt, 4, 0.3, 17);
        let vol = textured_phantom(schedule.clone(), 4);
        let (reg, log) = register_timeseries(&vol, 0, &RegistrationConfig::default()).unwrap();
        assert_eq!(log.entries.len(), nt);
        for (e, s) in log.entries.iter().zip(&schedule) {
            assert_eq!((e.dx, e.dy), *s, "frame {}", e.frame);
        }
        let (_, again) = register_timeseries(&reg, 0, &RegistrationConfig::default()).unwrap();
        assert!(again.entries.iter().all(|e| e.dx == 0 && e.dy == 0));
    }

    #[test]
    fn registering_a_still_volume_is_identity() {
        let vol = textured_phantom(Vec::new(), 0);
        let (reg, log) = register_timeseries(&vol, 0, &RegistrationConfig::default()).unwrap();
        assert!(reg.values() == vol.values());
        assert_eq!(log.entries[0].flag, ShiftFlag::Reference);
        assert!(log
            .to_csv()
            .starts_with("frame,dx,dy,flag\n0,0,0,reference\n"));
    }

    #[test]
    fn untextured_frames_are_flagged_not_fatal() {
        let vol = TimeSeriesVolume::new([8, 8, 1, 3], [1.0; 3], 1.0, 0.0, vec![35.0; 192]).unwrap();
        let (reg, log) = register_timeseries(&vol, 0, &RegistrationConfig::default()).unwrap();
        assert_eq!(reg, vol);
        assert_eq!(log.entries[1].flag, ShiftFlag::NoTexture);
    }

    #[test]
    fn constant_image_is_unchanged_by_filter() {
        let f = Frame::filled(12, 9, 42.5);
        let out = bilateral_filter(&f, &BilateralConfig::default()).unwrap();
        for v in out.data {
            assert!((v - 42.5).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_survives_filter() {
        let mut f = Frame::filled(15, 15, 35.0);
        f.data[7 + 15 * 7] = 335.0;
        let out = bilateral_filter(&f, &BilateralConfig::default()).unwrap();
        assert!((out.at(7, 7) - 335.0).abs() < 1e-6);
        for (x, y) in [(6, 7), (8, 7), (7, 6), (7, 8), (6, 6)] {
            assert!(((out.at(x, y) - 35.0) / 35.0).abs() < 0.01);
        }
    }

    fn naive_bilateral(f: &Frame, cfg: &BilateralConfig) -> Frame {
        let r = cfg.window_radius() as i64;
        let mut out = Frame::filled(f.nx, f.ny, 0.0);
        for y in 0..f.ny as i64 {
            for x in 0..f.nx as i64 {
                let c = f.at(x as usize, y as usize);
                let (mut num, mut den) = (0.0, 0.0);
                for qy in y - r..=y + r {
                    for qx in x - r..=x + r {
                        let v = f.at(
                            qx.clamp(0, f.nx as i64 - 1) as usize,
                            qy.clamp(0, f.ny as i64 - 1) as usize,
                        );
                        let ds = ((qx - x).pow(2) + (qy - y).pow(2)) as f64;
                        let w = (-ds / (2.0 * cfg.sigma_spatial.powi(2))).exp()
                            * (-(v - c).powi(2) / (2.0 * cfg.sigma_intensity.powi(2))).exp();
                        num += w * v;
                        den += w;
                    }
                }
                out.data[(x + f.nx as i64 * y) as usize] = num / den;
            }
        }
        out
    }

    #[test]
    fn filter_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Frame::new(
            16,
            16,
            (0..256).map(|_| rng.random_range(0.0..100.0)).collect(),
        )
        .unwrap();
        let cfg = BilateralConfig::default();
        let a = bilateral_filter(&f, &cfg).unwrap();
        let b = naive_bilateral(&f, &cfg);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn filter_stays_within_window_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Frame::new(
            20,
            20,
            (0..400).map(|_| rng.random_range(-50.0..150.0)).collect(),
        )
        .unwrap();
        let cfg = BilateralConfig::default();
        let r = cfg.window_radius() as i64;
        let out = bilateral_filter(&f, &cfg).unwrap();
        for y in 0..20i64 {
            for x in 0..20i64 {
                let mut lo = f64::MAX;
                let mut hi = f64::MIN;
                for qy in (y - r).max(0)..=(y + r).min(19) {
                    for qx in (x - r).max(0)..=(x + r).min(19) {
                        lo = lo.min(f.at(qx as usize, qy as usize));
                        hi = hi.max(f.at(qx as usize, qy as usize));
                    }
                }
                let v = out.at(x as usize, y as usize);
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn filter_rejects_bad_sigmas() {
        let f = Frame::filled(8, 8, 1.0);
        let cfg = BilateralConfig {
            sigma_spatial: 0.0,
            ..Default::default()
        };
        assert!(bilateral_filter(&f, &cfg).is_err());
    }
}
