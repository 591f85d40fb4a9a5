//! Automatic arterial input and venous output function extraction.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Curve, TimeSeriesVolume};

/// Number of leading samples averaged into the pre-bolus baseline.
pub const BASELINE_SAMPLES: usize = 4;

static AIF_EXTRACTIONS: AtomicUsize = AtomicUsize::new(0);

/// How many times [`select_aif`] has run in this process.
pub fn aif_extraction_count() -> usize {
    AIF_EXTRACTIONS.load(AtomicOrdering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFeatures {
    pub baseline: f64,
    /// Maximum enhancement over baseline; 0 when the curve never rises.
    pub peak: f64,
    /// Time of the earliest maximum.
    pub ttp: f64,
    /// Full width at half maximum; `None` when `peak <= 0`.
    pub fwhm: Option<f64>,
    /// Trapezoidal area of the enhancement clamped at zero.
    pub auc: f64,
}

/// Features of a curve with the baseline taken from its first four samples.
pub fn curve_features(tac: &Curve) -> Result<CurveFeatures> {
    if tac.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "curve features need at least 8 samples, got {}",
            tac.len()
        )));
    }
    let baseline = tac.samples[..BASELINE_SAMPLES].iter().sum::<f64>() / BASELINE_SAMPLES as f64;
    Ok(features_with_baseline(
        &tac.samples,
        tac.dt,
        tac.t0,
        baseline,
    ))
}

/// Features of `samples` relative to an explicit baseline.
pub fn features_with_baseline(samples: &[f64], dt: f64, t0: f64, baseline: f64) -> CurveFeatures {
    let mut imax = 0;
    let mut emax = f64::NEG_INFINITY;
    for (i, &s) in samples.iter().enumerate() {
        let e = s - baseline;
        if e > emax {
            emax = e;
            imax = i;
        }
    }
    let auc = trapezoid_positive(samples.iter().map(|s| s - baseline), dt);
    if !(emax > 0.0) {
        return CurveFeatures {
            baseline,
            peak: 0.0,
            ttp: t0 + imax as f64 * dt,
            fwhm: None,
            auc,
        };
    }
    let half = 0.5 * emax;
    let e = |i: usize| samples[i] - baseline;
    // left crossing
    let mut left = 0.0;
    let mut i = imax;
    while i > 0 {
        if e(i - 1) < half {
            let (a, b) = (e(i - 1), e(i));
            left = (i - 1) as f64 + (half - a) / (b - a);
            break;
        }
        i -= 1;
    }
    // right crossing
    let n = samples.len();
    let mut right = (n - 1) as f64;
    let mut j = imax;
    while j + 1 < n {
        if e(j + 1) < half {
            let (a, b) = (e(j), e(j + 1));
            right = j as f64 + (a - half) / (a - b);
            break;
        }
        j += 1;
    }
    CurveFeatures {
        baseline,
        peak: emax,
        ttp: t0 + imax as f64 * dt,
        fwhm: Some(((right - left) * dt).max(f64::MIN_POSITIVE)),
        auc,
    }
}

fn trapezoid_positive(values: impl Iterator<Item = f64>, dt: f64) -> f64 {
    let mut prev: Option<f64> = None;
    let mut acc = 0.0;
    for v in values {
        let v = v.max(0.0);
        if let Some(p) = prev {
            acc += 0.5 * (p + v);
        }
        prev = Some(v);
    }
    acc * dt
}

/// Area of a curve's positive part, without baseline subtraction.
pub fn positive_area(curve: &Curve) -> f64 {
    trapezoid_positive(curve.samples.iter().copied(), curve.dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredVoxel {
    pub index: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VascularSelection {
    /// Mean baseline-subtracted curve of the chosen voxels.
    pub curve: Curve,
    /// Chosen voxels, best first.
    pub voxels: Vec<ScoredVoxel>,
}

impl VascularSelection {
    pub fn voxels_csv(&self) -> String {
        let mut out = String::from("x,y,z,score\n");
        for v in &self.voxels {
            out.push_str(&format!("{},{},{},{}\n", v.x, v.y, v.z, v.score));
        }
        out
    }

    pub fn write_voxels_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.voxels_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Candidate {
    index: usize,
    score: f64,
    ttp: f64,
}

fn candidates(
    vol: &TimeSeriesVolume,
    mask: &BinaryMask,
    score: impl Fn(&CurveFeatures) -> Option<f64> + Sync,
) -> Result<Vec<Candidate>> {
    let [nx, ny, nz, _] = vol.dims();
    if mask.dims() != [nx, ny, nz] {
        return Err(Error::Shape(format!(
            "mask dims {:?} do not match volume {:?}",
            mask.dims(),
            [nx, ny, nz]
        )));
    }
    let idx = mask.indices();
    let scored: Vec<Option<Candidate>> = idx
        .par_iter()
        .map(|&v| -> Result<Option<Candidate>> {
            let f = curve_features(&vol.series_curve(v))?;
            Ok(score(&f).filter(|s| s.is_finite()).map(|s| Candidate {
                index: v,
                score: s,
                ttp: f.ttp,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().flatten().collect())
}

fn take_top(
    vol: &TimeSeriesVolume,
    mut cands: Vec<Candidate>,
    n: usize,
    tie: impl Fn(&Candidate, &Candidate) -> Ordering,
) -> Result<VascularSelection> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "selection size must be at least 1".into(),
        ));
    }
    if cands.len() < n {
        return Err(Error::InsufficientCandidates {
            needed: n,
            found: cands.len(),
        });
    }
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| tie(a, b))
            .then_with(|| a.index.cmp(&b.index))
    });
    cands.truncate(n);
    let nt = vol.nt();
    let mut mean = vec![0.0; nt];
    for c in &cands {
        let s = vol.series(c.index);
        let base = s[..BASELINE_SAMPLES].iter().sum::<f64>() / BASELINE_SAMPLES as f64;
        for (m, v) in mean.iter_mut().zip(&s) {
            *m += v - base;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let [nx, ny, _, _] = vol.dims();
    let voxels = cands
        .iter()
        .map(|c| ScoredVoxel {
            index: c.index,
            x: c.index % nx,
            y: (c.index / nx) % ny,
            z: c.index / (nx * ny),
            score: c.score,
        })
        .collect();
    Ok(VascularSelection {
        curve: Curve::new(vol.dt(), vol.t0(), mean)?,
        voxels,
    })
}

/// Arterial input function: mean enhancement of the `n` voxels with the
/// highest `peak / (fwhm * (ttp + dt))`, ttp measured from scan start.
pub fn select_aif(
    vol: &TimeSeriesVolume,
    mask: &BinaryMask,
    n: usize,
) -> Result<VascularSelection> {
    AIF_EXTRACTIONS.fetch_add(1, AtomicOrdering::SeqCst);
    let (dt, t0) = (vol.dt(), vol.t0());
    let cands = candidates(vol, mask, |f| {
        f.fwhm.map(|w| f.peak / (w * (f.ttp - t0 + dt)))
    })?;
    take_top(vol, cands, n, |a, b| a.ttp.total_cmp(&b.ttp))
}

/// Significant digits at which enhancement areas are compared, so that
/// equal-area arterial and venous curves tie and the later one wins.
const AUC_DIGITS: i32 = 3;

fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

/// Venous output function: mean enhancement of the `n` voxels with the
/// largest enhancement area (ties go to the later peak).
pub fn select_vof(
    vol: &TimeSeriesVolume,
    mask: &BinaryMask,
    n: usize,
) -> Result<VascularSelection> {
    let cands = candidates(vol, mask, |f| {
        (f.peak > 0.0).then(|| round_significant(f.auc, AUC_DIGITS))
    })?;
    take_top(vol, cands, n, |a, b| b.ttp.total_cmp(&a.ttp))
}

/// Partial-volume correction: rescales the AIF so its area equals the VOF's.
pub fn pvc_scale_aif(aif: &Curve, vof: &Curve) -> Result<Curve> {
    aif.check_same_grid(vof)?;
    let a = positive_area(aif);
    if !(a > 0.0) {
        return Err(Error::ZeroArea);
    }
    let v = positive_area(vof);
    if !(v > 0.0) {
        return Err(Error::ZeroArea);
    }
    Ok(aif.scaled(v / a))
}
