//! Voxel-wise perfusion estimation: box-IRF regression and a truncated-SVD
//! deconvolution baseline.

mod nlr;
mod svd;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use nlr::{fit_volume, fit_voxel, log_grid, model_tac, FitConfig, Fitter};
pub use svd::{svd_deconvolve, svd_volume, SvdDeconvolver, DEFAULT_SVD_THRESHOLD};

use crate::error::{Error, Result};
use crate::vascular::BASELINE_SAMPLES;
use crate::volume::{MapKind, MapSet, ParametricMap, Spacing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitStatus {
    Ok,
    ZeroSignal,
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelFit {
    /// ml/100g
    pub cbv: f64,
    /// ml/100g/min
    pub cbf: f64,
    pub mtt: f64,
    pub delay: f64,
    pub ttp: f64,
    /// Squared-HU residual.
    pub rss: f64,
    pub status: FitStatus,
}

impl VoxelFit {
    pub(crate) fn zero(rss: f64, status: FitStatus) -> Self {
        Self {
            cbv: 0.0,
            cbf: 0.0,
            mtt: 0.0,
            delay: 0.0,
            ttp: 0.0,
            rss,
            status,
        }
    }
}

/// Per-run counters written next to the maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub voxels_total: usize,
    pub voxels_ok: usize,
    pub voxels_zero_signal: usize,
    pub voxels_boundary: usize,
    pub throughput_voxels_per_s: f64,
}

impl FitSummary {
    pub(crate) fn from_fits(fits: &[VoxelFit], seconds: f64) -> Self {
        let count = |s: FitStatus| fits.iter().filter(|f| f.status == s).count();
        Self {
            voxels_total: fits.len(),
            voxels_ok: count(FitStatus::Ok),
            voxels_zero_signal: count(FitStatus::ZeroSignal),
            voxels_boundary: count(FitStatus::Boundary),
            throughput_voxels_per_s: if seconds > 0.0 {
                fits.len() as f64 / seconds
            } else {
                0.0
            },
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("summary serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct VolumeFit {
    /// CBV, CBF, MTT, TTP and DELAY maps; zero outside the mask.
    pub maps: MapSet,
    pub summary: FitSummary,
    /// Fits of the masked voxels in ascending voxel order.
    pub fits: Vec<(usize, VoxelFit)>,
}

pub(crate) fn assemble_maps(
    dims: [usize; 3],
    spacing: Spacing,
    fits: &[(usize, VoxelFit)],
) -> Result<MapSet> {
    let n: usize = dims.iter().product();
    let field = |f: fn(&VoxelFit) -> f64| {
        let mut v = vec![0.0f32; n];
        for (i, fit) in fits {
            v[*i] = f(fit).max(0.0) as f32;
        }
        v
    };
    let maps = vec![
        ParametricMap::new(MapKind::Cbv, dims, spacing, field(|f| f.cbv))?,
        ParametricMap::new(MapKind::Cbf, dims, spacing, field(|f| f.cbf))?,
        ParametricMap::new(MapKind::Mtt, dims, spacing, field(|f| f.mtt))?,
        ParametricMap::new(MapKind::Ttp, dims, spacing, field(|f| f.ttp))?,
        ParametricMap::new(MapKind::Delay, dims, spacing, field(|f| f.delay))?,
    ];
    MapSet::new(maps)
}

/// Subtracts the mean of the first four samples.
pub fn baseline_subtract(series: &[f64]) -> Vec<f64> {
    let k = BASELINE_SAMPLES.min(series.len());
    let base = series[..k].iter().sum::<f64>() / k as f64;
    series.iter().map(|s| s - base).collect()
}

/// Median absolute successive difference, a robust noise scale.
pub fn noise_estimate(c: &[f64]) -> f64 {
    let mut d: Vec<f64> = c.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}
