//! Threshold segmentation of core and penumbra, overlap and volume metrics,
//! and cohort reports.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, MapKind, MapSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationThresholds {
    /// Core needs CBV below this (ml/100g).
    pub core_cbv: f64,
    /// Core needs CBF below this fraction of the healthy median.
    pub core_cbf_frac: f64,
    /// Penumbra needs TTP above the healthy median plus this margin (s).
    pub penumbra_ttp_margin: f64,
    /// Penumbra needs CBF below this fraction of the healthy median.
    pub penumbra_cbf_frac: f64,
    /// Connected components smaller than this are dropped.
    pub min_component_voxels: usize,
}

impl Default for SegmentationThresholds {
    fn default() -> Self {
        Self {
            core_cbv: 1.5,
            core_cbf_frac: 0.3,
            penumbra_ttp_margin: 2.5,
            penumbra_cbf_frac: 1.0,
            min_component_voxels: 5,
        }
    }
}

impl SegmentationThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.core_cbv,
            self.core_cbf_frac,
            self.penumbra_ttp_margin,
            self.penumbra_cbf_frac,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(
                "segmentation thresholds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Reference values of the non-delayed part of the analysis mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthyReference {
    pub ttp_median: f64,
    pub cbf_median: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub core: BinaryMask,
    pub penumbra: BinaryMask,
    pub reference: HealthyReference,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Healthy voxels are those of `mask` whose TTP does not exceed the mask-wide
/// median by more than the penumbra margin.
pub fn healthy_reference(
    maps: &MapSet,
    mask: &BinaryMask,
    thr: &SegmentationThresholds,
) -> Result<HealthyReference> {
    let ttp = maps.require(MapKind::Ttp)?.values();
    let cbf = maps.require(MapKind::Cbf)?.values();
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let overall = median(idx.iter().map(|&i| ttp[i] as f64).collect());
    let healthy: Vec<usize> = idx
        .into_iter()
        .filter(|&i| ttp[i] as f64 <= overall + thr.penumbra_ttp_margin)
        .collect();
    Ok(HealthyReference {
        ttp_median: median(healthy.iter().map(|&i| ttp[i] as f64).collect()),
        cbf_median: median(healthy.iter().map(|&i| cbf[i] as f64).collect()),
        voxels: healthy.len(),
    })
}

/// Core and penumbra masks inside `mask` (the analysis region, normally the
/// brain parenchyma without large vessels).
pub fn segment(
    maps: &MapSet,
    mask: &BinaryMask,
    thr: &SegmentationThresholds,
) -> Result<Segmentation> {
    thr.validate()?;
    if maps.dims() != mask.dims() {
        return Err(Error::Shape("maps and mask dims differ".into()));
    }
    let cbv = maps.require(MapKind::Cbv)?.values();
    let cbf = maps.require(MapKind::Cbf)?.values();
    let ttp = maps.require(MapKind::Ttp)?.values();
    let reference = healthy_reference(maps, mask, thr)?;
    let n = mask.values().len();
    let core_raw: Vec<bool> = (0..n)
        .map(|i| {
            mask.contains(i)
                && (cbv[i] as f64) < thr.core_cbv
                && (cbf[i] as f64) < thr.core_cbf_frac * reference.cbf_median
        })
        .collect();
    let core = remove_small_components(core_raw, mask.dims(), thr.min_component_voxels);
    let pen_raw: Vec<bool> = (0..n)
        .map(|i| {
            mask.contains(i)
                && !core[i]
                && (ttp[i] as f64) > reference.ttp_median + thr.penumbra_ttp_margin
                && (cbf[i] as f64) < thr.penumbra_cbf_frac * reference.cbf_median
        })
        .collect();
    let penumbra = remove_small_components(pen_raw, mask.dims(), thr.min_component_voxels);
    Ok(Segmentation {
        core: BinaryMask::from_bools(mask.dims(), mask.spacing(), core)?,
        penumbra: BinaryMask::from_bools(mask.dims(), mask.spacing(), penumbra)?,
        reference,
    })
}

/// Clears 6-connected components with fewer than `min_size` voxels.
pub fn remove_small_components(
    mut bits: Vec<bool>,
    dims: [usize; 3],
    min_size: usize,
) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut seen = vec![false; bits.len()];
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut component = vec![start];
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |j: usize| {
                if bits[j] && !seen[j] {
                    seen[j] = true;
                    component.push(j);
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        if component.len() < min_size {
            for i in component {
                bits[i] = false;
            }
        }
    }
    bits
}

/// `2|A∩B| / (|A|+|B|)`; `None` when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (na + nb) as f64))
}

/// Mask volume in millilitres.
pub fn volume_ml(mask: &BinaryMask) -> f64 {
    let [sx, sy, sz] = mask.spacing();
    mask.count() as f64 * sx * sy * sz / 1000.0
}

/// Sample correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 3 pairs, got {}",
            xs.len()
        )));
    }
    // running co-moments
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (k + 1) as f64;
        let (dx, dy) = (x - mx, y - my);
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Reference and test maps of one case with its analysis mask.
#[derive(Debug, Clone)]
pub struct CohortCase {
    pub id: String,
    pub reference: MapSet,
    pub test: MapSet,
    pub mask: BinaryMask,
}

pub const NORMAL_PERFUSION: &str = "normal perfusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    /// `None` when the reference has no core.
    pub dice_core: Option<f64>,
    /// `None` when the reference has no penumbra.
    pub dice_penumbra: Option<f64>,
    pub vol_core_gt_ml: f64,
    pub vol_core_test_ml: f64,
    pub vol_pen_gt_ml: f64,
    pub vol_pen_test_ml: f64,
    pub excluded: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub n: usize,
    pub dice_mean: Option<f64>,
    /// Sample standard deviation (n − 1).
    pub dice_sd: Option<f64>,
    /// Correlation of reference and test lesion volumes; `None` with fewer
    /// than 3 cases or constant volumes.
    pub volume_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub thresholds: SegmentationThresholds,
    pub cases: Vec<CaseResult>,
    pub n_cases: usize,
    pub n_excluded: usize,
    pub core: LesionSummary,
    pub penumbra: LesionSummary,
}

fn case_result(c: &CohortCase, thr: &SegmentationThresholds) -> Result<CaseResult> {
    let gt = segment(&c.reference, &c.mask, thr)?;
    let test = segment(&c.test, &c.mask, thr)?;
    let gt_core = gt.core.count() > 0;
    let gt_pen = gt.penumbra.count() > 0;
    let excluded = !gt_core && !gt_pen;
    Ok(CaseResult {
        case: c.id.clone(),
        dice_core: if gt_core {
            dice(&gt.core, &test.core)?
        } else {
            None
        },
        dice_penumbra: if gt_pen {
            dice(&gt.penumbra, &test.penumbra)?
        } else {
            None
        },
        vol_core_gt_ml: volume_ml(&gt.core),
        vol_core_test_ml: volume_ml(&test.core),
        vol_pen_gt_ml: volume_ml(&gt.penumbra),
        vol_pen_test_ml: volume_ml(&test.penumbra),
        excluded,
        reason: excluded.then(|| NORMAL_PERFUSION.to_string()),
    })
}

fn summarize(rows: &[(f64, f64, f64)]) -> LesionSummary {
    let n = rows.len();
    let dice: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mean = (n > 0).then(|| dice.iter().sum::<f64>() / n as f64);
    let sd = mean
        .filter(|_| n > 1)
        .map(|m| (dice.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1) as f64).sqrt());
    let gt: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let test: Vec<f64> = rows.iter().map(|r| r.2).collect();
    LesionSummary {
        n,
        dice_mean: mean,
        dice_sd: sd,
        volume_r: pearson(&gt, &test).ok(),
    }
}

/// Segments reference and test maps of every case with the same thresholds
/// and aggregates Dice and lesion volumes over non-excluded cases. Results
/// are ordered by case id.
pub fn evaluate_cohort(
    cases: &[CohortCase],
    thr: &SegmentationThresholds,
) -> Result<ValidationReport> {
    thr.validate()?;
    if cases.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a cohort needs at least 3 cases, got {}",
            cases.len()
        )));
    }
    let mut results: Vec<CaseResult> = cases
        .par_iter()
        .map(|c| case_result(c, thr))
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.case.cmp(&b.case));
    let kept: Vec<&CaseResult> = results.iter().filter(|r| !r.excluded).collect();
    if kept.is_empty() {
        return Err(Error::AllExcluded);
    }
    let core: Vec<(f64, f64, f64)> = kept
        .iter()
        .filter_map(|r| {
            r.dice_core
                .map(|d| (d, r.vol_core_gt_ml, r.vol_core_test_ml))
        })
        .collect();
    let pen: Vec<(f64, f64, f64)> = kept
        .iter()
        .filter_map(|r| {
            r.dice_penumbra
                .map(|d| (d, r.vol_pen_gt_ml, r.vol_pen_test_ml))
        })
        .collect();
    Ok(ValidationReport {
        thresholds: *thr,
        n_cases: results.len(),
        n_excluded: results.len() - kept.len(),
        core: summarize(&core),
        penumbra: summarize(&pen),
        cases: results,
    })
}

impl ValidationReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |d| format!("{d:.6}"));
        let mut s = String::from(
            "case,dice_core,dice_penumbra,vol_core_gt_ml,vol_core_test_ml,vol_pen_gt_ml,vol_pen_test_ml,excluded,reason\n",
        );
        for r in &self.cases {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.case,
                opt(r.dice_core),
                opt(r.dice_penumbra),
                r.vol_core_gt_ml,
                r.vol_core_test_ml,
                r.vol_pen_gt_ml,
                r.vol_pen_test_ml,
                r.excluded,
                r.reason.as_deref().unwrap_or("")
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Table-style text summary.
    pub fn summary_table(&self) -> String {
        let row = |name: &str, s: &LesionSummary| {
            let md = match (s.dice_mean, s.dice_sd) {
                (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                (Some(m), None) => format!("{m:.2}"),
                _ => "n/a".into(),
            };
            let r = s.volume_r.map_or("n/a".into(), |r| format!("{r:.2}"));
            format!("{name:<10} {:>3} {md:>12} {r:>8}\n", s.n)
        };
        let mut t = format!(
            "cases {}  excluded {}\n{:<10} {:>3} {:>12} {:>8}\n",
            self.n_cases, self.n_excluded, "lesion", "n", "dice", "r(vol)"
        );
        t.push_str(&row("core", &self.core));
        t.push_str(&row("penumbra", &self.penumbra));
        t
    }
}
