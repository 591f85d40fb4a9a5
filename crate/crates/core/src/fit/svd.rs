use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{assemble_maps, baseline_subtract, FitStatus, FitSummary, VolumeFit, VoxelFit};
use crate::error::{Error, Result};
use crate::phantom::{argmax_first, UnitConversion};
use crate::volume::{BinaryMask, Curve, TimeSeriesVolume};

pub const DEFAULT_SVD_THRESHOLD: f64 = 0.2;

/// Truncated pseudo-inverse of the block-circulant arterial matrix,
/// computed once per arterial curve.
pub struct SvdDeconvolver {
    aif: Curve,
    units: UnitConversion,
    /// Rows: padded IRF samples (2 nt); columns: the nt measured samples.
    pinv: DMatrix<f64>,
}

impl SvdDeconvolver {
    /// Singular values at or below `threshold_frac * sigma_max` are dropped.
    pub fn new(aif: &Curve, threshold_frac: f64, units: UnitConversion) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold_frac) {
            return Err(Error::InvalidArgument(format!(
                "threshold fraction must lie in [0, 1], got {threshold_frac}"
            )));
        }
        let nt = aif.len();
        let n = 2 * nt;
        let padded = |i: usize| if i < nt { aif.samples[i] } else { 0.0 };
        let a = DMatrix::from_fn(n, n, |i, j| aif.dt * padded((i + n - j) % n));
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) {
            return Err(Error::SingularSystem);
        }
        let cut = threshold_frac * smax;
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let mut pinv = DMatrix::zeros(n, nt);
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s <= cut || s == 0.0 {
                continue;
            }
            let inv = 1.0 / s;
            for c in 0..nt {
                let w = u[(c, k)] * inv;
                if w == 0.0 {
                    continue;
                }
                for r in 0..n {
                    pinv[(r, c)] += vt[(k, r)] * w;
                }
            }
        }
        Ok(Self {
            aif: aif.clone(),
            units,
            pinv,
        })
    }

    /// IRF estimate over the padded window (2 nt samples) for a
    /// baseline-subtracted curve.
    pub fn irf(&self, tac: &Curve) -> Result<Curve> {
        if !tac.same_grid(&self.aif) {
            return Err(Error::Shape(
                "tissue and arterial curves are on different grids".into(),
            ));
        }
        let c = nalgebra::DVector::from_column_slice(&tac.samples);
        let irf = &self.pinv * c;
        Curve::new(tac.dt, tac.t0, irf.iter().copied().collect())
    }

    pub fn deconvolve(&self, tac: &Curve) -> Result<(Curve, VoxelFit)> {
        let irf = self.irf(tac)?;
        let k = self.units.k();
        let imax = argmax_first(&irf.samples);
        let cbf = (60.0 * irf.samples[imax] / k).max(0.0);
        let cbv = (irf.samples.iter().sum::<f64>() * tac.dt / k).max(0.0);
        let fit = if cbf > 0.0 && cbv > 0.0 {
            let model = circular_convolve(&self.aif.samples, &irf.samples, tac.dt);
            let rss = tac
                .samples
                .iter()
                .zip(&model)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            VoxelFit {
                cbv,
                cbf,
                mtt: cbv * 60.0 / cbf,
                delay: imax as f64 * tac.dt,
                ttp: tac.time(argmax_first(&tac.samples)),
                rss,
                status: FitStatus::Ok,
            }
        } else {
            let rss = tac.samples.iter().map(|v| v * v).sum();
            VoxelFit::zero(rss, FitStatus::ZeroSignal)
        };
        Ok((irf, fit))
    }
}

/// `(aif * irf) dt` on the circular window of `irf.len()` samples, truncated
/// to `aif.len()`.
pub(crate) fn circular_convolve(aif: &[f64], irf: &[f64], dt: f64) -> Vec<f64> {
    let n = irf.len();
    (0..aif.len())
        .map(|i| {
            (0..n)
                .map(|j| {
                    let m = (i + n - j) % n;
                    if m < aif.len() {
                        aif[m] * irf[j]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                * dt
        })
        .collect()
}

/// Block-circulant truncated-SVD deconvolution of one baseline-subtracted
/// curve.
pub fn svd_deconvolve(tac: &Curve, aif: &Curve, threshold_frac: f64) -> Result<(Curve, VoxelFit)> {
    SvdDeconvolver::new(aif, threshold_frac, UnitConversion::default())?.deconvolve(tac)
}

/// SVD baseline over every voxel of `mask`.
pub fn svd_volume(
    vol: &TimeSeriesVolume,
    aif: &Curve,
    threshold_frac: f64,
    units: UnitConversion,
    mask: &BinaryMask,
) -> Result<VolumeFit> {
    if mask.dims() != vol.spatial_dims() {
        return Err(Error::Shape("mask and volume dims differ".into()));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dec = SvdDeconvolver::new(aif, threshold_frac, units)?;
    let start = Instant::now();
    let fits: Vec<(usize, VoxelFit)> = mask
        .indices()
        .into_par_iter()
        .map(|v| -> Result<(usize, VoxelFit)> {
            let c = Curve::new(aif.dt, aif.t0, baseline_subtract(&vol.series(v)))?;
            Ok((v, dec.deconvolve(&c)?.1))
        })
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let only: Vec<VoxelFit> = fits.iter().map(|(_, f)| *f).collect();
    Ok(VolumeFit {
        maps: assemble_maps(vol.spatial_dims(), vol.spacing(), &fits)?,
        summary: FitSummary::from_fits(&only, elapsed),
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{gamma_variate, synth_tac, GammaVariateParams, TimeGrid};

    fn setup(cbv: f64, mtt: f64, delay: f64) -> (Curve, Curve) {
        let g = TimeGrid::new(89, 0.5, 0.0).unwrap();
        let aif = gamma_variate(&GammaVariateParams::default(), g).unwrap();
        let tac = synth_tac(&aif, cbv, mtt, delay, g, UnitConversion::default()).unwrap();
        (aif, tac)
    }

    #[test]
    fn noiseless_cbf_within_tolerance() {
        // nominal tissue, penumbra and core voxels of the built-in scene
        for (cbv, mtt, delay) in [(4.0, 4.0, 0.5), (3.0, 8.0, 3.0), (1.0, 10.0, 4.0)] {
            let (aif, tac) = setup(cbv, mtt, delay);
            let (_, f) = svd_deconvolve(&tac, &aif, DEFAULT_SVD_THRESHOLD).unwrap();
            let truth = 60.0 * cbv / mtt;
            assert!(
                (f.cbf - truth).abs() <= 0.15 * truth,
                "{cbv} {mtt}: {} vs {truth}",
                f.cbf
            );
        }
    }

    #[test]
    fn full_truncation_zeroes_everything() {
        let (aif, tac) = setup(4.0, 4.0, 0.5);
        let (irf, f) = svd_deconvolve(&tac, &aif, 1.0).unwrap();
        assert!(irf.samples.iter().all(|&v| v == 0.0));
        assert_eq!(f.cbv, 0.0);
    }

    #[test]
    fn zero_input_function_is_singular() {
        let aif = Curve::new(0.5, 0.0, vec![0.0; 20]).unwrap();
        assert!(matches!(
            svd_deconvolve(&aif.clone(), &aif, 0.2),
            Err(Error::SingularSystem)
        ));
    }

    fn reconvolution_error(frac: f64) -> f64 {
        let (aif, tac) = setup(3.0, 6.0, 1.5);
        let (irf, _) = svd_deconvolve(&tac, &aif, frac).unwrap();
        let re = circular_convolve(&aif.samples, &irf.samples, aif.dt);
        let num: f64 = re
            .iter()
            .zip(&tac.samples)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let den: f64 = tac.samples.iter().map(|b| b * b).sum();
        (num / den).sqrt()
    }

    #[test]
    fn reconvolution_error_shrinks_with_threshold() {
        let e: Vec<f64> = [0.4, 0.2, 0.05, 0.0]
            .iter()
            .map(|&f| reconvolution_error(f))
            .collect();
        assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{e:?}");
        assert!(e[3] < 1e-8, "{e:?}");
        assert!(e[1] < 0.1, "{e:?}");
    }

    #[test]
    fn circulant_oracle_matches_direct_product() {
        // the circular convolution used for reconvolution agrees with the
        // explicit circulant matrix
        let (aif, _) = setup(1.0, 1.0, 0.0);
        let nt = aif.len();
        let irf: Vec<f64> = (0..2 * nt).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let n = 2 * nt;
        let pad = |i: usize| if i < nt { aif.samples[i] } else { 0.0 };
        let direct: Vec<f64> = (0..nt)
            .map(|i| (0..n).map(|j| aif.dt * pad((i + n - j) % n) * irf[j]).sum())
            .collect();
        let c = circular_convolve(&aif.samples, &irf, aif.dt);
        for (a, b) in c.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
