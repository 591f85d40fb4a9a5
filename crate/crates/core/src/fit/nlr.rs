use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    assemble_maps, baseline_subtract, noise_estimate, FitStatus, FitSummary, VolumeFit, VoxelFit,
};
use crate::error::{Error, Result};
use crate::phantom::{argmax_first, causal_convolve, unit_box, UnitConversion};
use crate::volume::{BinaryMask, Curve, TimeSeriesVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Candidate transit times in s, strictly increasing.
    pub mtt_grid: Vec<f64>,
    /// Candidate delays in s, strictly increasing.
    pub delay_grid: Vec<f64>,
    pub refine: bool,
    pub max_refine_iters: usize,
    /// Clamp the amplitude at zero.
    pub nonneg: bool,
    /// Voxels whose peak is below this multiple of the noise estimate are
    /// reported as zero signal.
    pub noise_factor: f64,
    /// Take TTP from the raw curve instead of the fitted model.
    pub ttp_raw: bool,
    pub units: UnitConversion,
}

impl FitConfig {
    /// Default grids for sampling interval `dt`: 24 log-spaced transit
    /// times in [1, 24] s and delays 0..=10 s in steps of `dt`.
    pub fn for_dt(dt: f64) -> Self {
        let steps = (10.0 / dt + 1e-9).floor() as usize;
        Self {
            mtt_grid: log_grid(1.0, 24.0, 24),
            delay_grid: (0..=steps).map(|i| i as f64 * dt).collect(),
            refine: true,
            max_refine_iters: 20,
            nonneg: true,
            noise_factor: 3.0,
            ttp_raw: false,
            units: UnitConversion::default(),
        }
    }

    pub fn validate(&self, nt: usize, dt: f64) -> Result<()> {
        let window = nt as f64 * dt;
        for (name, g, lo) in [
            ("mtt", &self.mtt_grid, f64::MIN_POSITIVE),
            ("delay", &self.delay_grid, 0.0),
        ] {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} grid is empty")));
            }
            if g.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidArgument(format!(
                    "{name} grid must be strictly increasing"
                )));
            }
            if !(g[0] >= lo && g[g.len() - 1] < window) {
                return Err(Error::InvalidArgument(format!(
                    "{name} grid must lie within [{lo}, {window}) s"
                )));
            }
        }
        if !(self.noise_factor >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise factor must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::for_dt(0.5)
    }
}

/// `n` points from `lo` to `hi` inclusive, evenly spaced in log.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo * (r * i as f64).exp()
            }
        })
        .collect()
}

/// Unit-amplitude tissue curve `(aif * unit_box) dt` for the given transit
/// time and delay; the same forward model the phantom generator uses.
pub fn model_tac(aif: &Curve, mtt: f64, delay: f64) -> Result<Curve> {
    let kernel = unit_box(mtt, delay, aif.dt, aif.len())?;
    Curve::new(
        aif.dt,
        aif.t0,
        causal_convolve(&aif.samples, &kernel, aif.dt),
    )
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed grid bases for one arterial curve.
pub struct Fitter {
    aif: Curve,
    cfg: FitConfig,
    /// Basis for grid pair `(i, j)` at `i * delay_grid.len() + j`.
    basis: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

struct Eval {
    amp: f64,
    rss: f64,
}

impl Fitter {
    pub fn new(aif: &Curve, cfg: &FitConfig) -> Result<Self> {
        cfg.validate(aif.len(), aif.dt)?;
        let mut basis = Vec::with_capacity(cfg.mtt_grid.len() * cfg.delay_grid.len());
        for &m in &cfg.mtt_grid {
            for &d in &cfg.delay_grid {
                basis.push(model_tac(aif, m, d)?.samples);
            }
        }
        let norms = basis.iter().map(|b| dot(b, b)).collect();
        Ok(Self {
            aif: aif.clone(),
            cfg: cfg.clone(),
            basis,
            norms,
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }

    pub fn aif(&self) -> &Curve {
        &self.aif
    }

    fn solve(&self, c: &[f64], b: &[f64], bb: f64) -> Eval {
        let bc = dot(b, c);
        let mut amp = if bb > 0.0 { bc / bb } else { 0.0 };
        if self.cfg.nonneg {
            amp = amp.max(0.0);
        }
        // summed directly: the expanded form cc - 2 amp bc + amp^2 bb
        // cancels to noise near a zero-residual optimum
        let rss = c.iter().zip(b).map(|(&ci, &bi)| (ci - amp * bi).powi(2)).sum();
        Eval { amp, rss }
    }

    fn eval_at(&self, c: &[f64], mtt: f64, delay: f64) -> Eval {
        let b = model_tac(&self.aif, mtt, delay)
            .expect("refinement keeps mtt positive")
            .samples;
        let bb = dot(&b, &b);
        self.solve(c, &b, bb)
    }

    /// Residual of every grid candidate, in grid order.
    pub fn grid_rss(&self, tac: &Curve) -> Result<Vec<f64>> {
        self.check(tac)?;
        // same peak normalization as `fit`, so the values compare exactly
        let peak = tac.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = if peak > 0.0 { peak } else { 1.0 };
        let c: Vec<f64> = tac.samples.iter().map(|v| v / s).collect();
        Ok(self
            .basis
            .iter()
            .zip(&self.norms)
            .map(|(b, &bb)| self.solve(&c, b, bb).rss * s * s)
            .collect())
    }

    fn check(&self, tac: &Curve) -> Result<()> {
        if !tac.same_grid(&self.aif) {
            return Err(Error::Shape(format!(
                "tissue curve ({} samples, dt {}) and arterial curve ({} samples, dt {}) are on different grids",
                tac.len(),
                tac.dt,
                self.aif.len(),
                self.aif.dt
            )));
        }
        Ok(())
    }

    /// Fits one baseline-subtracted tissue curve.
    pub fn fit(&self, tac: &Curve) -> Result<VoxelFit> {
        self.check(tac)?;
        let c = &tac.samples;
        let cc = dot(c, c);
        let peak = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0) || peak < self.cfg.noise_factor * noise_estimate(c) {
            return Ok(VoxelFit::zero(cc, FitStatus::ZeroSignal));
        }
        // search on the peak-normalized curve so the result is exactly
        // amplitude-linear; amp and rss are rescaled at the end
        let raw = c;
        let norm: Vec<f64> = raw.iter().map(|v| v / peak).collect();
        let c = &norm;

        let nd = self.cfg.delay_grid.len();
        let mut best = (0usize, f64::INFINITY, 0.0);
        for (k, (b, &bb)) in self.basis.iter().zip(&self.norms).enumerate() {
            let e = self.solve(c, b, bb);
            if e.rss < best.1 {
                best = (k, e.rss, e.amp);
            }
        }
        let (k, mut rss, mut amp) = best;
        let (im, id) = (k / nd, k % nd);
        let mg = &self.cfg.mtt_grid;
        let dg = &self.cfg.delay_grid;
        let mut mtt = mg[im];
        let mut delay = dg[id];

        if self.cfg.refine && rss > 0.0 {
            let (mlo, mhi) = (mg[0], mg[mg.len() - 1]);
            let (dlo, dhi) = (dg[0], dg[nd - 1]);
            let mstep = |x: f64| neighbor_span(mg, x);
            let dstep = |x: f64| neighbor_span(dg, x);
            for _ in 0..self.cfg.max_refine_iters {
                let prev = rss;
                let start = (mtt, delay);
                let (lo, hi) = mstep(mtt);
                let (x, e) = golden(
                    |m| self.eval_at(c, m, delay),
                    lo.max(mlo),
                    hi.min(mhi),
                    1e-7 * mtt,
                );
                if e.rss < rss {
                    (mtt, rss, amp) = (x, e.rss, e.amp);
                }
                let (lo, hi) = dstep(delay);
                let (x, e) = golden(
                    |d| self.eval_at(c, mtt, d),
                    lo.max(dlo),
                    hi.min(dhi),
                    1e-7 * self.aif.dt,
                );
                if e.rss < rss {
                    (delay, rss, amp) = (x, e.rss, e.amp);
                }
                // pattern move along the sweep's net displacement, which
                // follows the valley where mtt and delay trade off
                let (pm, pd) = (mtt - start.0, delay - start.1);
                if pm != 0.0 || pd != 0.0 {
                    let (tlo, thi) = pattern_span((mtt, delay), (pm, pd), (mlo, mhi), (dlo, dhi));
                    if thi > tlo {
                        let at = |t: f64| (mtt + t * pm, delay + t * pd);
                        let (t, e) = golden(
                            |t| {
                                let (m, d) = at(t);
                                self.eval_at(c, m, d)
                            },
                            tlo,
                            thi,
                            1e-7,
                        );
                        if e.rss < rss {
                            (mtt, delay) = at(t);
                            (rss, amp) = (e.rss, e.amp);
                        }
                    }
                }
                if !(prev - rss > 1e-6 * prev) {
                    break;
                }
            }
            (mtt, delay, amp, rss) = self.polish(c, (mtt, delay, amp, rss), (mlo, mhi), (dlo, dhi));
        }

        let (amp, rss) = (amp * peak, rss * peak * peak);
        if !(amp > 0.0) {
            return Ok(VoxelFit::zero(rss, FitStatus::ZeroSignal));
        }
        let on_edge = |g: &[f64], i: usize, x: f64| {
            let edge = i == 0 || i + 1 == g.len();
            let tol = 1e-9 * (g[g.len() - 1] - g[0]).abs().max(1.0);
            edge && ((x - g[0]).abs() <= tol || (x - g[g.len() - 1]).abs() <= tol)
        };
        let status = if on_edge(mg, im, mtt) || on_edge(dg, id, delay) {
            FitStatus::Boundary
        } else {
            FitStatus::Ok
        };
        let ttp_index = if self.cfg.ttp_raw {
            argmax_first(raw)
        } else {
            argmax_first(&model_tac(&self.aif, mtt, delay)?.samples)
        };
        let cbv = amp / self.cfg.units.k();
        Ok(VoxelFit {
            cbv,
            cbf: 60.0 * cbv / mtt,
            mtt,
            delay,
            ttp: tac.time(ttp_index),
            rss,
            status,
        })
    }
}

impl Fitter {
    /// Levenberg-Marquardt on (amp, mtt, delay) from the searched optimum,
    /// with analytic box derivatives. Returns the input when no step helps.
    fn polish(
        &self,
        c: &[f64],
        start: (f64, f64, f64, f64),
        mb: (f64, f64),
        db: (f64, f64),
    ) -> (f64, f64, f64, f64) {
        let (mut mtt, mut delay, mut amp, mut rss) = start;
        let (dt, n) = (self.aif.dt, self.aif.len());
        let mut mu = 1e-3;
        for _ in 0..100 {
            if rss == 0.0 || mu > 1e12 {
                break;
            }
            let Ok(b) = model_tac(&self.aif, mtt, delay) else {
                break;
            };
            let (dbox_m, dbox_d) = box_derivatives(mtt, delay, dt, n);
            let bm = causal_convolve(&self.aif.samples, &dbox_m, dt);
            let bd = causal_convolve(&self.aif.samples, &dbox_d, dt);
            // residual r = c - amp b; columns are -dr/dtheta
            let cols = [&b.samples[..], &bm[..], &bd[..]];
            let scale = [1.0, amp, amp];
            let r: Vec<f64> = c.iter().zip(&b.samples).map(|(&ci, &bi)| ci - amp * bi).collect();
            let mut a = nalgebra::Matrix3::<f64>::zeros();
            let mut g = nalgebra::Vector3::<f64>::zeros();
            for i in 0..3 {
                g[i] = scale[i] * dot(cols[i], &r);
                for j in 0..3 {
                    a[(i, j)] = scale[i] * scale[j] * dot(cols[i], cols[j]);
                }
            }
            let mut improved = false;
            while mu <= 1e12 {
                let mut damped = a;
                for i in 0..3 {
                    damped[(i, i)] += mu * a[(i, i)].max(1e-300);
                }
                let Some(step) = damped.lu().solve(&g) else {
                    mu *= 10.0;
                    continue;
                };
                let mut na = amp + step[0];
                if self.cfg.nonneg {
                    na = na.max(0.0);
                }
                let nm = (mtt + step[1]).clamp(mb.0, mb.1);
                let nd = (delay + step[2]).clamp(db.0, db.1);
                let Ok(nb) = model_tac(&self.aif, nm, nd) else {
                    mu *= 10.0;
                    continue;
                };
                let nr: f64 = c.iter().zip(&nb.samples).map(|(&ci, &bi)| (ci - na * bi).powi(2)).sum();
                if nr < rss {
                    let small = (nm - mtt).abs() <= 1e-14 * mtt && (nd - delay).abs() <= 1e-14 * dt;
                    (amp, mtt, delay, rss) = (na, nm, nd, nr);
                    mu = (mu / 10.0).max(1e-12);
                    improved = !small;
                    break;
                }
                mu *= 10.0;
            }
            if !improved {
                break;
            }
        }
        (mtt, delay, amp, rss)
    }
}

/// Derivatives of the cell-averaged unit box with respect to transit time
/// and delay. An edge lying exactly on a cell boundary counts toward the
/// later cell.
fn box_derivatives(mtt: f64, delay: f64, dt: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = (delay, delay + mtt);
    let scale = 1.0 / (dt * mtt);
    let inside = |x: f64, a: f64| x >= a && x < a + dt;
    let mut dm = vec![0.0; n];
    let mut dd = vec![0.0; n];
    for j in 0..n {
        let a = j as f64 * dt;
        let b = a + dt;
        let overlap = (b.min(hi) - a.max(lo)).max(0.0);
        let up = if inside(hi, a) { 1.0 } else { 0.0 };
        let down = if inside(lo, a) { 1.0 } else { 0.0 };
        dm[j] = (up - overlap / mtt) * scale;
        dd[j] = (up - down) * scale;
    }
    (dm, dd)
}

/// The interval between the grid neighbours enclosing `x`.
fn neighbor_span(g: &[f64], x: f64) -> (f64, f64) {
    let i = g.partition_point(|&v| v < x);
    let lo = if i == 0 { g[0] } else { g[i - 1] };
    let hi = if i < g.len() && g[i] > x {
        g[i]
    } else {
        g[(i + 1).min(g.len() - 1)]
    };
    (lo.min(x), hi.max(x))
}

/// Range of `t` keeping `x + t * p` inside the box, capped to `[-1, 4]`.
fn pattern_span(x: (f64, f64), p: (f64, f64), mb: (f64, f64), db: (f64, f64)) -> (f64, f64) {
    let (mut lo, mut hi) = (-1.0f64, 4.0f64);
    for (xi, pi, (b0, b1)) in [(x.0, p.0, mb), (x.1, p.1, db)] {
        if pi > 0.0 {
            lo = lo.max((b0 - xi) / pi);
            hi = hi.min((b1 - xi) / pi);
        } else if pi < 0.0 {
            lo = lo.max((b1 - xi) / pi);
            hi = hi.min((b0 - xi) / pi);
        }
    }
    (lo, hi)
}

/// Golden-section minimization of `f` over `[lo, hi]`; returns the best
/// interior point evaluated.
fn golden(f: impl Fn(f64) -> Eval, lo: f64, hi: f64, tol: f64) -> (f64, Eval) {
    const INV_PHI: f64 = 0.618_033_988_749_895;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol.max(1e-12) {
        if f1.rss <= f2.rss {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1.rss <= f2.rss {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Fits one baseline-subtracted tissue curve against `aif`.
pub fn fit_voxel(tac: &Curve, aif: &Curve, cfg: &FitConfig) -> Result<VoxelFit> {
    Fitter::new(aif, cfg)?.fit(tac)
}

/// Fits every voxel of `mask`; voxels outside it stay zero in all maps.
pub fn fit_volume(
    vol: &TimeSeriesVolume,
    aif: &Curve,
    cfg: &FitConfig,
    mask: &BinaryMask,
) -> Result<VolumeFit> {
    if mask.dims() != vol.spatial_dims() {
        return Err(Error::Shape(format!(
            "mask dims {:?} do not match volume {:?}",
            mask.dims(),
            vol.spatial_dims()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let fitter = Fitter::new(aif, cfg)?;
    if aif.len() != vol.nt() || (aif.dt - vol.dt()).abs() > 1e-12 * vol.dt() {
        return Err(Error::Shape(
            "arterial curve and volume are on different time grids".into(),
        ));
    }
    let start = Instant::now();
    let fits: Vec<(usize, VoxelFit)> = mask
        .indices()
        .into_par_iter()
        .map(|v| -> Result<(usize, VoxelFit)> {
            let c = Curve::new(aif.dt, aif.t0, baseline_subtract(&vol.series(v)))?;
            Ok((v, fitter.fit(&c)?))
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
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> TimeGrid {
        TimeGrid::new(89, 0.5, 0.0).unwrap()
    }

    fn aif() -> Curve {
        gamma_variate(&GammaVariateParams::default(), grid()).unwrap()
    }

    fn naive(signal: &[f64], kernel: &[f64], dt: f64) -> Vec<f64> {
        (0..signal.len())
            .map(|n| (0..=n).map(|m| signal[m] * kernel[n - m]).sum::<f64>() * dt)
            .collect()
    }

    #[test]
    fn box_derivatives_match_finite_differences() {
        let (dt, n, h) = (0.5, 40, 1e-6);
        for &(mtt, delay) in &[(3.3, 1.1), (7.05, 0.2), (1.2, 4.37), (12.9, 0.31)] {
            let (dm, dd) = box_derivatives(mtt, delay, dt, n);
            let fd = |f: &dyn Fn(f64) -> Vec<f64>| -> Vec<f64> {
                f(h).iter().zip(f(-h)).map(|(p, m)| (p - m) / (2.0 * h)).collect()
            };
            let fm = fd(&|e| unit_box(mtt + e, delay, dt, n).unwrap());
            let fdl = fd(&|e| unit_box(mtt, delay + e, dt, n).unwrap());
            for j in 0..n {
                assert!((dm[j] - fm[j]).abs() < 1e-7, "mtt {mtt} cell {j}: {} vs {}", dm[j], fm[j]);
                assert!((dd[j] - fdl[j]).abs() < 1e-7, "delay {delay} cell {j}: {} vs {}", dd[j], fdl[j]);
            }
        }
    }

    #[test]
    fn impulse_input_gives_the_unit_box() {
        let dt = 0.5;
        let mut s = vec![0.0; 40];
        s[0] = 1.0 / dt;
        let imp = Curve::new(dt, 0.0, s).unwrap();
        let b = model_tac(&imp, 4.2, 1.3).unwrap();
        let u = unit_box(4.2, 1.3, dt, 40).unwrap();
        for (x, y) in b.samples.iter().zip(&u) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn model_preserves_area_and_matches_oracle() {
        // long window so the arterial tail is fully inside it
        let a = gamma_variate(
            &GammaVariateParams::default(),
            TimeGrid::new(160, 0.5, 0.0).unwrap(),
        )
        .unwrap();
        for (m, d) in [(3.0, 0.0), (4.7, 1.25), (8.0, 3.3)] {
            let b = model_tac(&a, m, d).unwrap();
            let area_b: f64 = b.samples.iter().sum::<f64>() * a.dt;
            let area_a: f64 = a.samples.iter().sum::<f64>() * a.dt;
            assert!((area_b - area_a).abs() < 1e-9 * area_a, "{area_b} {area_a}");
            let o = naive(&a.samples, &unit_box(m, d, a.dt, a.len()).unwrap(), a.dt);
            for (x, y) in b.samples.iter().zip(&o) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn model_rejects_nonpositive_mtt() {
        assert!(model_tac(&aif(), 0.0, 1.0).is_err());
    }

    #[test]
    fn noiseless_voxel_is_recovered() {
        let a = aif();
        let units = UnitConversion::default();
        let tac = synth_tac(&a, 4.0, 4.0, 2.0, grid(), units).unwrap();
        let f = fit_voxel(&tac, &a, &FitConfig::default()).unwrap();
        assert_eq!(f.status, FitStatus::Ok);
        assert!((f.cbv - 4.0).abs() <= 0.01 * 4.0, "{f:?}");
        assert!((f.mtt - 4.0).abs() <= 0.02 * 4.0, "{f:?}");
        assert!((f.delay - 2.0).abs() <= 0.25, "{f:?}");
        assert!((f.cbf * f.mtt - 60.0 * f.cbv).abs() <= 1e-6 * 60.0 * f.cbv);
    }

    #[test]
    fn random_noiseless_voxels_are_recovered() {
        let a = aif();
        let units = UnitConversion::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cbv = rng.random_range(0.5..6.0);
            let mtt = rng.random_range(2.0..14.0);
            let delay = rng.random_range(0.2..5.0);
            let tac = synth_tac(&a, cbv, mtt, delay, grid(), units).unwrap();
            let f = fit_voxel(&tac, &a, &FitConfig::default()).unwrap();
            assert!(
                (f.cbv - cbv).abs() <= 0.01 * cbv,
                "{cbv} {mtt} {delay} -> {f:?}"
            );
            assert!(
                (f.mtt - mtt).abs() <= 0.02 * mtt,
                "{cbv} {mtt} {delay} -> {f:?}"
            );
            assert!(
                (f.delay - delay).abs() <= 0.25,
                "{cbv} {mtt} {delay} -> {f:?}"
            );
        }
    }

    #[test]
    fn zero_curve_is_zero_signal() {
        let a = aif();
        let tac = Curve::new(a.dt, a.t0, vec![0.0; a.len()]).unwrap();
        let f = fit_voxel(&tac, &a, &FitConfig::default()).unwrap();
        assert_eq!(f.status, FitStatus::ZeroSignal);
        assert_eq!((f.cbv, f.cbf), (0.0, 0.0));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = aif();
        let tac = Curve::new(a.dt, a.t0, vec![0.0; a.len() - 1]).unwrap();
        assert!(fit_voxel(&tac, &a, &FitConfig::default()).is_err());
    }

    #[test]
    fn returned_rss_beats_every_grid_candidate() {
        let a = aif();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = synth_tac(&a, 3.0, 6.3, 1.7, grid(), UnitConversion::default()).unwrap();
        let noisy = Curve::new(
            a.dt,
            a.t0,
            base.samples
                .iter()
                .map(|v| v + rng.random_range(-0.5..0.5))
                .collect(),
        )
        .unwrap();
        for refine in [false, true] {
            let cfg = FitConfig {
                refine,
                ..FitConfig::default()
            };
            let fitter = Fitter::new(&a, &cfg).unwrap();
            let f = fitter.fit(&noisy).unwrap();
            for r in fitter.grid_rss(&noisy).unwrap() {
                assert!(f.rss <= r);
            }
        }
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1.0, 24.0, 24);
        assert_eq!(g.len(), 24);
        assert_eq!((g[0], g[23]), (1.0, 24.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let cfg = FitConfig::default();
        assert_eq!(cfg.delay_grid.len(), 21);
        assert!(cfg.validate(89, 0.5).is_ok());
        let bad = FitConfig {
            delay_grid: vec![1.0, 1.0],
            ..FitConfig::default()
        };
        assert!(bad.validate(89, 0.5).is_err());
    }
}
