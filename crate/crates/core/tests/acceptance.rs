//! Acceptance suite A1-A10. Prints one PASS/FAIL line per criterion and a
//! tally. `CTPERF_ACCEPTANCE=A1,A7` runs a subset; `CTPERF_ACCEPTANCE_OUT`
//! keeps the pipeline artifacts of A5 and A9 under that directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ctperf::fit::{fit_volume, svd_volume, FitConfig, DEFAULT_SVD_THRESHOLD};
use ctperf::phantom::{
    builtin_scene, builtin_stroke_scene, gamma_variate, generate_phantom, ground_truth_maps,
    AcquisitionConfig, GammaVariateParams, LesionKind, NoiseMotionConfig, TissueParamField,
    UnitConversion,
};
use ctperf::pipeline::{cmd_pipeline, fit_case, FitOptions, PipelineOptions};
use ctperf::preprocess::{estimate_shift, register_timeseries, RegistrationConfig};
use ctperf::regressor::layers::Tensor;
use ctperf::regressor::{grad_check, infer, Regressor, Sample, UNet, UNetConfig};
use ctperf::validate::{dice, evaluate_cohort, pearson, CohortCase, SegmentationThresholds};
use ctperf::vascular::aif_extraction_count;
use ctperf::volume::{BinaryMask, MapKind, MapSet, TimeSeriesVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn(&Path) -> ctperf::Result<Outcome>;

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

fn noiseless(seed: u64) -> ctperf::Result<(TissueParamField, TimeSeriesVolume)> {
    let scene = builtin_stroke_scene(64, 64, seed)?;
    let vol = generate_phantom(
        &scene,
        &AcquisitionConfig::default(),
        &GammaVariateParams::default(),
        &NoiseMotionConfig::default(),
    )?;
    Ok((scene, vol))
}

fn true_aif() -> ctperf::Result<ctperf::volume::Curve> {
    gamma_variate(
        &GammaVariateParams::default(),
        AcquisitionConfig::default().grid(),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn a1(_: &Path) -> ctperf::Result<Outcome> {
    let (scene, vol) = noiseless(0)?;
    let mask = scene.perfused_mask();
    let aif = true_aif()?;
    let start = Instant::now();
    let fit = single_threaded(|| fit_volume(&vol, &aif, &FitConfig::default(), &mask))?;
    let secs = start.elapsed().as_secs_f64();
    let maps = &fit.maps;
    let (cbv, mtt, delay) = (
        maps.require(MapKind::Cbv)?.values(),
        maps.require(MapKind::Mtt)?.values(),
        maps.require(MapKind::Delay)?.values(),
    );
    let idx = mask.indices();
    let good = idx
        .iter()
        .filter(|&&i| {
            let rel = |f: f32, t: f64| (f as f64 - t).abs() / t;
            rel(cbv[i], scene.cbv[i]) <= 0.01
                && rel(mtt[i], scene.mtt[i]) <= 0.02
                && (delay[i] as f64 - scene.delay[i]).abs() <= 0.25
        })
        .count();
    let frac = good as f64 / idx.len() as f64;
    Ok(Outcome {
        pass: frac >= 0.99 && secs <= 60.0,
        detail: format!(
            "{:.2}% of {} perfused voxels within tolerance (need >= 99%), {:.1} s single-threaded (limit 60 s)",
            100.0 * frac,
            idx.len(),
            secs
        ),
    })
}

fn a2(_: &Path) -> ctperf::Result<Outcome> {
    let scene = builtin_stroke_scene(64, 64, 0)?;
    let acq = AcquisitionConfig::default();
    let params = GammaVariateParams::default();
    let vol = generate_phantom(&scene, &acq, &params, &NoiseMotionConfig::noise_only(2.0, 0))?;
    let mask = scene.perfused_mask();
    let art = fit_case(&vol, &scene.brain_mask(), &mask, &FitOptions::default())?;
    let gt = MapSet::new(ground_truth_maps(&scene, &acq, &params)?)?;
    let idx = mask.indices();
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, need) in [
        (MapKind::Cbv, 0.95),
        (MapKind::Cbf, 0.95),
        (MapKind::Mtt, 0.90),
        (MapKind::Ttp, 0.90),
    ] {
        let f = art.fit.maps.require(kind)?.values();
        let g = gt.require(kind)?.values();
        let xs: Vec<f64> = idx.iter().map(|&i| g[i] as f64).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| f[i] as f64).collect();
        let r = pearson(&xs, &ys)?;
        pass &= r >= need;
        parts.push(format!("{} r={:.3} (>= {need})", kind.tag(), r));
    }
    Ok(Outcome {
        pass,
        detail: parts.join(", "),
    })
}

fn a3(_: &Path) -> ctperf::Result<Outcome> {
    let (scene, vol) = noiseless(0)?;
    let mask = scene.perfused_mask();
    let aif = true_aif()?;
    let nlr = fit_volume(&vol, &aif, &FitConfig::default(), &mask)?;
    let svd = svd_volume(
        &vol,
        &aif,
        DEFAULT_SVD_THRESHOLD,
        UnitConversion::default(),
        &mask,
    )?;
    let rel = |kind: MapKind| -> ctperf::Result<f64> {
        let (a, b) = (
            svd.maps.require(kind)?.values(),
            nlr.maps.require(kind)?.values(),
        );
        Ok(median(
            mask.indices()
                .iter()
                .map(|&i| ((a[i] - b[i]) / b[i]).abs() as f64)
                .collect(),
        ))
    };
    let (cbf, cbv) = (rel(MapKind::Cbf)?, rel(MapKind::Cbv)?);
    Ok(Outcome {
        pass: cbf <= 0.15 && cbv <= 0.10,
        detail: format!(
            "median |SVD-NLR|/NLR: CBF {:.1}% (<= 15%), CBV {:.1}% (<= 10%)",
            100.0 * cbf,
            100.0 * cbv
        ),
    })
}

fn a4(_: &Path) -> ctperf::Result<Outcome> {
    let cfg = UNetConfig {
        in_channels: 89,
        out_channels: 3,
        depth: 2,
        base_channels: 4,
    };
    let net = UNet::<f64>::new(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |c: usize| {
        Tensor::new(
            c,
            8,
            8,
            (0..c * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    };
    let sample = Sample {
        input: random(89)?,
        target: random(3)?,
        mask: None,
    };
    let r = grad_check(&net, &sample, 1e-5)?;
    let (i, a, n) = r.worst;
    Ok(Outcome {
        pass: r.max_rel_error <= 1e-4,
        detail: format!(
            "max relative error {:.2e} over {} parameters (<= 1e-4); {} above 1e-4, worst #{i}: analytic {a:.4e} numeric {n:.4e}",
            r.max_rel_error, r.n_params, r.n_above_1e4
        ),
    })
}

fn a5(out: &Path) -> ctperf::Result<Outcome> {
    let r = cmd_pipeline(&PipelineOptions::default(), 1, &out.join("a5"))?;
    let h = &r.history;
    let ratio = h.best_val_mse() / h.initial_val_mse();
    let (c, p) = (&r.report.core, &r.report.penumbra);
    let ok = |v: Option<f64>, need: f64| v.is_some_and(|x| x >= need);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let pass = r.train_seconds <= 900.0
        && ratio <= 0.1
        && ok(c.dice_mean, 0.70)
        && ok(p.dice_mean, 0.70)
        && ok(c.volume_r, 0.95)
        && ok(p.volume_r, 0.95);
    Ok(Outcome {
        pass,
        detail: format!(
            "train {:.0} s (<= 900), val mse ratio {:.4} (<= 0.1), dice core {} penumbra {} (>= 0.70), volume r core {} penumbra {} (>= 0.95)",
            r.train_seconds,
            ratio,
            fmt(c.dice_mean),
            fmt(p.dice_mean),
            fmt(c.volume_r),
            fmt(p.volume_r)
        ),
    })
}

fn a6(_: &Path) -> ctperf::Result<Outcome> {
    let acq = AcquisitionConfig::default();
    let params = GammaVariateParams::default();
    let aif = true_aif()?;
    let cfg = FitConfig {
        refine: false,
        ..FitConfig::default()
    };
    let healthy = [2usize, 7, 11];
    let mut cases = Vec::new();
    for i in 0..15 {
        let kind = if healthy.contains(&i) {
            LesionKind::Healthy
        } else if i % 4 == 3 {
            LesionKind::PenumbraOnly
        } else {
            LesionKind::CoreAndPenumbra
        };
        let scene = builtin_scene(64, 64, 100 + i as u64, kind)?;
        let vol = generate_phantom(
            &scene,
            &acq,
            &params,
            &NoiseMotionConfig::noise_only(2.0, i as u64),
        )?;
        let mask = scene.perfused_mask();
        cases.push(CohortCase {
            id: format!("case_{i:03}"),
            reference: MapSet::new(ground_truth_maps(&scene, &acq, &params)?)?,
            test: fit_volume(&vol, &aif, &cfg, &mask)?.maps,
            mask,
        });
    }
    let thr = SegmentationThresholds::default();
    let full = evaluate_cohort(&cases, &thr)?;
    let lesion_only: Vec<CohortCase> = cases
        .iter()
        .enumerate()
        .filter(|(i, _)| !healthy.contains(i))
        .map(|(_, c)| c.clone())
        .collect();
    let sub = evaluate_cohort(&lesion_only, &thr)?;
    let excluded: Vec<&str> = full
        .cases
        .iter()
        .filter(|c| c.excluded)
        .map(|c| c.case.as_str())
        .collect();
    let expected: Vec<String> = healthy.iter().map(|i| format!("case_{i:03}")).collect();
    let pass = full.n_excluded == 3
        && excluded == expected.iter().map(String::as_str).collect::<Vec<_>>()
        && full.core == sub.core
        && full.penumbra == sub.penumbra;
    Ok(Outcome {
        pass,
        detail: format!(
            "excluded {:?} of {} cases; statistics identical to the 12-case cohort: {}",
            excluded,
            full.n_cases,
            full.core == sub.core && full.penumbra == sub.penumbra
        ),
    })
}

fn a7(_: &Path) -> ctperf::Result<Outcome> {
    let scene = builtin_stroke_scene(64, 64, 0)?;
    let acq = AcquisitionConfig::default();
    let schedule = NoiseMotionConfig::random_schedule(acq.nt, 5, 1.0, 7);
    let nm = NoiseMotionConfig {
        noise_sigma_hu: 2.0,
        max_shift_px: 5,
        shift_schedule: schedule.clone(),
        rng_seed: 7,
    };
    let vol = generate_phantom(&scene, &acq, &GammaVariateParams::default(), &nm)?;
    let cfg = RegistrationConfig::default();
    let (registered, log) = register_timeseries(&vol, 0, &cfg)?;
    let recovered = log
        .entries
        .iter()
        .zip(&schedule)
        .filter(|(e, s)| (e.dx, e.dy) == **s)
        .count();
    let reference = registered.frame(0, 0);
    let mut residual = 0;
    for t in 0..acq.nt {
        if estimate_shift(&registered.frame(0, t), &reference, &cfg)? != (0, 0) {
            residual += 1;
        }
    }
    let max = schedule
        .iter()
        .map(|(x, y)| x.abs().max(y.abs()))
        .max()
        .unwrap_or(0);
    Ok(Outcome {
        pass: recovered == acq.nt && residual == 0,
        detail: format!(
            "{recovered}/{} frames recovered exactly (shifts up to {max} px), {residual} frames with residual shift",
            acq.nt
        ),
    })
}

fn a8(_: &Path) -> ctperf::Result<Outcome> {
    let sp = [1.0; 3];
    let m = |bits: &[u8]| BinaryMask::new([bits.len(), 1, 1], sp, bits.to_vec());
    let a = m(&[1, 1, 1, 1, 0, 0, 0, 0])?;
    let b = m(&[0, 0, 1, 1, 1, 1, 0, 0])?;
    let c = m(&[0, 0, 0, 0, 0, 0, 1, 1])?;
    let xs = [1.0, 2.0, 3.0];
    let ys = [2.0, 4.0, 6.1];
    // two-pass oracle
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let oracle = sxy / (sxx * syy).sqrt();
    let units = [
        dice(&a, &a)? == Some(1.0),
        dice(&a, &c)? == Some(0.0),
        dice(&a, &b)? == Some(0.5),
        pearson(&xs, &xs)? == 1.0,
        pearson(&xs, &[-1.0, -2.0, -3.0])? == -1.0,
        (pearson(&xs, &ys)? - oracle).abs() <= 1e-12,
    ];
    let unit_pass = units.iter().filter(|&&u| u).count();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut symmetric = 0;
    let mut invariant = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200usize);
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let x: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pa))).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(pb))).collect();
        let (mx, my) = (m(&x)?, m(&y)?);
        let d = dice(&mx, &my)?;
        symmetric += usize::from(d == dice(&my, &mx)?);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let px: Vec<u8> = perm.iter().map(|&i| x[i]).collect();
        let py: Vec<u8> = perm.iter().map(|&i| y[i]).collect();
        invariant += usize::from(d == dice(&m(&px)?, &m(&py)?)?);
    }
    Ok(Outcome {
        pass: unit_pass == units.len() && symmetric == 1000 && invariant == 1000,
        detail: format!(
            "{unit_pass}/{} unit identities, symmetry {symmetric}/1000, permutation invariance {invariant}/1000",
            units.len()
        ),
    })
}

fn tree_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
                // both carry thread counts or timings
                if name == "run.json" || name == "fit_summary.json" {
                    continue;
                }
                let rel = path.strip_prefix(root).expect("inside root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    out
}

fn a9(out: &Path) -> ctperf::Result<Outcome> {
    let run = |name: &str, threads: &str| -> (i32, PathBuf) {
        let dir = out.join("a9").join(name);
        let d = dir.to_str().expect("utf-8 path").to_string();
        let code = ctperf::cli::run([
            "ctperf",
            "--seed",
            "3",
            "--threads",
            threads,
            "--out-dir",
            &d,
            "pipeline",
            "--train-cases",
            "4",
            "--val-cases",
            "2",
            "--test-cases",
            "3",
            "--max-epochs",
            "4",
        ]);
        (code, dir)
    };
    let (c1, d1) = run("first", "1");
    let (c2, d2) = run("second", "1");
    let (c8, d8) = run("eight_threads", "8");
    if (c1, c2, c8) != (0, 0, 0) {
        return Ok(Outcome {
            pass: false,
            detail: format!("pipeline exit codes {c1}, {c2}, {c8}"),
        });
    }
    let (t1, t2, t8) = (tree_files(&d1), tree_files(&d2), tree_files(&d8));
    let weights = t1
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "weights"))
        .count();
    let maps = t1
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "f32raw"))
        .count();
    let same_seed = t1 == t2;
    let threads = t1 == t8;
    Ok(Outcome {
        pass: same_seed && threads && weights == 1 && t1.contains_key(Path::new("report/report.json")),
        detail: format!(
            "{} artifacts ({maps} raw volumes/maps, {weights} weight file, reports, history): repeat run identical {same_seed}, 1 vs 8 threads identical {threads}",
            t1.len()
        ),
    })
}

fn a10(_: &Path) -> ctperf::Result<Outcome> {
    // compile-time: inference takes a model and a volume, nothing else
    let entry: fn(&Regressor, &TimeSeriesVolume) -> ctperf::Result<MapSet> = infer;
    let help = {
        use clap::CommandFactory;
        let mut cmd = ctperf::cli::Cli::command();
        let sub = cmd
            .find_subcommand_mut("infer")
            .expect("infer subcommand")
            .render_long_help()
            .to_string()
            .to_lowercase();
        sub
    };
    let help_clean = !help.contains("aif") && !help.contains("arterial");
    let model = Regressor::new(UNetConfig::desk(89), 0)?;
    let (_, vol) = noiseless(3)?;
    let before = aif_extraction_count();
    let maps = entry(&model, &vol)?;
    let after = aif_extraction_count();
    let kinds_ok = maps.kinds() == vec![MapKind::Cbv, MapKind::Cbf, MapKind::Ttp];
    Ok(Outcome {
        pass: help_clean && before == after && kinds_ok,
        detail: format!(
            "signature fn(&Regressor, &TimeSeriesVolume); infer help free of input-function flags {help_clean}; arterial extractions during inference {}; outputs {:?}",
            after - before,
            maps.kinds().iter().map(|k| k.tag()).collect::<Vec<_>>()
        ),
    })
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
    ];
    let selected: Option<Vec<String>> = std::env::var("CTPERF_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).collect());
    let keep = std::env::var_os("CTPERF_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let out = keep.as_deref().unwrap_or(tmp.path());
    let (mut passed, mut ran) = (0, 0);
    for (name, check) in checks {
        if selected
            .as_ref()
            .is_some_and(|s| !s.iter().any(|t| t == name))
        {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (ok, detail) = match check(out) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        passed += usize::from(ok);
        println!(
            "{name:<4}{} {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{ran} passed");
}
