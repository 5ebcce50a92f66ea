//! Acceptance suite. Runs without the libtest harness so that the criteria
//! execute one after another (timings are not skewed by parallel tests) and
//! every PASS/FAIL line reaches stdout. Pass criterion names such as `c3 c7`
//! to run a subset.

use std::time::Instant;

use mipcam::localization::{backproject, dice, refine_mask, BinaryMask2D, BinaryMask3D, Connectivity};
use mipcam::model::{compute_cam, FeatureMap};
use mipcam::phantom::generate_cases;
use mipcam::pipeline::crossval::{cross_validate, CrossValOptions, RunReport};
use mipcam::pipeline::gradcheck::{run_gradcheck, GradCheckConfig};
use mipcam::pipeline::train::{prepare_cases, PreparedCase};
use mipcam::pipeline::{ExperimentConfig, TrainConfig};
use mipcam::volume::{mip_project, PetVolume, Spacing, View};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn c1_gradcheck() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig { instances: 5, ..GradCheckConfig::default() };
    let report = match run_gradcheck(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck failed to run: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let [l1, l2, comb] = report.max_rel_error;
    let kinks: usize = report.instances.iter().map(|i| i.kink_skipped).sum();
    let passed = report.instances.len() >= 5 && l2 < 1e-4 && comb < 1e-4 && l1 < 1e-4 && secs < 60.0;
    outcome(
        passed,
        format!(
            "{} instances, max rel error loss1 {l1:.2e} loss2 {l2:.2e} combined {comb:.2e}, \
             {kinks} kink-skipped params, {} degenerate instances replaced, {secs:.1}s",
            report.instances.len(),
            report.degenerate_skipped.len()
        ),
    )
}

fn c2_cam_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut peak_failures, mut degenerate, mut worst_scale) = (0usize, 0usize, 0.0f64);
    for _ in 0..1000 {
        let c = rng.random_range(1..12);
        let h = rng.random_range(1..9);
        let w = rng.random_range(1..9);
        // Feature maps are post-activation, so mostly non-negative with a
        // little negative tail as SiLU allows.
        let feats = FeatureMap { data: Array3::from_shape_fn((c, h, w), |_| rng.random_range(-0.28..3.0)) };
        let wc: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cam = compute_cam(&feats, &wc, true).unwrap();
        let any_positive = (0..h).any(|i| (0..w).any(|j| (0..c).map(|k| wc[k] * feats.data[[k, i, j]]).sum::<f64>() > 0.0));
        if any_positive {
            if cam.peak() != 1.0 || cam.degenerate {
                peak_failures += 1;
            }
        } else {
            degenerate += 1;
            if !cam.degenerate || cam.data.iter().any(|v| *v != 0.0) {
                peak_failures += 1;
            }
        }
        let s = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = wc.iter().map(|v| v * s).collect();
        let cam_s = compute_cam(&feats, &scaled, true).unwrap();
        let diff = cam.data.iter().zip(cam_s.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_scale = worst_scale.max(diff);
    }
    outcome(
        peak_failures == 0 && worst_scale <= 1e-6,
        format!("1000 maps ({degenerate} with no positive activation), {peak_failures} peak failures, max scale drift {worst_scale:.2e}"),
    )
}

fn c3_backprojection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatches, mut subset_failures, mut equality_failures) = (0usize, 0usize, 0usize);
    for _ in 0..200 {
        let density: f64 = rng.random_range(0.05..0.9);
        let cor = Array2::from_shape_fn((8, 8), |_| rng.random_bool(density));
        let sag = Array2::from_shape_fn((8, 8), |_| rng.random_bool(density));
        let m = backproject(
            &BinaryMask2D { data: cor.clone(), view: View::Coronal },
            &BinaryMask2D { data: sag.clone(), view: View::Sagittal },
        )
        .unwrap();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    if m.data[[x, y, z]] != (cor[[x, z]] && sag[[y, z]]) {
                        mismatches += 1;
                    }
                }
            }
        }
        for z in 0..8 {
            let both = (0..8).any(|x| cor[[x, z]]) && (0..8).any(|y| sag[[y, z]]);
            for u in 0..8 {
                let cor_sil = (0..8).any(|y| m.data[[u, y, z]]);
                let sag_sil = (0..8).any(|x| m.data[[x, u, z]]);
                if (cor_sil && !cor[[u, z]]) || (sag_sil && !sag[[u, z]]) {
                    subset_failures += 1;
                }
                if both && (cor_sil != cor[[u, z]] || sag_sil != sag[[u, z]]) {
                    equality_failures += 1;
                }
            }
        }
    }
    outcome(
        mismatches + subset_failures + equality_failures == 0,
        format!("200 pairs, {mismatches} voxel mismatches, {subset_failures} subset violations, {equality_failures} equality violations"),
    )
}

fn c4_mip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0usize;
    for _ in 0..100 {
        let (nx, ny, nz) = (rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20));
        let data = Array3::from_shape_fn((nx, ny, nz), |_| rng.random_range(0.0f32..25.0));
        let vol = PetVolume::new(data.clone(), Spacing([1.0, 1.0, 1.0])).unwrap();
        let vmax = data.iter().copied().fold(f32::MIN, f32::max);
        let cor = mip_project(&vol, View::Coronal).unwrap();
        let sag = mip_project(&vol, View::Sagittal).unwrap();
        for x in 0..nx {
            for z in 0..nz {
                let m = (0..ny).map(|y| data[[x, y, z]]).fold(f32::MIN, f32::max);
                failures += (cor.data[[x, z]] != m) as usize;
            }
        }
        for y in 0..ny {
            for z in 0..nz {
                let m = (0..nx).map(|x| data[[x, y, z]]).fold(f32::MIN, f32::max);
                failures += (sag.data[[y, z]] != m) as usize;
            }
        }
        failures += (cor.max_value() != vmax) as usize + (sag.max_value() != vmax) as usize;
    }
    outcome(failures == 0, format!("100 volumes, {failures} disagreements with brute force"))
}

struct Benchmark {
    cases: Vec<PreparedCase>,
    cfg: ExperimentConfig,
}

impl Benchmark {
    fn new() -> Self {
        let cfg = ExperimentConfig::standard_benchmark();
        let raw = generate_cases(&cfg.phantom, cfg.n_per_class).expect("benchmark phantoms");
        let cases = prepare_cases(&raw, &cfg.train).expect("prepared benchmark");
        Benchmark { cases, cfg }
    }

    fn run(&self, lambda: f64) -> (RunReport, f64) {
        let tcfg = TrainConfig { lambda, ..self.cfg.train.clone() };
        let start = Instant::now();
        let report = cross_validate(&self.cases, &tcfg, self.cfg.folds, CrossValOptions::default()).expect("crossval");
        (report, start.elapsed().as_secs_f64())
    }
}

fn record_lines(report: &RunReport) -> Vec<String> {
    report.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

fn c5_benchmark(bench: &Benchmark, with: &(RunReport, f64)) -> Outcome {
    let (without, t0) = bench.run(0.0);
    let (with, t1) = (&with.0, with.1);
    let (d1, d0) = (with.aggregate.dice_mean, without.aggregate.dice_mean);
    let acc = with.aggregate.accuracy;
    let total = t0 + t1;
    outcome(
        d1 >= d0 + 0.05 && acc >= 0.95 && total <= 1800.0,
        format!(
            "{} cases, dice λ=1 {d1:.3}±{:.3} vs λ=0 {d0:.3}±{:.3} (gain {:+.3}), accuracy λ=1 {acc:.3} λ=0 {:.3}, {total:.0}s",
            with.aggregate.n,
            with.aggregate.dice_std,
            without.aggregate.dice_std,
            d1 - d0,
            without.aggregate.accuracy
        ),
    )
}

fn c6_determinism(bench: &Benchmark, first: &(RunReport, f64)) -> Outcome {
    let (second, _) = bench.run(1.0);
    let (a, b) = (record_lines(&first.0), record_lines(&second));
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    outcome(differing == 0 && !a.is_empty(), format!("{} records compared, {differing} differ", a.len()))
}

fn c7_dice_and_refine() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0usize;
    for _ in 0..1000 {
        let shape = (rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..10));
        let (pa, pb): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = BinaryMask3D::new(Array3::from_shape_fn(shape, |_| rng.random_bool(pa)));
        let b = BinaryMask3D::new(Array3::from_shape_fn(shape, |_| rng.random_bool(pb)));
        let ab = dice(&a, &b).unwrap().value;
        let ba = dice(&b, &a).unwrap().value;
        let aa = dice(&a, &a).unwrap().value;
        failures += (ab != ba) as usize + !(0.0..=1.0).contains(&ab) as usize + (aa != 1.0) as usize;

        let vol = PetVolume::new(Array3::from_shape_fn(shape, |_| rng.random_range(0.0f32..10.0)), Spacing([1.0; 3])).unwrap();
        let frac = rng.random_range(0.0..=1.0);
        let refined = refine_mask(&a, &vol, frac, Connectivity::Six).unwrap();
        failures += !refined.is_subset_of(&a) as usize;
    }
    outcome(failures == 0, format!("1000 pairs, {failures} property violations"))
}

fn report(name: &str, title: &str, o: &Outcome) {
    println!("{} {name} {title}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('c')).collect();
    let wanted = |name: &str| args.is_empty() || args.iter().any(|a| a == name);
    let mut all = true;
    let mut check = |name: &str, title: &str, f: &dyn Fn() -> Outcome| {
        if wanted(name) {
            let o = f();
            report(name, title, &o);
            all &= o.passed;
        }
    };
    check("c1", "gradient check", &c1_gradcheck);
    check("c2", "CAM peak and scale invariance", &c2_cam_normalization);
    check("c3", "back-projection", &c3_backprojection);
    check("c4", "maximum-intensity projection", &c4_mip);
    if wanted("c5") || wanted("c6") {
        let bench = Benchmark::new();
        let with = bench.run(1.0);
        check("c5", "benchmark cross-validation", &|| c5_benchmark(&bench, &with));
        check("c6", "reproducibility", &|| c6_determinism(&bench, &with));
    }
    check("c7", "Dice and refinement", &c7_dice_and_refine);
    if !all {
        std::process::exit(1);
    }
}

