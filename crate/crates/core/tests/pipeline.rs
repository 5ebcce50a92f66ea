//! End-to-end runs on small phantom sets.

use mipcam::io::{read_jsonl, read_mask};
use mipcam::localization::{dice, BinaryMask3D};
use mipcam::model::ClassifierModel;
use mipcam::phantom::{generate_cases, generate_dataset, load_dataset};
use mipcam::pipeline::crossval::{cross_validate, write_run, CrossValOptions, FoldSplit, RECORDS_FILE};
use mipcam::pipeline::eval::{evaluate, CaseRecord};
use mipcam::pipeline::report::{load_run, render_report};
use mipcam::pipeline::train::{architecture_for, prepare_cases, train};
use mipcam::pipeline::{ExperimentConfig, TrainConfig};
use mipcam::volume::Spacing;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::standard_benchmark();
    cfg.n_per_class = 10;
    cfg.train.epochs = 40;
    cfg
}

#[test]
fn twenty_case_split() {
    let cfg = small_config();
    let cases = generate_cases(&cfg.phantom, cfg.n_per_class).unwrap();
    let labels: Vec<usize> = cases.iter().map(|c| c.truth.label).collect();
    let split = FoldSplit::stratified(&labels, 5, cfg.train.seed).unwrap();
    let mut seen = vec![0; 20];
    for f in &split.folds {
        assert_eq!(f.test.len(), 4);
        assert_eq!(f.test.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert_eq!(f.train.len() + f.test.len(), 20);
        for &i in &f.test {
            seen[i] += 1;
            assert!(!f.train.contains(&i));
        }
    }
    assert!(seen.iter().all(|&n| n == 1));
}

#[test]
fn untrained_model_is_near_chance() {
    let mut cfg = ExperimentConfig::standard_benchmark();
    cfg.n_per_class = 50;
    let cases = prepare_cases(&generate_cases(&cfg.phantom, cfg.n_per_class).unwrap(), &cfg.train).unwrap();
    let shape = cases[0].example.images[0].dim();
    let model = ClassifierModel::<f32>::new(architecture_for(&cfg.train, [shape.0, shape.1]), 1).unwrap();
    let records = evaluate(&model, &cases, &cfg.train).unwrap();
    assert_eq!(records.len(), 100);
    let acc = records.iter().filter(|r| r.correct()).count() as f64 / 100.0;
    assert!((0.35..=0.65).contains(&acc), "untrained accuracy {acc}");
}

#[test]
fn small_run_fits_training_set() {
    let cfg = small_config();
    let cases = prepare_cases(&generate_cases(&cfg.phantom, cfg.n_per_class).unwrap(), &cfg.train).unwrap();
    let examples: Vec<_> = cases.iter().map(|c| c.example.clone()).collect();
    let (model, history) = train(&examples, &cfg.train).unwrap();
    assert!(history.iter().all(|s| s.breakdown().is_finite()));
    let records = evaluate(&model, &cases, &cfg.train).unwrap();
    let acc = records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64;
    assert_eq!(acc, 1.0, "training accuracy {acc}");
}

/// Crossval from a dataset on disk, written out, then every Dice value
/// recomputed from the exported masks and the dataset's own masks.
#[test]
fn records_recompute_from_files() {
    let cfg = small_config();
    let tcfg = TrainConfig { epochs: 5, ..cfg.train.clone() };
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    generate_dataset(&cfg.phantom, cfg.n_per_class, &data).unwrap();
    let loaded = load_dataset(&data).unwrap();
    let cases = prepare_cases(&loaded, &tcfg).unwrap();
    let opts = CrossValOptions { overlay_samples: 2, keep_masks: true };
    let report = cross_validate(&cases, &tcfg, 5, opts).unwrap();
    let run = root.path().join("run");
    write_run(&report, &run, Spacing(tcfg.target_spacing)).unwrap();

    let records: Vec<CaseRecord> = read_jsonl(&run.join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 20);
    for r in &records {
        let pred = read_mask(&run.join("masks").join(format!("{}_pred.nii.gz", r.case_id))).unwrap();
        let case = loaded.iter().find(|c| c.id == r.case_id).unwrap();
        let d = dice(&BinaryMask3D::new(pred.clone()), &BinaryMask3D::new(case.truth.mask.clone())).unwrap();
        assert!((d.value - r.dice).abs() < 1e-12, "{}: {} vs {}", r.case_id, d.value, r.dice);
        assert_eq!(pred.iter().filter(|b| **b).count(), r.predicted_voxels);
    }

    let back = load_run(&run).unwrap();
    assert_eq!(back.records, report.records);
    let files = render_report(&[back], &root.path().join("report"), 1).unwrap();
    assert!(files.summary.exists());
    assert_eq!(files.figures.len(), 4);
}
