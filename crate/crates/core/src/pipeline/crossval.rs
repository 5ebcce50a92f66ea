//! Stratified k-fold cross-validation and the on-disk run layout.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate_case, mean_std, overlay_samples, CaseRecord, OverlaySample};
use super::train::{train, History, PreparedCase};
use crate::error::{Error, Result};
use crate::io::{write_json, write_jsonl, write_mask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    /// Shuffle each class with `seed`, then deal its members round-robin into
    /// `k` folds so every fold keeps the class balance.
    pub fn stratified(labels: &[usize], k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least two folds, got {k}")));
        }
        let classes: BTreeSet<usize> = labels.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buckets = vec![Vec::new(); k];
        let mut next = 0;
        for class in &classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *class).collect();
            members.shuffle(&mut rng);
            for i in members {
                buckets[next % k].push(i);
                next += 1;
            }
        }
        let mut folds = Vec::with_capacity(k);
        for (f, bucket) in buckets.iter().enumerate() {
            let mut test = bucket.clone();
            test.sort_unstable();
            let test_classes: BTreeSet<usize> = test.iter().map(|&i| labels[i]).collect();
            if test_classes.len() < 2 {
                return Err(Error::Stratification(format!(
                    "fold {f} of {k} would hold {} class(es); {} cases across {} classes is too few",
                    test_classes.len(),
                    labels.len(),
                    classes.len()
                )));
            }
            let mut train: Vec<usize> = buckets.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, b)| b.iter().copied()).collect();
            train.sort_unstable();
            folds.push(Fold { train, test });
        }
        Ok(FoldSplit { k, folds })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub accuracy: f64,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub dice_mean: f64,
    /// Sample standard deviation over cases.
    pub dice_std: f64,
    pub accuracy: f64,
    pub both_empty: usize,
}

impl Aggregate {
    pub fn from_records(records: &[CaseRecord]) -> Self {
        let (dice_mean, dice_std) = mean_std(records.iter().map(|r| r.dice));
        let correct = records.iter().filter(|r| r.correct()).count();
        Aggregate {
            n: records.len(),
            dice_mean,
            dice_std,
            accuracy: correct as f64 / records.len().max(1) as f64,
            both_empty: records.iter().filter(|r| r.both_empty).count(),
        }
    }
}

/// Everything produced by one cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: TrainConfig,
    pub split: FoldSplit,
    pub folds: Vec<FoldSummary>,
    pub records: Vec<CaseRecord>,
    pub aggregate: Aggregate,
    pub samples: Vec<OverlaySample>,
    #[serde(skip)]
    pub masks: Vec<(String, ndarray::Array3<bool>)>,
}

pub fn method_name(lambda: f64) -> String {
    format!("lambda={lambda}")
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CrossValOptions {
    /// How many held-out cases (in case order) keep overlay data.
    pub overlay_samples: usize,
    /// Keep the refined predicted masks for export.
    pub keep_masks: bool,
}

/// Train on k−1 folds, score the held-out fold, repeat for every fold.
pub fn cross_validate(cases: &[PreparedCase], cfg: &TrainConfig, k: usize, opts: CrossValOptions) -> Result<RunReport> {
    cfg.validate()?;
    let labels: Vec<usize> = cases.iter().map(|c| c.example.label).collect();
    let split = FoldSplit::stratified(&labels, k, cfg.seed)?;
    let mut records = Vec::with_capacity(cases.len());
    let mut folds = Vec::with_capacity(k);
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    for (f, fold) in split.folds.iter().enumerate() {
        let train_ids: BTreeSet<&str> = fold.train.iter().map(|&i| cases[i].example.id.as_str()).collect();
        if fold.test.iter().any(|&i| train_ids.contains(cases[i].example.id.as_str())) {
            return Err(Error::Validation(format!("fold {f}: a held-out case id also appears in training")));
        }
        let examples: Vec<_> = fold.train.iter().map(|&i| cases[i].example.clone()).collect();
        let (model, history) = train(&examples, cfg)?;
        let mut fold_records = Vec::with_capacity(fold.test.len());
        for &i in &fold.test {
            let Some((rec, art)) = evaluate_case(&model, &cases[i], cfg, Some(f))? else { continue };
            if samples.len() < 2 * opts.overlay_samples {
                samples.extend(overlay_samples(&cases[i], &art));
            }
            if opts.keep_masks {
                masks.push((rec.case_id.clone(), art.mask.data));
            }
            fold_records.push(rec);
        }
        let agg = Aggregate::from_records(&fold_records);
        log::info!("fold {f}: dice {:.3}±{:.3} accuracy {:.3}", agg.dice_mean, agg.dice_std, agg.accuracy);
        folds.push(FoldSummary {
            fold: f,
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            dice_mean: agg.dice_mean,
            dice_std: agg.dice_std,
            accuracy: agg.accuracy,
            history,
        });
        records.extend(fold_records);
    }
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let aggregate = Aggregate::from_records(&records);
    Ok(RunReport { method: method_name(cfg.lambda), config: cfg.clone(), split, folds, records, aggregate, samples, masks })
}

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Write `report.json`, `records.jsonl`, `metrics.jsonl` (one line per
/// optimisation step, tagged with its fold) and any kept masks.
pub fn write_run(report: &RunReport, out_dir: &Path, spacing: crate::volume::Spacing) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(REPORT_FILE), report)?;
    write_jsonl(&out_dir.join(RECORDS_FILE), &report.records)?;
    let metrics: Vec<serde_json::Value> = report
        .folds
        .iter()
        .flat_map(|f| {
            f.history.iter().map(move |s| {
                let mut v = serde_json::to_value(s).expect("step record serializes");
                v["fold"] = f.fold.into();
                v
            })
        })
        .collect();
    write_jsonl(&out_dir.join(METRICS_FILE), &metrics)?;
    if !report.masks.is_empty() {
        let dir = out_dir.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (id, mask) in &report.masks {
            write_mask(&dir.join(format!("{id}_pred.nii.gz")), mask, spacing)?;
        }
    }
    Ok(())
}
