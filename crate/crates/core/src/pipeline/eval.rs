//! End-to-end scoring of a trained model: projections → CAMs → 2D masks →
//! back-projection → refinement → Dice.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::PreparedCase;
use crate::error::Result;
use crate::localization::{backproject, cam_to_mask, dice, refine_mask, BinaryMask3D};
use crate::loss::softmax;
use crate::model::{upsample_cam, CamMap, ClassifierModel};
use crate::volume::{PetVolume, Point2, View};

/// Per-case outcome. Serialized one per line into `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub fold: Option<usize>,
    pub label: usize,
    pub predicted: usize,
    /// View-averaged class probabilities.
    pub probabilities: Vec<f64>,
    pub dice: f64,
    /// Dice of the raw conjunction before refinement.
    pub dice_backprojected: f64,
    pub both_empty: bool,
    pub threshold: f64,
    pub suv_frac: f64,
    pub views: Vec<View>,
    pub degenerate_cams: Vec<bool>,
    pub predicted_voxels: usize,
    pub truth_voxels: usize,
}

impl CaseRecord {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

/// Intermediate products of scoring one case, kept for overlays and mask export.
#[derive(Clone, Debug)]
pub struct CaseArtifacts {
    /// Coarse (feature-resolution) CAMs per view.
    pub cams: [CamMap<f32>; 2],
    pub mask: BinaryMask3D,
}

/// Threshold both image-resolution CAMs, intersect in 3D, refine against uptake.
pub fn localize(cams: &[CamMap<f32>; 2], volume: &PetVolume, cfg: &TrainConfig) -> Result<(BinaryMask3D, BinaryMask3D)> {
    let coronal = cam_to_mask(&cams[0], cfg.threshold_frac)?;
    let sagittal = cam_to_mask(&cams[1], cfg.threshold_frac)?;
    let mut raw = backproject(&coronal, &sagittal)?;
    raw.provenance.threshold = Some(cfg.threshold_frac);
    let refined = refine_mask(&raw, volume, cfg.suv_frac, cfg.connectivity)?;
    Ok((raw, refined))
}

/// Score one prepared case. Returns `None` (with a warning) when there is no
/// ground truth to compare against.
pub fn evaluate_case(
    model: &ClassifierModel<f32>,
    case: &PreparedCase,
    cfg: &TrainConfig,
    fold: Option<usize>,
) -> Result<Option<(CaseRecord, CaseArtifacts)>> {
    let Some(truth) = &case.truth_mask else {
        log::warn!("{}: no ground truth, skipping", case.example.id);
        return Ok(None);
    };
    let ex = &case.example;
    let mut probs = vec![0.0; model.num_classes()];
    let mut passes = Vec::with_capacity(2);
    for image in &ex.images {
        let pass = model.forward_image(image, false)?;
        for (p, q) in probs.iter_mut().zip(softmax(&pass.logits)) {
            *p += q as f64 / 2.0;
        }
        passes.push(pass);
    }
    let predicted = argmax(&probs);

    let mut coarse = Vec::with_capacity(2);
    let mut fine = Vec::with_capacity(2);
    for (pass, view) in passes.iter().zip(View::BOTH) {
        let cam = model.cam(pass, predicted).in_view(view);
        fine.push(upsample_cam(&cam, ex.image(view).dim())?);
        coarse.push(cam);
    }
    let fine: [CamMap<f32>; 2] = fine.try_into().expect("two views");
    let (raw, refined) = localize(&fine, &case.volume, cfg)?;
    let gt = BinaryMask3D::new(truth.clone());
    let score = dice(&refined, &gt)?;
    if score.both_empty {
        log::warn!("{}: prediction and ground truth both empty", ex.id);
    }
    let record = CaseRecord {
        case_id: ex.id.clone(),
        fold,
        label: ex.label,
        predicted,
        probabilities: probs,
        dice: score.value,
        dice_backprojected: dice(&raw, &gt)?.value,
        both_empty: score.both_empty,
        threshold: cfg.threshold_frac,
        suv_frac: cfg.suv_frac,
        views: View::BOTH.to_vec(),
        degenerate_cams: coarse.iter().map(|c| c.degenerate).collect(),
        predicted_voxels: refined.count(),
        truth_voxels: gt.count(),
    };
    let cams: [CamMap<f32>; 2] = coarse.try_into().expect("two views");
    Ok(Some((record, CaseArtifacts { cams, mask: refined })))
}

/// Score every case that has ground truth.
pub fn evaluate(model: &ClassifierModel<f32>, cases: &[PreparedCase], cfg: &TrainConfig) -> Result<Vec<CaseRecord>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        if let Some((rec, _)) = evaluate_case(model, case, cfg, None)? {
            out.push(rec);
        }
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Data needed to draw one CAM/mask overlay without re-reading the volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlaySample {
    pub case_id: String,
    pub view: View,
    pub mip: Array2<f32>,
    pub cam: Array2<f32>,
    /// Logical-or projection of the ground-truth mask.
    pub truth_silhouette: Array2<bool>,
    /// Logical-or projection of the predicted 3D mask.
    pub predicted_silhouette: Array2<bool>,
    pub center: Point2,
}

/// Logical-or projection of a 3D mask along a view's collapsed axis.
pub fn silhouette(mask: &Array3<bool>, view: View) -> Array2<bool> {
    mask.fold_axis(view.projected_axis(), false, |acc, v| *acc || *v)
}

pub fn overlay_samples(case: &PreparedCase, artifacts: &CaseArtifacts) -> Vec<OverlaySample> {
    let truth = case.truth_mask.as_ref();
    View::BOTH
        .iter()
        .enumerate()
        .map(|(i, &view)| OverlaySample {
            case_id: case.example.id.clone(),
            view,
            mip: case.example.images[i].clone(),
            cam: artifacts.cams[i].data.clone(),
            truth_silhouette: truth
                .map(|m| silhouette(m, view))
                .unwrap_or_else(|| Array2::from_elem(case.example.images[i].dim(), false)),
            predicted_silhouette: silhouette(&artifacts.mask.data, view),
            center: case.example.centers[i],
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
