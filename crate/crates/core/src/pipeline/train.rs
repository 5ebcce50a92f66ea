//! Data preparation, the joint objective, and the optimisation loop.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdamConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::{cam_distance_loss, cross_entropy, LossBreakdown};
use crate::model::{Architecture, CamGrad, ClassifierModel, Upsampler};
use crate::nn::Real;
use crate::phantom::{Case, GroundTruth};
use crate::volume::{
    mip_project, normalize_suv, project_center, resample_grid, resample_point, resample_volume, PetVolume, Point2,
    Spacing, View,
};

/// What the classifier sees for one case: both projections, the projected
/// center in each, and the image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub images: [Array2<f32>; 2],
    pub centers: [Point2; 2],
    pub label: usize,
}

impl TrainingExample {
    pub fn image(&self, view: View) -> &Array2<f32> {
        &self.images[view as usize]
    }
}

/// Build the two-view example from a resampled, SUV-normalized volume.
pub fn make_training_example(id: &str, vol: &PetVolume, gt: &GroundTruth) -> Result<TrainingExample> {
    let shape = vol.shape();
    let mut images = Vec::with_capacity(2);
    let mut centers = Vec::with_capacity(2);
    for view in View::BOTH {
        images.push(mip_project(vol, view)?.data);
        centers.push(project_center(gt.center, shape, view)?);
    }
    let [a, b]: [Array2<f32>; 2] = images.try_into().expect("two views");
    Ok(TrainingExample { id: id.to_string(), images: [a, b], centers: [centers[0], centers[1]], label: gt.label })
}

/// A case after resampling and normalization, ready for training or scoring.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub example: TrainingExample,
    pub volume: PetVolume,
    /// `None` when no ground-truth mask is available; such cases cannot be scored.
    pub truth_mask: Option<Array3<bool>>,
}

pub fn prepare_case(case: &Case, cfg: &TrainConfig) -> Result<PreparedCase> {
    let target = Spacing(cfg.target_spacing);
    let src = case.volume.spacing();
    let (resampled, truth) = if src == target {
        (case.volume.clone(), case.truth.clone())
    } else {
        log::debug!("{}: resampling from {:?}", case.id, src.0);
        let v = resample_volume(&case.volume, target)?;
        let truth = GroundTruth {
            mask: resample_grid(&case.truth.mask, src, target)?,
            center: resample_point(case.truth.center, src, target, v.shape()),
            label: case.truth.label,
        };
        (v, truth)
    };
    let volume = normalize_suv(&resampled, cfg.max_suv)?;
    let example = make_training_example(&case.id, &volume, &truth)?;
    Ok(PreparedCase { example, volume, truth_mask: Some(truth.mask) })
}

pub fn prepare_cases(cases: &[Case], cfg: &TrainConfig) -> Result<Vec<PreparedCase>> {
    cases.iter().map(|c| prepare_case(c, cfg)).collect()
}

/// One image of a batch: pixels, projected center, label.
pub struct ImageSample<'a, T> {
    pub image: &'a Array2<T>,
    pub center: Point2,
    pub label: usize,
}

/// Loss values and gradients for one mini-batch.
pub struct BatchObjective<T> {
    pub loss1: f64,
    pub loss2: f64,
    /// Gradient of `w1 * loss1 + w2 * loss2`.
    pub grads: Vec<T>,
    pub per_image: Vec<(f64, f64)>,
    pub degenerate: usize,
    /// Sign pattern of every raw CAM value (positive or not), image by image.
    pub cam_signs: Vec<bool>,
}

/// Mean cross-entropy and mean distance loss over all images, with the
/// gradient of `w1 * loss1 + w2 * loss2`. The CAM is taken for each image's
/// ground-truth class.
pub fn batch_objective<T: Real>(
    model: &ClassifierModel<T>,
    batch: &[ImageSample<'_, T>],
    w1: f64,
    w2: f64,
) -> Result<BatchObjective<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let arch = model.architecture();
    let [fh, fw] = arch.feature_shape();
    let upsampler = Upsampler::<T>::new((fh, fw), (arch.input_shape[0], arch.input_shape[1]))?;
    let n = T::lit(batch.len() as f64);
    let (s1, s2) = (T::lit(w1) / n, T::lit(w2) / n);

    let mut grads = vec![T::zero(); model.num_params()];
    let mut per_image = Vec::with_capacity(batch.len());
    let mut cam_signs = Vec::new();
    let (mut sum1, mut sum2, mut degenerate) = (0.0, 0.0, 0);
    for sample in batch {
        let pass = model.forward_image(sample.image, true)?;
        let (l1, d_logits) = cross_entropy(&pass.logits, sample.label)?;
        let raw = model.raw_cam(&pass, sample.label);
        cam_signs.extend(raw.iter().map(|r| *r > T::zero()));
        let (l2, d_raw) = cam_distance_loss(&raw, &upsampler, sample.center)?;
        if l2.degenerate {
            degenerate += 1;
        }
        let d_logits: Vec<T> = d_logits.into_iter().map(|g| g * s1).collect();
        let scaled = d_raw.mapv(|g| g * s2);
        let cam = (w2 != 0.0).then_some(CamGrad { class: sample.label, d_raw: &scaled });
        model.backward(&pass, &d_logits, cam, &mut grads);

        let (l1, l2) = (l1.to_f64().unwrap_or(f64::NAN), l2.value.to_f64().unwrap_or(f64::NAN));
        sum1 += l1;
        sum2 += l2;
        per_image.push((l1, l2));
    }
    let count = batch.len() as f64;
    Ok(BatchObjective { loss1: sum1 / count, loss2: sum2 / count, grads, per_image, degenerate, cam_signs })
}

/// First-order adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Adam { cfg, lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let c1 = 1.0 - (self.cfg.beta1 as f32).powi(self.t);
        let c2 = 1.0 - (self.cfg.beta2 as f32).powi(self.t);
        let (lr, eps) = (self.lr as f32, self.cfg.eps as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss1: f64,
    pub loss2: f64,
    pub combined: f64,
    pub lambda: f64,
    pub degenerate_cams: usize,
}

impl StepRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown { loss1: self.loss1, loss2: self.loss2, combined: self.combined, lambda: self.lambda }
    }
}

pub type History = Vec<StepRecord>;

pub fn architecture_for(cfg: &TrainConfig, input_shape: [usize; 2]) -> Architecture {
    Architecture::with_base_width(input_shape, 2, cfg.base_width)
}

/// Train on the given examples. Each mini-batch holds `batch_size` cases,
/// i.e. twice as many images; both views share the one classifier.
pub fn train(examples: &[TrainingExample], cfg: &TrainConfig) -> Result<(ClassifierModel<f32>, History)> {
    cfg.validate()?;
    let first = examples.first().ok_or_else(|| Error::InvalidArgument("no training examples".into()))?;
    let (h, w) = first.images[0].dim();
    for ex in examples {
        if ex.images.iter().any(|im| im.dim() != (h, w)) {
            return Err(Error::Shape(format!("{}: all projections must be {h}x{w}", ex.id)));
        }
    }
    let mut model = ClassifierModel::<f32>::new(architecture_for(cfg, [h, w]), cfg.seed)?;
    let mut adam = Adam::new(model.num_params(), cfg.learning_rate, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageSample<'_, f32>> = chunk
                .iter()
                .flat_map(|&i| {
                    let ex = &examples[i];
                    (0..2).map(move |v| ImageSample { image: &ex.images[v], center: ex.centers[v], label: ex.label })
                })
                .collect();
            let obj = batch_objective(&model, &batch, 1.0, cfg.lambda)?;
            let rec = LossBreakdown::new(obj.loss1, obj.loss2, cfg.lambda);
            if !rec.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
                let ids: Vec<&str> = chunk.iter().map(|&i| examples[i].id.as_str()).collect();
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "case_ids": ids,
                    "per_image_losses": obj.per_image,
                    "loss1": obj.loss1,
                    "loss2": obj.loss2,
                });
                return Err(Error::NonFiniteLoss { step, dump: dump.to_string() });
            }
            adam.step(model.params_mut(), &obj.grads);
            history.push(StepRecord {
                epoch,
                step,
                loss1: rec.loss1,
                loss2: rec.loss2,
                combined: rec.combined,
                lambda: rec.lambda,
                degenerate_cams: obj.degenerate,
            });
            step += 1;
        }
        if let Some(last) = history.last() {
            log::debug!("epoch {epoch}: loss1 {:.4} loss2 {:.4}", last.loss1, last.loss2);
        }
    }
    Ok((model, history))
}
