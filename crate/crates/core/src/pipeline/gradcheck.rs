//! Central finite-difference check of the analytic gradients of the
//! classification, distance, and combined losses on tiny random models.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{batch_objective, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Architecture, ClassifierModel};
use crate::volume::{Point2, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub lambda: f64,
    pub eps: f64,
    pub tolerance: f64,
    /// Floor on the denominator of the relative error, so that gradients
    /// that are zero up to rounding do not divide by zero.
    pub denominator_floor: f64,
    pub input_shape: [usize; 2],
    pub widths: Vec<usize>,
    pub images_per_instance: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 5,
            seed: 0,
            lambda: 1.0,
            eps: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
            input_shape: [32, 48],
            widths: vec![2, 2, 3, 3, 4, 4, 4, 4],
            images_per_instance: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Classification,
    Distance,
    Combined,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Classification, Objective::Distance, Objective::Combined];

    fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            Objective::Classification => (1.0, 0.0),
            Objective::Distance => (0.0, 1.0),
            Objective::Combined => (1.0, lambda),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub instance: usize,
    pub objective: Objective,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub seed: u64,
    pub params: usize,
    /// Parameters whose ±eps perturbation moved a CAM value across zero,
    /// where the rectified map has a kink and the central difference is
    /// not a derivative. They are still checked for classification.
    pub kink_skipped: usize,
    pub max_rel_error: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub instances: Vec<InstanceResult>,
    /// Worst relative error per objective, in `Objective::ALL` order.
    pub max_rel_error: [f64; 3],
    pub passed: bool,
    pub offenders: Vec<Offender>,
    /// Seeds whose model produced an all-nonpositive CAM. The distance loss is
    /// flat there and its training gradient is a recovery pull, not a
    /// derivative, so such instances are replaced by fresh ones.
    pub degenerate_skipped: Vec<u64>,
    pub elapsed_secs: f64,
}

struct Instance {
    model: ClassifierModel<f64>,
    images: Vec<Array2<f64>>,
    centers: Vec<Point2>,
    labels: Vec<usize>,
}

impl Instance {
    fn random(cfg: &GradCheckConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::from_widths(cfg.input_shape, 2, &cfg.widths);
        let model = ClassifierModel::<f64>::new(arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9));
        let [h, w] = cfg.input_shape;
        let mut images = Vec::new();
        let mut centers = Vec::new();
        let mut labels = Vec::new();
        for i in 0..cfg.images_per_instance {
            images.push(Array2::from_shape_fn((h, w), |_| rng.random::<f64>()));
            let view = View::BOTH[i % 2];
            centers.push(Point2 { u: rng.random_range(0..h), v: rng.random_range(0..w), view });
            labels.push(rng.random_range(0..2));
        }
        Ok(Instance { model, images, centers, labels })
    }

    fn batch(&self) -> Vec<ImageSample<'_, f64>> {
        self.images
            .iter()
            .zip(&self.centers)
            .zip(&self.labels)
            .map(|((image, &center), &label)| ImageSample { image, center, label })
            .collect()
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Check every parameter of `cfg.instances` random models.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 || cfg.images_per_instance == 0 {
        return Err(Error::Config("gradcheck needs at least one instance and one image".into()));
    }
    if !(cfg.eps > 0.0 && cfg.tolerance > 0.0 && cfg.denominator_floor > 0.0) {
        return Err(Error::Config("eps, tolerance and denominator_floor must be positive".into()));
    }
    let start = Instant::now();
    let mut results = Vec::with_capacity(cfg.instances);
    let mut offenders = Vec::new();
    let mut worst = [0.0f64; 3];
    let mut degenerate_skipped = Vec::new();
    let mut attempt = 0u64;
    while results.len() < cfg.instances {
        if attempt >= 10 * cfg.instances as u64 {
            return Err(Error::GradCheck(format!("only {} of {} instances had a usable CAM", results.len(), cfg.instances)));
        }
        let k = results.len();
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(attempt);
        attempt += 1;
        let mut inst = Instance::random(cfg, seed)?;
        let base = batch_objective(&inst.model, &inst.batch(), 1.0, 0.0)?;
        if base.degenerate > 0 {
            log::warn!("gradcheck seed {seed}: degenerate CAM, drawing another instance");
            degenerate_skipped.push(seed);
            continue;
        }
        let analytic: Vec<Vec<f64>> = Objective::ALL
            .iter()
            .map(|o| {
                let (w1, w2) = o.weights(cfg.lambda);
                batch_objective(&inst.model, &inst.batch(), w1, w2).map(|b| b.grads)
            })
            .collect::<Result<_>>()?;

        let n = inst.model.num_params();
        let mut max_err = [0.0f64; 3];
        let mut kink_skipped = 0;
        for p in 0..n {
            let orig = inst.model.params()[p];
            inst.model.params_mut()[p] = orig + cfg.eps;
            let plus = batch_objective(&inst.model, &inst.batch(), 1.0, 0.0)?;
            inst.model.params_mut()[p] = orig - cfg.eps;
            let minus = batch_objective(&inst.model, &inst.batch(), 1.0, 0.0)?;
            inst.model.params_mut()[p] = orig;
            let kink = plus.cam_signs != base.cam_signs || minus.cam_signs != base.cam_signs;
            if kink {
                kink_skipped += 1;
            }
            for (j, o) in Objective::ALL.iter().enumerate() {
                let (w1, w2) = o.weights(cfg.lambda);
                if kink && w2 != 0.0 {
                    continue;
                }
                let fp = w1 * plus.loss1 + w2 * plus.loss2;
                let fm = w1 * minus.loss1 + w2 * minus.loss2;
                let numeric = (fp - fm) / (2.0 * cfg.eps);
                let a = analytic[j][p];
                let err = rel_error(a, numeric, cfg.denominator_floor);
                max_err[j] = max_err[j].max(err);
                if !(err < cfg.tolerance) {
                    offenders.push(Offender { instance: k, objective: *o, param: p, analytic: a, numeric, rel_error: err });
                }
            }
        }
        for j in 0..3 {
            worst[j] = worst[j].max(max_err[j]);
        }
        log::info!("gradcheck instance {k}: {n} params, max rel error {max_err:?}, {kink_skipped} kink-skipped");
        results.push(InstanceResult { seed, params: n, kink_skipped, max_rel_error: max_err });
    }
    let passed = offenders.is_empty() && worst.iter().all(|e| e.is_finite());
    Ok(GradCheckReport {
        config: cfg.clone(),
        instances: results,
        max_rel_error: worst,
        passed,
        offenders,
        degenerate_skipped,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
