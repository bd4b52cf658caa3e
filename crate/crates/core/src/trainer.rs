//! Patch optimization: projected gradient descent driven by Adam (or raw
//! gradient signs), iterating over every mapped ground-truth box with
//! per-step transform resampling.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compositor::{apply, apply_backward, placement_for, sample_transform};
use crate::detector::{AttackTarget, ContextBlobDetector};
use crate::error::{Error, Result};
use crate::losses::{suppression_loss_with_grad, tv_loss_with_grad, TV_EPSILON_DEFAULT};
use crate::types::{AnnotatedImage, AttackConfig, Patch, PatchInit, TargetClassMapping};

/// First-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator stabilizer.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam accumulator over patch-shaped gradients.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array3<f64>,
    v: Array3<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(side: usize) -> Self {
        AdamState {
            m: Array3::zeros((side, side, 3)),
            v: Array3::zeros((side, side, 3)),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.t = 0;
    }

    /// Bias-corrected update to subtract from the parameters.
    pub fn step(&mut self, grad: &Array3<f64>, lr: f64) -> Array3<f64> {
        assert_eq!(self.m.dim(), grad.dim(), "gradient shape changed");
        self.t += 1;
        let b1t = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2t = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut update = Array3::zeros(grad.dim());
        for ((m, v), (g, u)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad.iter().zip(update.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *u = lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        update
    }
}

/// Loss terms recorded at one optimization step, before the update.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct StepRecord {
    /// Image hosting the box being attacked at this step.
    pub image_id: String,
    /// Index of the box within that image's annotations.
    pub box_index: usize,
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub tv: f64,
    pub suppress: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub patch: Patch,
    pub history: Vec<StepRecord>,
    pub steps: usize,
    /// Ground-truth boxes that actually hosted a patch.
    pub boxes_visited: usize,
    /// Boxes skipped because the patch would not fit in the frame.
    pub boxes_skipped: usize,
}

/// Initial patch per the configured scheme.
pub fn init_patch(config: &AttackConfig, rng: &mut ChaCha8Rng) -> Patch {
    match config.init {
        PatchInit::Gray => {
            Patch::uniform(config.patch_side, 0.5).expect("uniform gray patch is valid")
        }
        PatchInit::RandomUniform => {
            let mut pixels = Array3::zeros((config.patch_side, config.patch_side, 3));
            for v in pixels.iter_mut() {
                *v = rng.random_range(0.0..=1.0);
            }
            Patch::new(pixels).expect("uniform random patch is valid")
        }
    }
}

/// Optimizes a universal patch over every mapped box in the dataset.
///
/// Box schedule: epochs over images in the given order, boxes in
/// annotation order. Each box gets a freshly sampled placement scale and
/// `pgd_steps` updates; the transform is resampled every step. Adam
/// moments persist across boxes unless the config asks for a reset, and
/// every update projects the pixels back into [0, 1].
pub fn train(
    images: &[AnnotatedImage],
    mapping: &TargetClassMapping,
    detector: &ContextBlobDetector,
    config: &AttackConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if mapping.is_empty() {
        return Err(Error::config("attack mapping has no entries"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut patch = init_patch(config, &mut rng);
    let mut adam = AdamState::new(config.patch_side);
    let mut history = Vec::new();
    let mut boxes_visited = 0usize;
    let mut boxes_skipped = 0usize;
    for _ in 0..config.epochs {
        for image in images {
            let (w, h) = (image.width(), image.height());
            for (box_index, gt) in image.boxes.iter().enumerate() {
                let Some(target_class) = mapping.apply(gt.class_id) else {
                    continue;
                };
                let scale = rng.random_range(config.scale_range.0..=config.scale_range.1);
                let Some(placement) = placement_for(&gt.bbox, w, h, scale) else {
                    boxes_skipped += 1;
                    continue;
                };
                boxes_visited += 1;
                if config.reset_moments_per_box {
                    adam.reset();
                }
                let target = AttackTarget {
                    bbox: gt.bbox,
                    target_class,
                };
                for _ in 0..config.pgd_steps {
                    let transform = sample_transform(&config.eot, &mut rng);
                    let composited = apply(&image.pixels, &patch, &placement, &transform);
                    let terms = detector.attack_terms(&composited, &[target]);
                    let (tv, tv_grad) = tv_loss_with_grad(patch.pixels(), TV_EPSILON_DEFAULT);
                    let (sup, sup_grad) = suppression_loss_with_grad(
                        patch.pixels(),
                        config.suppress_channel,
                        config.suppression_mode,
                    );
                    let record = StepRecord {
                        image_id: image.id.clone(),
                        box_index,
                        total: config.alpha * terms.cls
                            + config.beta * terms.bbox
                            + config.gamma * tv
                            + config.delta * sup,
                        cls: terms.cls,
                        bbox: terms.bbox,
                        tv,
                        suppress: sup,
                    };
                    history.push(record);
                    let mut grad =
                        apply_backward(&patch, &placement, &transform, &terms.image_grad);
                    grad.mapv_inplace(|g| g * config.alpha);
                    grad.scaled_add(config.gamma, &tv_grad);
                    grad.scaled_add(config.delta, &sup_grad);
                    let pixels = patch.pixels_mut();
                    if config.sign_gradient {
                        for (p, g) in pixels.iter_mut().zip(grad.iter()) {
                            if *g != 0.0 {
                                *p -= config.learning_rate * g.signum();
                            }
                            *p = p.clamp(0.0, 1.0);
                        }
                    } else {
                        let update = adam.step(&grad, config.learning_rate);
                        for (p, u) in pixels.iter_mut().zip(update.iter()) {
                            *p = (*p - u).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    if boxes_visited == 0 {
        return Err(Error::data(
            "no ground-truth box matched the mapping with an in-frame placement",
        ));
    }
    Ok(TrainOutcome {
        patch,
        steps: history.len(),
        history,
        boxes_visited,
        boxes_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, CLASS_GREEN, CLASS_RED};
    use crate::types::{BBox, GtBox};
    use ndarray::Array3;

    fn mapping() -> TargetClassMapping {
        TargetClassMapping::new([(CLASS_RED, CLASS_GREEN)]).unwrap()
    }

    fn scene(width: usize, gt_centers_x: &[f64]) -> AnnotatedImage {
        let mut pixels = Array3::zeros((96, width, 3));
        let mut boxes = Vec::new();
        for &cx in gt_centers_x {
            for y in 0..96 {
                for x in 0..width {
                    let dy = y as f64 + 0.5 - 16.0;
                    let dx = x as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= 64.0 {
                        pixels[[y, x, 0]] = 0.9;
                    }
                }
            }
            boxes.push(GtBox {
                bbox: BBox::new(cx - 8.0, 8.0, cx + 8.0, 24.0).unwrap(),
                class_id: CLASS_RED,
            });
        }
        AnnotatedImage::new("scene".to_string(), pixels, boxes).unwrap()
    }

    fn fixed_scale_config() -> AttackConfig {
        AttackConfig {
            scale_range: (2.5, 2.5),
            patch_side: 16,
            ..AttackConfig::digital()
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(2);
        let grad = Array3::from_elem((2, 2, 3), 1.0);
        let update = adam.step(&grad, 0.05);
        for u in update.iter() {
            assert!((u - 0.05).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_reset_clears_momentum() {
        let mut adam = AdamState::new(2);
        let grad = Array3::from_elem((2, 2, 3), 1.0);
        adam.step(&grad, 0.05);
        adam.reset();
        let after = adam.step(&grad, 0.05);
        let mut fresh = AdamState::new(2);
        let first = fresh.step(&grad, 0.05);
        assert_eq!(after, first);
    }

    #[test]
    fn adam_converges_on_quadratic_surrogate() {
        // One pixel, loss (p - 0.9)^2, lr 0.05, init 0.1, clamp to [0, 1].
        let mut adam = AdamState::new(1);
        let mut p = Array3::from_elem((1, 1, 3), 0.1);
        for _ in 0..200 {
            let grad = p.mapv(|v| 2.0 * (v - 0.9));
            let update = adam.step(&grad, 0.05);
            for (v, u) in p.iter_mut().zip(update.iter()) {
                *v = (*v - u).clamp(0.0, 1.0);
            }
        }
        for v in p.iter() {
            assert!((v - 0.9).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn irrelevant_boxes_never_trigger_updates() {
        // One red box, one green box; only the red one is in the mapping's
        // domain, so exactly pgd_steps updates run and all records cite it.
        let mut image = scene(160, &[48.0]);
        image.boxes.push(GtBox {
            bbox: BBox::new(104.0, 8.0, 120.0, 24.0).unwrap(),
            class_id: CLASS_GREEN,
        });
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let outcome = train(&[image], &mapping(), &det, &fixed_scale_config()).unwrap();
        assert_eq!(outcome.boxes_visited, 1);
        assert_eq!(outcome.boxes_skipped, 0);
        assert_eq!(outcome.steps, 10);
        assert!(outcome.history.iter().all(|r| r.box_index == 0));
    }

    #[test]
    fn training_reduces_loss_on_single_scene() {
        let images = [scene(96, &[48.0])];
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let outcome = train(&images, &mapping(), &det, &fixed_scale_config()).unwrap();
        assert_eq!(outcome.steps, 10);
        assert_eq!(outcome.boxes_visited, 1);
        assert!(
            outcome.history.last().unwrap().total < outcome.history[0].total,
            "loss failed to decrease: {:?}",
            outcome.history
        );
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let images = [scene(96, &[48.0])];
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let config = AttackConfig {
            init: PatchInit::RandomUniform,
            ..fixed_scale_config()
        };
        let a = train(&images, &mapping(), &det, &config).unwrap();
        let b = train(&images, &mapping(), &det, &config).unwrap();
        assert_eq!(a.patch.pixels(), b.patch.pixels());
        assert_eq!(a.history, b.history);
        let other_seed = AttackConfig {
            seed: config.seed + 1,
            ..config
        };
        let c = train(&images, &mapping(), &det, &other_seed).unwrap();
        assert_ne!(a.patch.pixels(), c.patch.pixels());
    }

    #[test]
    fn moment_reset_changes_second_box_trajectory() {
        let images = [scene(160, &[48.0, 112.0])];
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let persist = fixed_scale_config();
        let reset = AttackConfig {
            reset_moments_per_box: true,
            ..persist.clone()
        };
        let a = train(&images, &mapping(), &det, &persist).unwrap();
        let b = train(&images, &mapping(), &det, &reset).unwrap();
        assert_eq!(a.boxes_visited, 2);
        // The first box's steps agree; carrying momentum into the second
        // box diverges from resetting it.
        assert_eq!(a.history[..10], b.history[..10]);
        assert_ne!(a.patch.pixels(), b.patch.pixels());
    }

    #[test]
    fn sign_gradient_steps_by_learning_rate() {
        let images = [scene(96, &[48.0])];
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let config = AttackConfig {
            sign_gradient: true,
            pgd_steps: 1,
            ..fixed_scale_config()
        };
        let outcome = train(&images, &mapping(), &det, &config).unwrap();
        // From a 0.5 init every update is one signed learning-rate step
        // (or none where the gradient is exactly zero).
        for p in outcome.patch.pixels().iter() {
            let moved_up = (p - 0.55).abs() < 1e-12;
            let moved_down = (p - 0.45).abs() < 1e-12;
            let still = (p - 0.5).abs() < 1e-12;
            assert!(moved_up || moved_down || still, "pixel at {p}");
        }
    }

    #[test]
    fn training_errors_without_usable_boxes() {
        let images = [scene(96, &[48.0])];
        let det = ContextBlobDetector::new(DetectorConfig::default()).unwrap();
        let empty = TargetClassMapping::new([(5, 6)]).unwrap();
        assert!(train(&images, &empty, &det, &fixed_scale_config()).is_err());
        // A scale too large for the frame skips every box.
        let huge = AttackConfig {
            scale_range: (50.0, 50.0),
            ..fixed_scale_config()
        };
        assert!(train(&images, &mapping(), &det, &huge).is_err());
    }
}
