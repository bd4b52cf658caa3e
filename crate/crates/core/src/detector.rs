//! A differentiable-enough surrogate detector for traffic-light states.
//!
//! The image is divided into square grid cells. Each cell carries mean red
//! and mean green features; objectness is a sigmoid of the dominant mean,
//! and the red/green decision comes from the cell's own features plus a
//! weighted share of the cell directly below it (lights hang above their
//! housing and pole, so the region below carries correlated context).
//! Candidate locations are connected components of saturated red or green
//! pixels; each candidate is scored at the grid cell holding its centroid
//! and boxed by the component's pixel bounding box.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, ImageTensor};

/// Class id for red lights.
pub const CLASS_RED: usize = 0;
/// Class id for green lights.
pub const CLASS_GREEN: usize = 1;
/// Class names indexed by class id.
pub const CLASS_NAMES: [&str; 2] = ["red", "green"];
/// Overlap above which the lower-confidence of two candidate boxes is
/// suppressed.
pub const NMS_IOU: f64 = 0.5;

/// Detector constants. Defaults fit 32 px cells; benchmark scenes override
/// them explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Grid cell side in pixels.
    pub cell_size: usize,
    /// Sigmoid gain on the objectness margin.
    pub objectness_gain: f64,
    /// Mean-intensity level a cell must exceed to look object-like.
    pub objectness_threshold: f64,
    /// Weight of the below-cell features in the class decision.
    pub context_weight: f64,
    /// Detections below this confidence are dropped.
    pub conf_threshold: f64,
    /// Per-pixel dominance (own channel minus best other) needed to count
    /// as a lit pixel when enumerating candidates.
    pub chroma_threshold: f64,
    /// Smallest connected lit region that forms a candidate.
    pub min_blob_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            cell_size: 32,
            objectness_gain: 12.0,
            objectness_threshold: 0.15,
            context_weight: 0.6,
            conf_threshold: 0.5,
            chroma_threshold: 0.35,
            min_blob_area: 16,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size == 0 {
            return Err(Error::config("cell_size must be at least 1"));
        }
        if !self.objectness_gain.is_finite() || self.objectness_gain <= 0.0 {
            return Err(Error::config("objectness_gain must be positive"));
        }
        if !self.objectness_threshold.is_finite() {
            return Err(Error::config("objectness_threshold must be finite"));
        }
        if !self.context_weight.is_finite() || self.context_weight < 0.0 {
            return Err(Error::config("context_weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::config("conf_threshold must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.chroma_threshold) || self.chroma_threshold == 0.0 {
            return Err(Error::config("chroma_threshold must lie in (0, 1]"));
        }
        if self.min_blob_area == 0 {
            return Err(Error::config("min_blob_area must be at least 1"));
        }
        Ok(())
    }
}

/// One ground-truth box the attack wants re-labeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackTarget {
    pub bbox: BBox,
    pub target_class: usize,
}

/// Attack-facing loss terms. `image_grad` is the gradient of `cls` with
/// respect to the image; the box term compares fixed rectangles and
/// contributes no image gradient.
#[derive(Debug, Clone)]
pub struct AttackTerms {
    pub cls: f64,
    pub bbox: f64,
    pub image_grad: Array3<f64>,
}

pub struct ContextBlobDetector {
    config: DetectorConfig,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct CellGrid {
    mean_r: Array2<f64>,
    mean_g: Array2<f64>,
    cell_size: usize,
    grid_h: usize,
    grid_w: usize,
}

impl CellGrid {
    fn build(image: &ImageTensor, cell_size: usize) -> Self {
        let (h, w, _) = image.dim();
        let grid_h = h.div_ceil(cell_size);
        let grid_w = w.div_ceil(cell_size);
        let mut mean_r = Array2::zeros((grid_h, grid_w));
        let mut mean_g = Array2::zeros((grid_h, grid_w));
        for gy in 0..grid_h {
            let y0 = gy * cell_size;
            let y1 = (y0 + cell_size).min(h);
            for gx in 0..grid_w {
                let x0 = gx * cell_size;
                let x1 = (x0 + cell_size).min(w);
                let mut sum_r = 0.0;
                let mut sum_g = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum_r += image[[y, x, 0]];
                        sum_g += image[[y, x, 1]];
                    }
                }
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                mean_r[[gy, gx]] = sum_r / area;
                mean_g[[gy, gx]] = sum_g / area;
            }
        }
        CellGrid {
            mean_r,
            mean_g,
            cell_size,
            grid_h,
            grid_w,
        }
    }

    /// Red-minus-green dominance at a cell, context included.
    fn dominance(&self, gy: usize, gx: usize, context_weight: f64) -> f64 {
        let own = self.mean_r[[gy, gx]] - self.mean_g[[gy, gx]];
        let below = if gy + 1 < self.grid_h {
            self.mean_r[[gy + 1, gx]] - self.mean_g[[gy + 1, gx]]
        } else {
            0.0
        };
        own + context_weight * below
    }

    fn objectness(&self, gy: usize, gx: usize, gain: f64, threshold: f64) -> f64 {
        let peak = self.mean_r[[gy, gx]].max(self.mean_g[[gy, gx]]);
        sigmoid(gain * (peak - threshold))
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let gx = ((x / self.cell_size as f64).floor().max(0.0) as usize).min(self.grid_w - 1);
        let gy = ((y / self.cell_size as f64).floor().max(0.0) as usize).min(self.grid_h - 1);
        (gy, gx)
    }

    /// Cell extent clipped to the image, as a box.
    fn cell_rect(&self, gy: usize, gx: usize, image_w: usize, image_h: usize) -> BBox {
        let cs = self.cell_size as f64;
        let x0 = gx as f64 * cs;
        let y0 = gy as f64 * cs;
        let x1 = (x0 + cs).min(image_w as f64);
        let y1 = (y0 + cs).min(image_h as f64);
        BBox::new(x0, y0, x1, y1).expect("grid cells are valid boxes")
    }
}

struct Component {
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
    sum_cx: f64,
    sum_cy: f64,
    area: usize,
}

/// 4-connected components of pixels whose `own` channel dominates both
/// others by at least `chroma_threshold`.
fn lit_components(
    image: &ImageTensor,
    own: usize,
    chroma_threshold: f64,
    min_area: usize,
) -> Vec<Component> {
    let (h, w, _) = image.dim();
    let lit = |y: usize, x: usize| -> bool {
        let v = image[[y, x, own]];
        let a = image[[y, x, (own + 1) % 3]];
        let b = image[[y, x, (own + 2) % 3]];
        v - a.max(b) >= chroma_threshold
    };
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !lit(y, x) {
                continue;
            }
            let mut comp = Component {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
                sum_cx: 0.0,
                sum_cy: 0.0,
                area: 0,
            };
            seen[y * w + x] = true;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                comp.area += 1;
                comp.min_x = comp.min_x.min(cx);
                comp.max_x = comp.max_x.max(cx);
                comp.min_y = comp.min_y.min(cy);
                comp.max_y = comp.max_y.max(cy);
                comp.sum_cx += cx as f64 + 0.5;
                comp.sum_cy += cy as f64 + 0.5;
                let mut push = |ny: usize, nx: usize| {
                    if !seen[ny * w + nx] && lit(ny, nx) {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            if comp.area >= min_area {
                comps.push(comp);
            }
        }
    }
    comps
}

impl ContextBlobDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(ContextBlobDetector { config })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Runs the detector. Candidates come from saturated red/green blobs;
    /// each is scored at its centroid cell, boxed by its pixel extent,
    /// greedily de-duplicated and thresholded on confidence.
    pub fn detect(&self, image: &ImageTensor) -> Vec<Detection> {
        let cfg = &self.config;
        let grid = CellGrid::build(image, cfg.cell_size);
        let mut candidates = Vec::new();
        for own in [CLASS_RED, CLASS_GREEN] {
            for comp in lit_components(image, own, cfg.chroma_threshold, cfg.min_blob_area) {
                let cx = comp.sum_cx / comp.area as f64;
                let cy = comp.sum_cy / comp.area as f64;
                let (gy, gx) = grid.cell_of(cx, cy);
                let objectness =
                    grid.objectness(gy, gx, cfg.objectness_gain, cfg.objectness_threshold);
                let d = grid.dominance(gy, gx, cfg.context_weight);
                // Two-way softmax over logits (d, -d).
                let p_red = sigmoid(2.0 * d);
                let (class_id, p_max) = if p_red >= 0.5 {
                    (CLASS_RED, p_red)
                } else {
                    (CLASS_GREEN, 1.0 - p_red)
                };
                let conf = objectness * p_max;
                let bbox = BBox::new(
                    comp.min_x as f64,
                    comp.min_y as f64,
                    (comp.max_x + 1) as f64,
                    (comp.max_y + 1) as f64,
                )
                .expect("component bounds are ordered");
                candidates.push(Detection::new(bbox, conf, class_id));
            }
        }
        candidates.retain(|d| d.confidence >= cfg.conf_threshold);
        candidates.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.bbox.x_min().total_cmp(&b.bbox.x_min()))
                .then(a.bbox.y_min().total_cmp(&b.bbox.y_min()))
        });
        let mut kept: Vec<Detection> = Vec::new();
        for cand in candidates {
            if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= NMS_IOU) {
                kept.push(cand);
            }
        }
        kept
    }

    /// Attack losses for a composited image against re-label targets.
    ///
    /// Classification: cross-entropy between the two-way class softmax at
    /// the grid cell under each target's center and the desired one-hot
    /// label, averaged over targets. Localization: mean squared difference
    /// of that cell's rectangle and the target rectangle, in cell units;
    /// it anchors the box the attack must preserve and is constant in the
    /// pixels.
    pub fn attack_terms(&self, image: &ImageTensor, targets: &[AttackTarget]) -> AttackTerms {
        let cfg = &self.config;
        let (h, w, _) = image.dim();
        let mut terms = AttackTerms {
            cls: 0.0,
            bbox: 0.0,
            image_grad: Array3::zeros((h, w, 3)),
        };
        if targets.is_empty() {
            return terms;
        }
        let grid = CellGrid::build(image, cfg.cell_size);
        let inv_n = 1.0 / targets.len() as f64;
        for target in targets {
            assert!(
                target.target_class == CLASS_RED || target.target_class == CLASS_GREEN,
                "unknown target class {}",
                target.target_class
            );
            let (tcx, tcy) = target.bbox.center();
            let (gy, gx) = grid.cell_of(tcx, tcy);
            let d = grid.dominance(gy, gx, cfg.context_weight);
            // CE(one-hot target, softmax(d, -d)).
            let (ce, t_red) = if target.target_class == CLASS_RED {
                (softplus(-2.0 * d), 1.0)
            } else {
                (softplus(2.0 * d), 0.0)
            };
            terms.cls += ce * inv_n;
            let d_ce_d_d = 2.0 * (sigmoid(2.0 * d) - t_red);
            let mut scatter = |cell_y: usize, cell_x: usize, weight: f64| {
                let y0 = cell_y * cfg.cell_size;
                let y1 = (y0 + cfg.cell_size).min(h);
                let x0 = cell_x * cfg.cell_size;
                let x1 = (x0 + cfg.cell_size).min(w);
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                let per_pixel = d_ce_d_d * weight * inv_n / area;
                for y in y0..y1 {
                    for x in x0..x1 {
                        terms.image_grad[[y, x, 0]] += per_pixel;
                        terms.image_grad[[y, x, 1]] -= per_pixel;
                    }
                }
            };
            scatter(gy, gx, 1.0);
            if gy + 1 < grid.grid_h {
                scatter(gy + 1, gx, cfg.context_weight);
            }
            let cell = grid.cell_rect(gy, gx, w, h);
            let cs = cfg.cell_size as f64;
            let diffs = [
                (cell.x_min() - target.bbox.x_min()) / cs,
                (cell.y_min() - target.bbox.y_min()) / cs,
                (cell.x_max() - target.bbox.x_max()) / cs,
                (cell.y_max() - target.bbox.y_max()) / cs,
            ];
            let mse: f64 = diffs.iter().map(|d| d * d).sum::<f64>() / 4.0;
            terms.bbox += mse * inv_n;
        }
        terms
    }
}
