//! Core value types shared by every stage of the pipeline: boxes, patches,
//! detections, annotated images, the class mapping that defines the attack
//! goal, and the attack configuration.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image as (height, width, 3) float64 with values in [0, 1].
pub type ImageTensor = Array3<f64>;

/// Axis-aligned box in pixel coordinates, x right, y down.
/// `x_min <= x_max` and `y_min <= y_max` are enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(Error::data("bbox coordinates must be finite"));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::data(format!(
                "inverted bbox ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Intersection over union. Identical boxes give exactly 1.0, including
    /// the degenerate zero-area case.
    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Square RGB patch with pixel values kept in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: Array3<f64>,
}

impl Patch {
    /// Takes (side, side, 3) pixels; rejects non-square shapes and values
    /// outside [0, 1].
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || h != w || c != 3 {
            return Err(Error::data(format!(
                "patch must be square RGB, got ({h}, {w}, {c})"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::data("patch pixel values must lie in [0, 1]"));
        }
        Ok(Patch { pixels })
    }

    pub fn uniform(side: usize, value: f64) -> Result<Self> {
        Patch::new(Array3::from_elem((side, side, 3), value))
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }
}

/// One detector output box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, class_id: usize) -> Self {
        assert!(
            (0.0..=1.0).contains(&confidence),
            "detection confidence {confidence} outside [0, 1]"
        );
        Detection {
            bbox,
            confidence,
            class_id,
        }
    }
}

/// Ground-truth box with its class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Image plus its ground-truth annotations. Boxes are validated to lie
/// within the image bounds.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: ImageTensor,
    pub boxes: Vec<GtBox>,
}

impl AnnotatedImage {
    pub fn new(id: String, pixels: ImageTensor, boxes: Vec<GtBox>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::data(format!(
                "image {id} must be non-empty RGB, got ({h}, {w}, {c})"
            )));
        }
        for (i, b) in boxes.iter().enumerate() {
            if b.bbox.x_min() < 0.0
                || b.bbox.y_min() < 0.0
                || b.bbox.x_max() > w as f64
                || b.bbox.y_max() > h as f64
            {
                return Err(Error::data(format!(
                    "image {id}: gt box {i} exceeds image bounds {w}x{h}"
                )));
            }
        }
        Ok(AnnotatedImage { id, pixels, boxes })
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }
}

/// Partial injective map from source class ids to attack target class ids.
/// Identity entries are forbidden; two sources may not share a target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetClassMapping {
    map: BTreeMap<usize, usize>,
}

impl TargetClassMapping {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut targets = std::collections::BTreeSet::new();
        for (from, to) in pairs {
            if from == to {
                return Err(Error::config(format!(
                    "identity mapping {from} -> {to} is not an attack"
                )));
            }
            if map.insert(from, to).is_some() {
                return Err(Error::config(format!("duplicate mapping source {from}")));
            }
            if !targets.insert(to) {
                return Err(Error::config(format!(
                    "mapping is not injective: target {to} repeated"
                )));
            }
        }
        Ok(TargetClassMapping { map })
    }

    /// The attack target for `class_id`, or `None` when the class is not
    /// under attack.
    pub fn apply(&self, class_id: usize) -> Option<usize> {
        self.map.get(&class_id).copied()
    }

    pub fn is_relevant(&self, class_id: usize) -> bool {
        self.map.contains_key(&class_id)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map.iter().map(|(k, v)| (*k, *v))
    }
}

/// Which color channel the suppression loss penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressChannel {
    Red,
    Green,
}

impl SuppressChannel {
    pub fn index(self) -> usize {
        match self {
            SuppressChannel::Red => 0,
            SuppressChannel::Green => 1,
        }
    }
}

/// How the suppression loss measures the penalized channel: dominance over
/// the other two channels (default) or the raw channel intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionMode {
    Dominance,
    RawChannel,
}

/// How the patch is initialized before optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchInit {
    Gray,
    RandomUniform,
}

/// Sampling intervals for the expectation-over-transformations step.
/// Rotation is in degrees, brightness is a multiplicative factor,
/// translation is a jitter box in pixels around the nominal placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EotRanges {
    pub enabled: bool,
    pub rot_xy_deg: (f64, f64),
    pub rot_z_deg: (f64, f64),
    pub brightness: (f64, f64),
    pub translate_pad_px: f64,
}

impl Default for EotRanges {
    fn default() -> Self {
        EotRanges {
            enabled: true,
            rot_xy_deg: (-5.0, 5.0),
            rot_z_deg: (-10.0, 10.0),
            brightness: (0.4, 1.6),
            translate_pad_px: 10.0,
        }
    }
}

impl EotRanges {
    pub fn disabled() -> Self {
        EotRanges {
            enabled: false,
            ..EotRanges::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rot_xy_deg", self.rot_xy_deg),
            ("rot_z_deg", self.rot_z_deg),
            ("brightness", self.brightness),
        ];
        for (name, (lo, hi)) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::config(format!("invalid {name} range ({lo}, {hi})")));
            }
        }
        if self.brightness.0 <= 0.0 {
            return Err(Error::config("brightness must be positive"));
        }
        if !self.translate_pad_px.is_finite() || self.translate_pad_px < 0.0 {
            return Err(Error::config("translate_pad_px must be non-negative"));
        }
        Ok(())
    }
}

/// Full attack configuration: composite loss weights, optimizer settings,
/// patch geometry and the EOT ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub pgd_steps: u32,
    pub learning_rate: f64,
    pub scale_range: (f64, f64),
    pub eval_scale: f64,
    pub eot: EotRanges,
    pub seed: u64,
    pub patch_side: usize,
    pub init: PatchInit,
    pub suppress_channel: SuppressChannel,
    pub suppression_mode: SuppressionMode,
    pub sign_gradient: bool,
    pub reset_moments_per_box: bool,
    pub epochs: u32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::digital()
    }
}

impl AttackConfig {
    /// Profile for purely digital attacks: classification and smoothness
    /// terms only, no physical-world augmentation.
    pub fn digital() -> Self {
        AttackConfig {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.8,
            delta: 0.0,
            pgd_steps: 10,
            learning_rate: 0.05,
            scale_range: (2.0, 3.0),
            eval_scale: 2.5,
            eot: EotRanges::disabled(),
            seed: 0,
            patch_side: 64,
            init: PatchInit::Gray,
            suppress_channel: SuppressChannel::Green,
            suppression_mode: SuppressionMode::Dominance,
            sign_gradient: false,
            reset_moments_per_box: false,
            epochs: 1,
        }
    }

    /// Profile for printable physical patches: box-preservation, strong
    /// smoothness and green suppression, EOT enabled.
    pub fn physical() -> Self {
        AttackConfig {
            beta: 2.0,
            gamma: 5.0,
            delta: 2e-4,
            eot: EotRanges::default(),
            ..AttackConfig::digital()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "digital" => Ok(AttackConfig::digital()),
            "physical" => Ok(AttackConfig::physical()),
            other => Err(Error::config(format!(
                "unknown profile '{other}' (expected 'digital' or 'physical')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.pgd_steps == 0 {
            return Err(Error::config("pgd_steps must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        let (lo, hi) = self.scale_range;
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || lo > hi {
            return Err(Error::config(format!("invalid scale_range ({lo}, {hi})")));
        }
        if !self.eval_scale.is_finite() || self.eval_scale <= 0.0 {
            return Err(Error::config("eval_scale must be positive"));
        }
        if self.patch_side == 0 {
            return Err(Error::config("patch_side must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.eot.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_rejects_inverted() {
        assert!(BBox::new(10.0, 0.0, 5.0, 10.0).is_err());
        assert!(BBox::new(0.0, 10.0, 5.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        // inter 50, union 150
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        let c = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert_eq!(a.iou(&c), 0.0);
        assert_eq!(a.iou(&a), 1.0);
        // degenerate but equal
        let d = BBox::new(3.0, 3.0, 3.0, 3.0).unwrap();
        assert_eq!(d.iou(&d), 1.0);
    }

    #[test]
    fn patch_validates_shape_and_range() {
        assert!(Patch::uniform(0, 0.5).is_err());
        assert!(Patch::new(Array3::zeros((4, 5, 3))).is_err());
        assert!(Patch::new(Array3::zeros((4, 4, 1))).is_err());
        assert!(Patch::new(Array3::from_elem((4, 4, 3), 1.5)).is_err());
        assert!(Patch::uniform(4, 0.5).is_ok());
    }

    #[test]
    fn annotated_image_rejects_out_of_bounds_boxes() {
        let px = Array3::zeros((20, 30, 3));
        let inside = GtBox {
            bbox: BBox::new(0.0, 0.0, 30.0, 20.0).unwrap(),
            class_id: 0,
        };
        assert!(AnnotatedImage::new("a".into(), px.clone(), vec![inside]).is_ok());
        let outside = GtBox {
            bbox: BBox::new(0.0, 0.0, 31.0, 10.0).unwrap(),
            class_id: 0,
        };
        assert!(AnnotatedImage::new("a".into(), px, vec![outside]).is_err());
    }

    #[test]
    fn mapping_rejects_identity_duplicates_and_non_injective() {
        assert!(TargetClassMapping::new([(1, 1)]).is_err());
        assert!(TargetClassMapping::new([(0, 1), (0, 2)]).is_err());
        assert!(TargetClassMapping::new([(0, 2), (1, 2)]).is_err());
        let m = TargetClassMapping::new([(0, 1), (1, 0)]).unwrap();
        assert_eq!(m.apply(0), Some(1));
        assert_eq!(m.apply(1), Some(0));
        assert_eq!(m.apply(2), None);
    }

    #[test]
    fn profiles_match_published_weights() {
        let d = AttackConfig::digital();
        assert_eq!(
            (d.alpha, d.beta, d.gamma, d.delta),
            (1.0, 0.0, 0.8, 0.0)
        );
        assert!(!d.eot.enabled);
        let p = AttackConfig::physical();
        assert_eq!((p.alpha, p.beta, p.gamma, p.delta), (1.0, 2.0, 5.0, 2e-4));
        assert!(p.eot.enabled);
        assert_eq!(p.pgd_steps, 10);
        assert_eq!(p.learning_rate, 0.05);
        assert!(AttackConfig::profile("nope").is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = AttackConfig::digital();
        c.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::digital();
        c.scale_range = (3.0, 2.0);
        assert!(c.validate().is_err());
        let mut c = AttackConfig::digital();
        c.pgd_steps = 0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::physical();
        c.eot.brightness = (0.0, 1.0);
        assert!(c.validate().is_err());
        assert!(AttackConfig::physical().validate().is_ok());
    }
}
