//! Synthetic benchmark scenes: saturated traffic-light disks in dark
//! housings over a neutral textured background, annotated with the exact
//! pixel bounds of each lit disk. Geometry is constrained so an
//! under-the-light patch at the working scale always fits the frame.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{DetectorConfig, CLASS_GREEN, CLASS_RED};
use crate::error::{Error, Result};
use crate::types::{AnnotatedImage, AttackConfig, BBox, GtBox, ImageTensor};

/// Detector constants sized for the synthetic scenes: cells comfortably
/// larger than the biggest disk, an objectness gate far below the gray
/// background level so every lit blob scores, and a context weight strong
/// enough that under-light content can outvote the disk's own cell.
pub fn benchmark_detector_config() -> DetectorConfig {
    DetectorConfig {
        cell_size: 48,
        objectness_gain: 40.0,
        objectness_threshold: 0.1,
        context_weight: 2.5,
        ..DetectorConfig::default()
    }
}

/// Attack settings tuned on the synthetic benchmark: a gentle learning
/// rate so the recorded loss descends instead of jumping straight into
/// the per-box plateau, a light smoothness weight, and enough green
/// suppression to keep the patch free of lit-green pixels.
pub fn benchmark_attack_config() -> AttackConfig {
    AttackConfig {
        learning_rate: 0.01,
        gamma: 0.1,
        delta: 0.5,
        scale_range: (2.3, 2.7),
        patch_side: 48,
        seed: 42,
        ..AttackConfig::digital()
    }
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub min_lights: usize,
    pub max_lights: usize,
    /// Lit-disk diameter range in pixels, drawn log-uniformly.
    pub min_disk_diameter: f64,
    pub max_disk_diameter: f64,
    /// Fraction of lights rendered green instead of red.
    pub green_light_fraction: f64,
    /// Width multiple reserved below each light so a patch fits.
    pub reserved_scale: f64,
    /// Background gray level and per-pixel jitter amplitude.
    pub background_level: f64,
    pub background_jitter: f64,
    /// Lit channel level on the disk and the level of its other channels.
    pub disk_level: f64,
    pub off_channel_level: f64,
    /// Housing gray level and its padding as a fraction of the diameter.
    pub housing_level: f64,
    pub housing_pad_frac: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_width: 640,
            image_height: 480,
            min_lights: 1,
            max_lights: 3,
            min_disk_diameter: 12.0,
            max_disk_diameter: 40.0,
            green_light_fraction: 0.2,
            reserved_scale: 2.8,
            background_level: 0.5,
            background_jitter: 0.04,
            disk_level: 0.97,
            off_channel_level: 0.03,
            housing_level: 0.08,
            housing_pad_frac: 0.18,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 64 || self.image_height < 64 {
            return Err(Error::config("scene frames must be at least 64x64"));
        }
        if self.min_lights == 0 || self.min_lights > self.max_lights {
            return Err(Error::config("light count range is empty"));
        }
        if !(4.0..=self.max_disk_diameter).contains(&self.min_disk_diameter) {
            return Err(Error::config("disk diameter range is empty or too small"));
        }
        if !(0.0..=1.0).contains(&self.green_light_fraction) {
            return Err(Error::config("green_light_fraction must lie in [0, 1]"));
        }
        if !self.reserved_scale.is_finite() || self.reserved_scale <= 0.0 {
            return Err(Error::config("reserved_scale must be positive"));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("disk_level", self.disk_level),
            ("off_channel_level", self.off_channel_level),
            ("housing_level", self.housing_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=0.25).contains(&self.background_jitter) {
            return Err(Error::config("background_jitter must lie in [0, 0.25]"));
        }
        if !(0.0..=1.0).contains(&self.housing_pad_frac) {
            return Err(Error::config("housing_pad_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct PlacedLight {
    center: (f64, f64),
    radius: f64,
    /// Housing plus the reserved patch area, used for separation tests.
    keepout: BBox,
    class_id: usize,
}

fn rects_overlap(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x_min() - margin < b.x_max()
        && b.x_min() - margin < a.x_max()
        && a.y_min() - margin < b.y_max()
        && b.y_min() - margin < a.y_max()
}

/// Renders one scene. Pixel values land on the 8-bit grid so a PNG round
/// trip is lossless, and each annotation equals the exact bounding box of
/// its disk's lit pixels.
pub fn render_scene(spec: &SceneSpec, id: String, rng: &mut ChaCha8Rng) -> AnnotatedImage {
    let (w, h) = (spec.image_width, spec.image_height);
    let mut pixels: ImageTensor = ndarray::Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let v = (spec.background_level
                + rng.random_range(-spec.background_jitter..=spec.background_jitter))
            .clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[[y, x, c]] = v;
            }
        }
    }
    let n_lights = rng.random_range(spec.min_lights..=spec.max_lights);
    let mut placed: Vec<PlacedLight> = Vec::new();
    let ln_min = spec.min_disk_diameter.ln();
    let ln_max = spec.max_disk_diameter.ln();
    for _ in 0..n_lights {
        for _attempt in 0..60 {
            let diameter = rng.random_range(ln_min..=ln_max).exp();
            let radius = diameter / 2.0;
            let pad = spec.housing_pad_frac * diameter;
            let patch_side = (spec.reserved_scale * diameter).round();
            let margin_x = (radius + pad).max(patch_side / 2.0) + 3.0;
            let top_margin = radius + pad + 3.0;
            // The patch hangs from the disk bottom; keep it in frame.
            let bottom_limit = h as f64 - patch_side - radius - 3.0;
            let lowest_center = (h as f64 * 0.35).min(bottom_limit);
            if margin_x * 2.0 >= w as f64 || lowest_center <= top_margin {
                continue;
            }
            let cx = rng.random_range(margin_x..=(w as f64 - margin_x));
            let cy = rng.random_range(top_margin..=lowest_center);
            let keepout = BBox::new(
                (cx - margin_x).max(0.0),
                (cy - top_margin).max(0.0),
                (cx + margin_x).min(w as f64),
                (cy + radius + patch_side + 3.0).min(h as f64),
            )
            .expect("keepout bounds are ordered");
            if placed
                .iter()
                .any(|p| rects_overlap(&p.keepout, &keepout, 8.0))
            {
                continue;
            }
            let is_green = rng.random_range(0.0..1.0) < spec.green_light_fraction;
            placed.push(PlacedLight {
                center: (cx, cy),
                radius,
                keepout,
                class_id: if is_green { CLASS_GREEN } else { CLASS_RED },
            });
            break;
        }
    }
    let mut boxes = Vec::with_capacity(placed.len());
    for light in &placed {
        let (cx, cy) = light.center;
        let r = light.radius;
        let pad = spec.housing_pad_frac * 2.0 * r;
        // Housing first, then the disk over it.
        let hx0 = ((cx - r - pad).floor().max(0.0)) as usize;
        let hx1 = ((cx + r + pad).ceil().min(w as f64)) as usize;
        let hy0 = ((cy - r - pad).floor().max(0.0)) as usize;
        let hy1 = ((cy + r + pad).ceil().min(h as f64)) as usize;
        for y in hy0..hy1 {
            for x in hx0..hx1 {
                for c in 0..3 {
                    pixels[[y, x, c]] = spec.housing_level;
                }
            }
        }
        let own = light.class_id;
        let mut lit_bounds: Option<(usize, usize, usize, usize)> = None;
        for y in hy0..hy1 {
            for x in hx0..hx1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx > r * r {
                    continue;
                }
                for c in 0..3 {
                    pixels[[y, x, c]] = if c == own {
                        spec.disk_level
                    } else {
                        spec.off_channel_level
                    };
                }
                lit_bounds = Some(match lit_bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        if let Some((x0, y0, x1, y1)) = lit_bounds {
            boxes.push(GtBox {
                bbox: BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
                    .expect("lit bounds are ordered"),
                class_id: light.class_id,
            });
        }
    }
    for v in pixels.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    AnnotatedImage::new(id, pixels, boxes).expect("rendered boxes stay in frame")
}

/// Renders `count` scenes from one seed, ids `scene_0000` onward.
pub fn render_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| render_scene(spec, format!("scene_{i:04}"), &mut rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::placement_for;
    use crate::detector::ContextBlobDetector;

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let spec = SceneSpec::default();
        let a = render_dataset(&spec, 3, 7).unwrap();
        let b = render_dataset(&spec, 3, 7).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.boxes.len(), y.boxes.len());
        }
        let c = render_dataset(&spec, 3, 8).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.pixels != y.pixels));
    }

    #[test]
    fn every_light_leaves_room_for_a_patch() {
        let spec = SceneSpec::default();
        for scene in render_dataset(&spec, 20, 11).unwrap() {
            assert!(!scene.boxes.is_empty());
            for gt in &scene.boxes {
                assert!(
                    placement_for(&gt.bbox, scene.width(), scene.height(), spec.reserved_scale)
                        .is_some(),
                    "patch would not fit under {:?}",
                    gt.bbox
                );
                let d = gt.bbox.width();
                assert!((spec.min_disk_diameter - 2.0..=spec.max_disk_diameter + 1.0).contains(&d));
            }
        }
    }

    #[test]
    fn pixels_sit_on_the_eight_bit_grid() {
        let scene = &render_dataset(&SceneSpec::default(), 1, 3).unwrap()[0];
        for v in scene.pixels.iter() {
            let back = (v * 255.0).round() / 255.0;
            assert_eq!(*v, back);
        }
    }

    #[test]
    fn annotations_match_lit_pixel_bounds() {
        let spec = SceneSpec::default();
        for scene in render_dataset(&spec, 10, 23).unwrap() {
            for gt in &scene.boxes {
                let own = gt.class_id;
                // Recompute the lit bounding box from the pixels.
                let mut bounds: Option<(usize, usize, usize, usize)> = None;
                for y in 0..scene.height() {
                    for x in 0..scene.width() {
                        let v = scene.pixels[[y, x, own]];
                        let a = scene.pixels[[y, x, (own + 1) % 3]];
                        let b = scene.pixels[[y, x, (own + 2) % 3]];
                        if v - a.max(b) < 0.35 {
                            continue;
                        }
                        if !(gt.bbox.x_min() as usize..gt.bbox.x_max() as usize).contains(&x)
                            || !(gt.bbox.y_min() as usize..gt.bbox.y_max() as usize).contains(&y)
                        {
                            continue;
                        }
                        bounds = Some(match bounds {
                            None => (x, y, x, y),
                            Some((x0, y0, x1, y1)) => {
                                (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
                            }
                        });
                    }
                }
                let (x0, y0, x1, y1) = bounds.expect("disk pixels exist");
                assert_eq!(gt.bbox.x_min(), x0 as f64);
                assert_eq!(gt.bbox.y_min(), y0 as f64);
                assert_eq!(gt.bbox.x_max(), (x1 + 1) as f64);
                assert_eq!(gt.bbox.y_max(), (y1 + 1) as f64);
            }
        }
    }

    #[test]
    fn clean_scenes_are_detected_correctly_with_benchmark_constants() {
        let spec = SceneSpec::default();
        let det = ContextBlobDetector::new(benchmark_detector_config()).unwrap();
        let scenes = render_dataset(&spec, 10, 31).unwrap();
        let mut total = 0usize;
        let mut correct = 0usize;
        for scene in &scenes {
            let dets = det.detect(&scene.pixels);
            for gt in &scene.boxes {
                total += 1;
                if dets
                    .iter()
                    .any(|d| d.class_id == gt.class_id && d.bbox.iou(&gt.bbox) >= 0.5)
                {
                    correct += 1;
                }
            }
        }
        assert!(total >= 10);
        assert_eq!(correct, total, "clean detection must be exact");
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        let spec = SceneSpec {
            min_lights: 0,
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = SceneSpec {
            min_disk_diameter: 50.0,
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(SceneSpec::default().validate().is_ok());
    }
}
