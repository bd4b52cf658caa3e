//! Flat key=value run settings: profile defaults, config file overlay,
//! command-line overrides, and the resolved-config echo.

use std::fmt::Write as _;
use std::path::Path;

use tlpatch_core::detector::DetectorConfig;
use tlpatch_core::synthetic::SceneSpec;
use tlpatch_core::types::{
    AttackConfig, PatchInit, SuppressChannel, SuppressionMode, TargetClassMapping,
};
use tlpatch_core::{Error, Result};

/// Everything a command can read, resolved from profile, file and
/// overrides in that order.
#[derive(Debug, Clone)]
pub struct Settings {
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    pub scene: SceneSpec,
    pub mapping_pairs: Vec<(usize, usize)>,
    pub scene_count: usize,
    pub light_width_m: f64,
    pub print_scale_factor: f64,
    pub dpi: u32,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            attack: AttackConfig::digital(),
            detector: DetectorConfig::default(),
            scene: SceneSpec::default(),
            mapping_pairs: vec![(0, 1)],
            scene_count: 20,
            light_width_m: 0.30,
            print_scale_factor: 2.0,
            dpi: 150,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: {value:?} is not a number")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: {value:?} is not a non-negative integer")))
}

fn parse_u32(key: &str, value: &str) -> Result<u32> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: {value:?} is not a non-negative integer")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: {value:?} is not a non-negative integer")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "key {key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_mapping(value: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let (from, to) = part.split_once(':').ok_or_else(|| {
            Error::config(format!("mapping entry {part:?} is not of the form from:to"))
        })?;
        pairs.push((
            parse_usize("mapping", from.trim())?,
            parse_usize("mapping", to.trim())?,
        ));
    }
    Ok(pairs)
}

impl Settings {
    pub fn with_profile(profile: Option<&str>) -> Result<Self> {
        let mut settings = Settings::default();
        if let Some(name) = profile {
            settings.attack = AttackConfig::profile(name)?;
        }
        Ok(settings)
    }

    /// Overlays a flat key=value file. Lines are `key = value`, blank
    /// lines and `#` comments allowed, every key single-use.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("--config {}: {e}", path.display())))?;
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}: line {}: expected key = value",
                    path.display(),
                    idx + 1
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!(
                    "{}: line {}: key {key:?} appears twice",
                    path.display(),
                    idx + 1
                )));
            }
            self.apply_kv(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override from the command line.
    pub fn apply_set(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set {pair:?} is not of the form key=value")))?;
        self.apply_kv(key.trim(), value.trim())
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.attack.alpha = parse_f64(key, value)?,
            "beta" => self.attack.beta = parse_f64(key, value)?,
            "gamma" => self.attack.gamma = parse_f64(key, value)?,
            "delta" => self.attack.delta = parse_f64(key, value)?,
            "pgd_steps" => self.attack.pgd_steps = parse_u32(key, value)?,
            "learning_rate" => self.attack.learning_rate = parse_f64(key, value)?,
            "scale_min" => self.attack.scale_range.0 = parse_f64(key, value)?,
            "scale_max" => self.attack.scale_range.1 = parse_f64(key, value)?,
            "eval_scale" => self.attack.eval_scale = parse_f64(key, value)?,
            "seed" => self.attack.seed = parse_u64(key, value)?,
            "patch_side" => self.attack.patch_side = parse_usize(key, value)?,
            "epochs" => self.attack.epochs = parse_u32(key, value)?,
            "sign_gradient" => self.attack.sign_gradient = parse_bool(key, value)?,
            "reset_moments_per_box" => {
                self.attack.reset_moments_per_box = parse_bool(key, value)?
            }
            "init" => {
                self.attack.init = match value {
                    "gray" => PatchInit::Gray,
                    "random" => PatchInit::RandomUniform,
                    _ => {
                        return Err(Error::config(format!(
                            "key init: expected gray or random, got {value:?}"
                        )))
                    }
                }
            }
            "suppress_channel" => {
                self.attack.suppress_channel = match value {
                    "red" => SuppressChannel::Red,
                    "green" => SuppressChannel::Green,
                    _ => {
                        return Err(Error::config(format!(
                            "key suppress_channel: expected red or green, got {value:?}"
                        )))
                    }
                }
            }
            "suppression_mode" => {
                self.attack.suppression_mode = match value {
                    "dominance" => SuppressionMode::Dominance,
                    "raw" => SuppressionMode::RawChannel,
                    _ => {
                        return Err(Error::config(format!(
                            "key suppression_mode: expected dominance or raw, got {value:?}"
                        )))
                    }
                }
            }
            "eot_enabled" => self.attack.eot.enabled = parse_bool(key, value)?,
            "eot_rot_xy_min" => self.attack.eot.rot_xy_deg.0 = parse_f64(key, value)?,
            "eot_rot_xy_max" => self.attack.eot.rot_xy_deg.1 = parse_f64(key, value)?,
            "eot_rot_z_min" => self.attack.eot.rot_z_deg.0 = parse_f64(key, value)?,
            "eot_rot_z_max" => self.attack.eot.rot_z_deg.1 = parse_f64(key, value)?,
            "eot_brightness_min" => self.attack.eot.brightness.0 = parse_f64(key, value)?,
            "eot_brightness_max" => self.attack.eot.brightness.1 = parse_f64(key, value)?,
            "eot_translate_pad" => self.attack.eot.translate_pad_px = parse_f64(key, value)?,
            "mapping" => self.mapping_pairs = parse_mapping(value)?,
            "detector_cell_size" => self.detector.cell_size = parse_usize(key, value)?,
            "detector_objectness_gain" => self.detector.objectness_gain = parse_f64(key, value)?,
            "detector_objectness_threshold" => {
                self.detector.objectness_threshold = parse_f64(key, value)?
            }
            "detector_context_weight" => self.detector.context_weight = parse_f64(key, value)?,
            "detector_conf_threshold" => self.detector.conf_threshold = parse_f64(key, value)?,
            "detector_chroma_threshold" => {
                self.detector.chroma_threshold = parse_f64(key, value)?
            }
            "detector_min_blob_area" => self.detector.min_blob_area = parse_usize(key, value)?,
            "scene_width" => self.scene.image_width = parse_usize(key, value)?,
            "scene_height" => self.scene.image_height = parse_usize(key, value)?,
            "scene_min_lights" => self.scene.min_lights = parse_usize(key, value)?,
            "scene_max_lights" => self.scene.max_lights = parse_usize(key, value)?,
            "scene_min_disk_diameter" => self.scene.min_disk_diameter = parse_f64(key, value)?,
            "scene_max_disk_diameter" => self.scene.max_disk_diameter = parse_f64(key, value)?,
            "scene_green_light_fraction" => {
                self.scene.green_light_fraction = parse_f64(key, value)?
            }
            "scene_reserved_scale" => self.scene.reserved_scale = parse_f64(key, value)?,
            "scene_background_level" => self.scene.background_level = parse_f64(key, value)?,
            "scene_background_jitter" => self.scene.background_jitter = parse_f64(key, value)?,
            "scene_disk_level" => self.scene.disk_level = parse_f64(key, value)?,
            "scene_off_channel_level" => self.scene.off_channel_level = parse_f64(key, value)?,
            "scene_housing_level" => self.scene.housing_level = parse_f64(key, value)?,
            "scene_housing_pad_frac" => self.scene.housing_pad_frac = parse_f64(key, value)?,
            "scene_count" => self.scene_count = parse_usize(key, value)?,
            "light_width_m" => self.light_width_m = parse_f64(key, value)?,
            "print_scale_factor" => self.print_scale_factor = parse_f64(key, value)?,
            "dpi" => self.dpi = parse_u32(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn mapping(&self) -> Result<TargetClassMapping> {
        TargetClassMapping::new(self.mapping_pairs.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.detector.validate()?;
        self.scene.validate()?;
        self.mapping()?;
        if self.scene_count == 0 {
            return Err(Error::config("scene_count must be at least 1"));
        }
        if !self.light_width_m.is_finite() || self.light_width_m <= 0.0 {
            return Err(Error::config("light_width_m must be positive"));
        }
        if !self.print_scale_factor.is_finite() || self.print_scale_factor <= 0.0 {
            return Err(Error::config("print_scale_factor must be positive"));
        }
        Ok(())
    }

    /// Serializes every key back out, alphabetically, in the same format
    /// the loader reads.
    pub fn resolved(&self) -> String {
        let mapping = self
            .mapping_pairs
            .iter()
            .map(|(a, b)| format!("{a}:{b}"))
            .collect::<Vec<_>>()
            .join(",");
        let init = match self.attack.init {
            PatchInit::Gray => "gray",
            PatchInit::RandomUniform => "random",
        };
        let channel = match self.attack.suppress_channel {
            SuppressChannel::Red => "red",
            SuppressChannel::Green => "green",
        };
        let mode = match self.attack.suppression_mode {
            SuppressionMode::Dominance => "dominance",
            SuppressionMode::RawChannel => "raw",
        };
        let mut entries: Vec<(&str, String)> = vec![
            ("alpha", self.attack.alpha.to_string()),
            ("beta", self.attack.beta.to_string()),
            ("gamma", self.attack.gamma.to_string()),
            ("delta", self.attack.delta.to_string()),
            ("pgd_steps", self.attack.pgd_steps.to_string()),
            ("learning_rate", self.attack.learning_rate.to_string()),
            ("scale_min", self.attack.scale_range.0.to_string()),
            ("scale_max", self.attack.scale_range.1.to_string()),
            ("eval_scale", self.attack.eval_scale.to_string()),
            ("seed", self.attack.seed.to_string()),
            ("patch_side", self.attack.patch_side.to_string()),
            ("epochs", self.attack.epochs.to_string()),
            ("sign_gradient", self.attack.sign_gradient.to_string()),
            (
                "reset_moments_per_box",
                self.attack.reset_moments_per_box.to_string(),
            ),
            ("init", init.to_string()),
            ("suppress_channel", channel.to_string()),
            ("suppression_mode", mode.to_string()),
            ("eot_enabled", self.attack.eot.enabled.to_string()),
            ("eot_rot_xy_min", self.attack.eot.rot_xy_deg.0.to_string()),
            ("eot_rot_xy_max", self.attack.eot.rot_xy_deg.1.to_string()),
            ("eot_rot_z_min", self.attack.eot.rot_z_deg.0.to_string()),
            ("eot_rot_z_max", self.attack.eot.rot_z_deg.1.to_string()),
            (
                "eot_brightness_min",
                self.attack.eot.brightness.0.to_string(),
            ),
            (
                "eot_brightness_max",
                self.attack.eot.brightness.1.to_string(),
            ),
            (
                "eot_translate_pad",
                self.attack.eot.translate_pad_px.to_string(),
            ),
            ("mapping", mapping),
            ("detector_cell_size", self.detector.cell_size.to_string()),
            (
                "detector_objectness_gain",
                self.detector.objectness_gain.to_string(),
            ),
            (
                "detector_objectness_threshold",
                self.detector.objectness_threshold.to_string(),
            ),
            (
                "detector_context_weight",
                self.detector.context_weight.to_string(),
            ),
            (
                "detector_conf_threshold",
                self.detector.conf_threshold.to_string(),
            ),
            (
                "detector_chroma_threshold",
                self.detector.chroma_threshold.to_string(),
            ),
            (
                "detector_min_blob_area",
                self.detector.min_blob_area.to_string(),
            ),
            ("scene_width", self.scene.image_width.to_string()),
            ("scene_height", self.scene.image_height.to_string()),
            ("scene_min_lights", self.scene.min_lights.to_string()),
            ("scene_max_lights", self.scene.max_lights.to_string()),
            (
                "scene_min_disk_diameter",
                self.scene.min_disk_diameter.to_string(),
            ),
            (
                "scene_max_disk_diameter",
                self.scene.max_disk_diameter.to_string(),
            ),
            (
                "scene_green_light_fraction",
                self.scene.green_light_fraction.to_string(),
            ),
            (
                "scene_reserved_scale",
                self.scene.reserved_scale.to_string(),
            ),
            (
                "scene_background_level",
                self.scene.background_level.to_string(),
            ),
            (
                "scene_background_jitter",
                self.scene.background_jitter.to_string(),
            ),
            ("scene_disk_level", self.scene.disk_level.to_string()),
            (
                "scene_off_channel_level",
                self.scene.off_channel_level.to_string(),
            ),
            (
                "scene_housing_level",
                self.scene.housing_level.to_string(),
            ),
            (
                "scene_housing_pad_frac",
                self.scene.housing_pad_frac.to_string(),
            ),
            ("scene_count", self.scene_count.to_string()),
            ("light_width_m", self.light_width_m.to_string()),
            (
                "print_scale_factor",
                self.print_scale_factor.to_string(),
            ),
            ("dpi", self.dpi.to_string()),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (key, value) in entries {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
