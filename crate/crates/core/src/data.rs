//! Disk formats: side-by-side image datasets, patch bundles with
//! integrity hashes, and print-resolution exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageReader, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::resize_bilinear;
use crate::error::{Error, Result};
use crate::types::{AnnotatedImage, AttackConfig, BBox, GtBox, ImageTensor, Patch};

/// Raw patch payload header.
pub const PATCH_MAGIC: &[u8; 7] = b"TLPF64\0";

/// Largest printable patch side.
pub const MAX_PRINT_SIDE_M: f64 = 2.0;

const METERS_PER_INCH: f64 = 0.0254;

/// An image dataset: class names indexed by id plus annotated frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

fn data_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::data(format!("{}: {what}", path.display()))
}

/// Loads an RGB image into a float tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .map_err(|e| data_err(path, e))?
        .decode()
        .map_err(|e| data_err(path, e))?
        .to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 65535.0;
        }
    }
    Ok(out)
}

/// Saves a float tensor as a 16-bit PNG.
pub fn save_image(path: &Path, pixels: &ImageTensor) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let img = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u16; 3];
        for c in 0..3 {
            let v = pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0);
            px[c] = (v * 65535.0).round() as u16;
        }
        Rgb(px)
    });
    img.save(path).map_err(|e| data_err(path, e))?;
    Ok(())
}

fn parse_annotations(path: &Path, w: usize, h: usize, n_classes: usize) -> Result<Vec<GtBox>> {
    let content = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut boxes = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(data_err(
                path,
                format!("line {line_no}: expected 5 fields, found {}", parts.len()),
            ));
        }
        let class_id: usize = parts[0].parse().map_err(|_| {
            data_err(path, format!("line {line_no}: bad class id {:?}", parts[0]))
        })?;
        if class_id >= n_classes {
            return Err(data_err(
                path,
                format!("line {line_no}: class id {class_id} outside the {n_classes} known classes"),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (i, raw) in parts[1..].iter().enumerate() {
            vals[i] = raw
                .parse()
                .map_err(|_| data_err(path, format!("line {line_no}: bad number {raw:?}")))?;
            if !vals[i].is_finite() {
                return Err(data_err(path, format!("line {line_no}: non-finite value")));
            }
        }
        let [cx, cy, bw, bh] = vals;
        let (w_f, h_f) = (w as f64, h as f64);
        let x0 = (cx - bw / 2.0) * w_f;
        let y0 = (cy - bh / 2.0) * h_f;
        let x1 = (cx + bw / 2.0) * w_f;
        let y1 = (cy + bh / 2.0) * h_f;
        if x0 < 0.0 || y0 < 0.0 || x1 > w_f || y1 > h_f {
            log::warn!(
                "{}: line {line_no}: box ({x0:.2}, {y0:.2}, {x1:.2}, {y1:.2}) \
                 leaves the {w}x{h} frame, clipping",
                path.display()
            );
        }
        let bbox = BBox::new(
            x0.clamp(0.0, w_f),
            y0.clamp(0.0, h_f),
            x1.clamp(0.0, w_f),
            y1.clamp(0.0, h_f),
        )
        .map_err(|e| data_err(path, format!("line {line_no}: {e}")))?;
        if bbox.width() == 0.0 || bbox.height() == 0.0 {
            return Err(data_err(
                path,
                format!("line {line_no}: box degenerates after clipping"),
            ));
        }
        boxes.push(GtBox { bbox, class_id });
    }
    Ok(boxes)
}

/// Loads a directory holding `classes.txt` plus `<name>.png` / `<name>.txt`
/// pairs, one annotation per line as `class_id cx cy w h` with
/// center-normalized coordinates. Images come back sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let classes_path = dir.join("classes.txt");
    let class_names: Vec<String> = fs::read_to_string(&classes_path)
        .map_err(|e| data_err(&classes_path, e))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if class_names.is_empty() {
        return Err(data_err(&classes_path, "no class names"));
    }
    let mut png_paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    png_paths.sort();
    if png_paths.is_empty() {
        return Err(data_err(dir, "no .png images"));
    }
    let mut images = Vec::with_capacity(png_paths.len());
    for png in &png_paths {
        let pixels = load_image(png)?;
        let (h, w, _) = pixels.dim();
        let ann = png.with_extension("txt");
        if !ann.exists() {
            return Err(data_err(&ann, "annotation file missing"));
        }
        let boxes = parse_annotations(&ann, w, h, class_names.len())?;
        let id = png
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        images.push(AnnotatedImage::new(id, pixels, boxes).map_err(|e| data_err(png, e))?);
    }
    Ok(Dataset {
        class_names,
        images,
    })
}

/// Writes a dataset in the layout [`load_dataset`] reads. Coordinates are
/// printed with full round-trip precision.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    let classes = dataset.class_names.join("\n") + "\n";
    fs::write(dir.join("classes.txt"), classes).map_err(|e| data_err(dir, e))?;
    for image in &dataset.images {
        let png = dir.join(format!("{}.png", image.id));
        save_image(&png, &image.pixels)?;
        let (w_f, h_f) = (image.width() as f64, image.height() as f64);
        let mut lines = String::new();
        for gt in &image.boxes {
            let (cx, cy) = gt.bbox.center();
            lines.push_str(&format!(
                "{} {} {} {} {}\n",
                gt.class_id,
                cx / w_f,
                cy / h_f,
                gt.bbox.width() / w_f,
                gt.bbox.height() / h_f,
            ));
        }
        fs::write(png.with_extension("txt"), lines).map_err(|e| data_err(&png, e))?;
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            acc.push_str(&format!("{b:02x}"));
            acc
        })
}

/// Sidecar metadata stored with a trained patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub schema_version: u32,
    pub created_unix: u64,
    pub class_names: Vec<String>,
    pub mapping: BTreeMap<usize, usize>,
    pub config: AttackConfig,
    pub train_dataset: String,
    #[serde(default)]
    pub patch_sha256: String,
    #[serde(default)]
    pub png_sha256: String,
}

/// Current bundle schema.
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

fn encode_patch(patch: &Patch) -> Vec<u8> {
    let side = patch.side();
    let mut bytes = Vec::with_capacity(11 + side * side * 24);
    bytes.extend_from_slice(PATCH_MAGIC);
    bytes.extend_from_slice(&(side as u32).to_le_bytes());
    for v in patch.pixels().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_patch(path: &Path, bytes: &[u8]) -> Result<Patch> {
    if bytes.len() < PATCH_MAGIC.len() + 4 || &bytes[..PATCH_MAGIC.len()] != PATCH_MAGIC {
        return Err(data_err(path, "not a raw patch payload"));
    }
    let mut side_bytes = [0u8; 4];
    side_bytes.copy_from_slice(&bytes[PATCH_MAGIC.len()..PATCH_MAGIC.len() + 4]);
    let side = u32::from_le_bytes(side_bytes) as usize;
    let expected = PATCH_MAGIC.len() + 4 + side * side * 24;
    if bytes.len() != expected {
        return Err(data_err(
            path,
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut pixels = Array3::zeros((side, side, 3));
    let mut offset = PATCH_MAGIC.len() + 4;
    for v in pixels.iter_mut() {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[offset..offset + 8]);
        *v = f64::from_le_bytes(raw);
        offset += 8;
    }
    Patch::new(pixels).map_err(|e| data_err(path, e))
}

/// Writes `patch.f64` (exact float payload), `patch.png` (16-bit preview)
/// and `meta.json` into `dir`, filling the integrity hashes.
pub fn save_patch_bundle(dir: &Path, patch: &Patch, mut meta: BundleMeta) -> Result<BundleMeta> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    let payload = encode_patch(patch);
    meta.patch_sha256 = sha256_hex(&payload);
    let raw_path = dir.join("patch.f64");
    fs::write(&raw_path, &payload).map_err(|e| data_err(&raw_path, e))?;
    let png_path = dir.join("patch.png");
    save_image(&png_path, patch.pixels())?;
    let png_bytes = fs::read(&png_path).map_err(|e| data_err(&png_path, e))?;
    meta.png_sha256 = sha256_hex(&png_bytes);
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&meta_path, json).map_err(|e| data_err(&meta_path, e))?;
    Ok(meta)
}

/// Reads a bundle back, verifying both integrity hashes.
pub fn load_patch_bundle(dir: &Path) -> Result<(Patch, BundleMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| data_err(&meta_path, e))?,
    )?;
    let raw_path = dir.join("patch.f64");
    let payload = fs::read(&raw_path).map_err(|e| data_err(&raw_path, e))?;
    if sha256_hex(&payload) != meta.patch_sha256 {
        return Err(data_err(&raw_path, "sha256 mismatch, payload was modified"));
    }
    let patch = decode_patch(&raw_path, &payload)?;
    let png_path = dir.join("patch.png");
    let png_bytes = fs::read(&png_path).map_err(|e| data_err(&png_path, e))?;
    if sha256_hex(&png_bytes) != meta.png_sha256 {
        return Err(data_err(&png_path, "sha256 mismatch, preview was modified"));
    }
    Ok((patch, meta))
}

/// Print export description, also written as the sidecar JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintMeta {
    pub label: String,
    pub side_m: f64,
    pub side_px: u32,
    pub dpi: u32,
    pub scale_factor: f64,
    pub light_width_m: f64,
    pub source_patch_side: usize,
}

/// Paths and dimensions of one print export.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintExport {
    pub png_path: PathBuf,
    pub meta_path: PathBuf,
    pub meta: PrintMeta,
}

/// Resamples the patch to physical print resolution. The printed side is
/// `light_width_m * scale_factor`; anything over [`MAX_PRINT_SIDE_M`] is
/// refused.
pub fn export_print(
    patch: &Patch,
    light_width_m: f64,
    scale_factor: f64,
    dpi: u32,
    out_dir: &Path,
) -> Result<PrintExport> {
    if !light_width_m.is_finite() || light_width_m <= 0.0 {
        return Err(Error::config("light width must be positive"));
    }
    if !scale_factor.is_finite() || scale_factor <= 0.0 {
        return Err(Error::config("scale factor must be positive"));
    }
    if dpi < 72 {
        return Err(Error::config("dpi must be at least 72"));
    }
    let side_m = light_width_m * scale_factor;
    if side_m > MAX_PRINT_SIDE_M {
        return Err(Error::config(format!(
            "print side {side_m:.3} m exceeds the {MAX_PRINT_SIDE_M} m limit"
        )));
    }
    let side_px = (side_m / METERS_PER_INCH * dpi as f64).round() as u32;
    if side_px == 0 {
        return Err(Error::config("print resolves to zero pixels"));
    }
    let label = format!("{:.0}", side_m * 100.0);
    fs::create_dir_all(out_dir).map_err(|e| data_err(out_dir, e))?;
    let resized = resize_bilinear(patch.pixels(), side_px as usize, side_px as usize);
    let png_path = out_dir.join(format!("print_{label}x{label}cm.png"));
    save_image(&png_path, &resized)?;
    let meta = PrintMeta {
        label,
        side_m,
        side_px,
        dpi,
        scale_factor,
        light_width_m,
        source_patch_side: patch.side(),
    };
    let meta_path = png_path.with_extension("json");
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&meta_path, json).map_err(|e| data_err(&meta_path, e))?;
    Ok(PrintExport {
        png_path,
        meta_path,
        meta,
    })
}
