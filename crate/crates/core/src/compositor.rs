//! Differentiable patch compositing: placing a square patch directly under a
//! ground-truth box and rendering it into the image through a perspective
//! warp, brightness scaling and clamping. `apply_backward` is the exact
//! adjoint of `apply` with respect to the patch pixels.

use ndarray::Array3;
use rand::Rng;

use crate::types::{BBox, EotRanges, ImageTensor, Patch};

/// Where a patch goes for one ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    /// Square region in image coordinates.
    pub rect: BBox,
    /// The width multiple the rect was derived from.
    pub scale_factor: f64,
}

/// One sampled physical-world transform. `identity` leaves the patch
/// pixel-aligned and unscaled in brightness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub rot_x_deg: f64,
    pub rot_y_deg: f64,
    pub rot_z_deg: f64,
    pub brightness: f64,
    pub translate: (f64, f64),
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            rot_x_deg: 0.0,
            rot_y_deg: 0.0,
            rot_z_deg: 0.0,
            brightness: 1.0,
            translate: (0.0, 0.0),
        }
    }
}

/// Computes the patch placement for a ground-truth box: a square of side
/// `round(scale_factor * gt.width())`, horizontally centered on the box,
/// whose top edge sits on the box's bottom edge. Returns `None` when the
/// square would leave the image.
pub fn placement_for(
    gt: &BBox,
    image_w: usize,
    image_h: usize,
    scale_factor: f64,
) -> Option<Placement> {
    if !scale_factor.is_finite() || scale_factor <= 0.0 {
        return None;
    }
    let side = (scale_factor * gt.width()).round();
    if side < 1.0 {
        return None;
    }
    let (cx, _) = gt.center();
    let x_min = cx - side / 2.0;
    let x_max = x_min + side;
    let y_min = gt.y_max();
    let y_max = y_min + side;
    if x_min < 0.0 || y_min < 0.0 || x_max > image_w as f64 || y_max > image_h as f64 {
        return None;
    }
    let rect = BBox::new(x_min, y_min, x_max, y_max).ok()?;
    Some(Placement { rect, scale_factor })
}

/// Draws transform parameters from the configured intervals. With EOT
/// disabled this is the identity transform. The draw order is fixed so a
/// seeded RNG reproduces the same sequence.
pub fn sample_transform<R: Rng + ?Sized>(ranges: &EotRanges, rng: &mut R) -> TransformParams {
    if !ranges.enabled {
        return TransformParams::identity();
    }
    let (xy_lo, xy_hi) = ranges.rot_xy_deg;
    let (z_lo, z_hi) = ranges.rot_z_deg;
    let (b_lo, b_hi) = ranges.brightness;
    let pad = ranges.translate_pad_px;
    TransformParams {
        rot_x_deg: rng.random_range(xy_lo..=xy_hi),
        rot_y_deg: rng.random_range(xy_lo..=xy_hi),
        rot_z_deg: rng.random_range(z_lo..=z_hi),
        brightness: rng.random_range(b_lo..=b_hi),
        translate: (
            rng.random_range(-pad..=pad),
            rng.random_range(-pad..=pad),
        ),
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(inv)
}

/// Homography from patch-plane offsets (a, b), measured from the rect
/// center in image pixels, to homogeneous image coordinates. Out-of-plane
/// tilt is modeled as a 3D rotation of the patch plane viewed by a pinhole
/// camera at distance 2*side, which degenerates to the identity for zero
/// angles.
fn plane_homography(rect: &BBox, t: &TransformParams) -> [[f64; 3]; 3] {
    let s = rect.width();
    let f = 2.0 * s.max(1.0);
    let (cx, cy) = rect.center();
    let rx = t.rot_x_deg.to_radians();
    let ry = t.rot_y_deg.to_radians();
    let rz = t.rot_z_deg.to_radians();
    let (sx, cx_r) = rx.sin_cos();
    let (sy, cy_r) = ry.sin_cos();
    let (sz, cz_r) = rz.sin_cos();
    let rot_x = [[1.0, 0.0, 0.0], [0.0, cx_r, -sx], [0.0, sx, cx_r]];
    let rot_y = [[cy_r, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy_r]];
    let rot_z = [[cz_r, -sz, 0.0], [sz, cz_r, 0.0], [0.0, 0.0, 1.0]];
    let r = mat_mul(&rot_x, &mat_mul(&rot_y, &rot_z));
    [
        [f * r[0][0] + cx * r[2][0], f * r[0][1] + cx * r[2][1], cx * f],
        [f * r[1][0] + cy * r[2][0], f * r[1][1] + cy * r[2][1], cy * f],
        [r[2][0], r[2][1], f],
    ]
}

fn project(m: &[[f64; 3]; 3], a: f64, b: f64) -> Option<(f64, f64)> {
    let w = m[2][0] * a + m[2][1] * b + m[2][2];
    if w.abs() < 1e-9 {
        return None;
    }
    let x = (m[0][0] * a + m[0][1] * b + m[0][2]) / w;
    let y = (m[1][0] * a + m[1][1] * b + m[1][2]) / w;
    Some((x, y))
}

fn shifted_rect(rect: &BBox, translate: (f64, f64), image_w: usize, image_h: usize) -> BBox {
    // Jitter is clipped to the largest offset that keeps the rect inside the
    // image.
    let clip = |d: f64, lo: f64, hi: f64| {
        if lo <= hi {
            d.clamp(lo, hi)
        } else {
            0.0
        }
    };
    let dx = clip(
        translate.0,
        -rect.x_min(),
        image_w as f64 - rect.x_max(),
    );
    let dy = clip(
        translate.1,
        -rect.y_min(),
        image_h as f64 - rect.y_max(),
    );
    BBox::new(
        rect.x_min() + dx,
        rect.y_min() + dy,
        rect.x_max() + dx,
        rect.y_max() + dy,
    )
    .expect("shifting a valid rect keeps it valid")
}

/// Per-pixel bilinear sample description inside the warped footprint:
/// image pixel (y, x), the four patch neighbors and the lerp fractions.
struct SamplePoint {
    y: usize,
    x: usize,
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fx: f64,
    fy: f64,
}

/// Visits every image pixel whose center inverse-maps into the patch square.
/// The footprint depends only on geometry, never on pixel values.
fn for_each_sample<F: FnMut(&SamplePoint)>(
    patch_side: usize,
    placement: &Placement,
    t: &TransformParams,
    image_w: usize,
    image_h: usize,
    mut visit: F,
) {
    let rect = shifted_rect(&placement.rect, t.translate, image_w, image_h);
    let s = rect.width();
    let n = patch_side as f64;
    if s <= 0.0 || patch_side == 0 {
        return;
    }
    let m = plane_homography(&rect, t);
    let Some(m_inv) = invert3(&m) else {
        return;
    };
    // Conservative pixel bounds: the warped square is convex, so its image
    // is contained in the bounding box of the mapped corners.
    let half = s / 2.0;
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (ca, cb) in [
        (-half, -half),
        (half, -half),
        (-half, half),
        (half, half),
    ] {
        let Some((x, y)) = project(&m, ca, cb) else {
            return;
        };
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let x_start = (x_lo - 1.0).floor().max(0.0) as usize;
    let x_end = ((x_hi + 1.0).ceil() as usize).min(image_w);
    let y_start = (y_lo - 1.0).floor().max(0.0) as usize;
    let y_end = ((y_hi + 1.0).ceil() as usize).min(image_h);
    let to_patch = n / s;
    let last = patch_side - 1;
    for y in y_start..y_end {
        let py = y as f64 + 0.5;
        for x in x_start..x_end {
            let px = x as f64 + 0.5;
            let Some((a, b)) = project(&m_inv, px, py) else {
                continue;
            };
            let u = (a + half) * to_patch;
            let v = (b + half) * to_patch;
            if !(0.0..=n).contains(&u) || !(0.0..=n).contains(&v) {
                continue;
            }
            let fu = u - 0.5;
            let fv = v - 0.5;
            let j_raw = fu.floor();
            let i_raw = fv.floor();
            let fx = fu - j_raw;
            let fy = fv - i_raw;
            let j0 = j_raw.max(0.0).min(last as f64) as usize;
            let i0 = i_raw.max(0.0).min(last as f64) as usize;
            let j1 = (j_raw + 1.0).max(0.0).min(last as f64) as usize;
            let i1 = (i_raw + 1.0).max(0.0).min(last as f64) as usize;
            visit(&SamplePoint {
                y,
                x,
                i0,
                i1,
                j0,
                j1,
                fx,
                fy,
            });
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Renders the patch into the image: warp by `t`'s rotations into the
/// (jitter-shifted) placement rect, bilinear resample, scale by brightness
/// and clamp to [0, 1]. Pixels outside the warped footprint are returned
/// unchanged.
pub fn apply(
    image: &ImageTensor,
    patch: &Patch,
    placement: &Placement,
    t: &TransformParams,
) -> ImageTensor {
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    let p = patch.pixels();
    for_each_sample(patch.side(), placement, t, w, h, |sp| {
        for c in 0..3 {
            let top = lerp(p[[sp.i0, sp.j0, c]], p[[sp.i0, sp.j1, c]], sp.fx);
            let bot = lerp(p[[sp.i1, sp.j0, c]], p[[sp.i1, sp.j1, c]], sp.fx);
            let v = t.brightness * lerp(top, bot, sp.fy);
            out[[sp.y, sp.x, c]] = v.clamp(0.0, 1.0);
        }
    });
    out
}

/// Adjoint of `apply` w.r.t. the patch pixels: scatters an upstream
/// gradient on the composited image back through clamp, brightness and the
/// bilinear warp. The clamp gradient passes through inside [0, 1] and is
/// zero outside.
pub fn apply_backward(
    patch: &Patch,
    placement: &Placement,
    t: &TransformParams,
    grad_out: &ImageTensor,
) -> Array3<f64> {
    let (h, w, _) = grad_out.dim();
    let n = patch.side();
    let mut grad = Array3::zeros((n, n, 3));
    let p = patch.pixels();
    for_each_sample(n, placement, t, w, h, |sp| {
        let w00 = (1.0 - sp.fx) * (1.0 - sp.fy);
        let w01 = sp.fx * (1.0 - sp.fy);
        let w10 = (1.0 - sp.fx) * sp.fy;
        let w11 = sp.fx * sp.fy;
        for c in 0..3 {
            let top = lerp(p[[sp.i0, sp.j0, c]], p[[sp.i0, sp.j1, c]], sp.fx);
            let bot = lerp(p[[sp.i1, sp.j0, c]], p[[sp.i1, sp.j1, c]], sp.fx);
            let pre = t.brightness * lerp(top, bot, sp.fy);
            if !(0.0..=1.0).contains(&pre) {
                continue;
            }
            let g = grad_out[[sp.y, sp.x, c]] * t.brightness;
            if g == 0.0 {
                continue;
            }
            grad[[sp.i0, sp.j0, c]] += g * w00;
            grad[[sp.i0, sp.j1, c]] += g * w01;
            grad[[sp.i1, sp.j0, c]] += g * w10;
            grad[[sp.i1, sp.j1, c]] += g * w11;
        }
    });
    grad
}

/// Bilinear resize with the same sampling convention as `apply`, so that
/// compositing at identity and cropping the rect reproduces this exactly.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let mut out = Array3::zeros((out_h, out_w, ch));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fv = (oy as f64 + 0.5) * sy - 0.5;
        let i_raw = fv.floor();
        let fy = fv - i_raw;
        let i0 = i_raw.max(0.0).min((h - 1) as f64) as usize;
        let i1 = (i_raw + 1.0).max(0.0).min((h - 1) as f64) as usize;
        for ox in 0..out_w {
            let fu = (ox as f64 + 0.5) * sx - 0.5;
            let j_raw = fu.floor();
            let fx = fu - j_raw;
            let j0 = j_raw.max(0.0).min((w - 1) as f64) as usize;
            let j1 = (j_raw + 1.0).max(0.0).min((w - 1) as f64) as usize;
            for c in 0..ch {
                let top = lerp(src[[i0, j0, c]], src[[i0, j1, c]], fx);
                let bot = lerp(src[[i1, j0, c]], src[[i1, j1, c]], fx);
                out[[oy, ox, c]] = lerp(top, bot, fy);
            }
        }
    }
    out
}
