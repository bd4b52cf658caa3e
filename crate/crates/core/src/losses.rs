//! Patch regularizers: smoothness (total variation) and lit-color
//! suppression. Every loss comes with a hand-written gradient w.r.t. the
//! patch pixels.

use ndarray::Array3;

use crate::types::{SuppressChannel, SuppressionMode};

/// Default smoothing constant inside the TV square root.
pub const TV_EPSILON_DEFAULT: f64 = 1e-8;

/// Standard deviation of the suppression blur kernel.
pub const SUPPRESSION_BLUR_SIGMA: f64 = 1.0;

/// Kernel radius; the blur window is (2 * radius + 1) squared.
pub const SUPPRESSION_BLUR_RADIUS: usize = 2;

fn assert_rgb(pixels: &Array3<f64>) {
    assert_eq!(pixels.dim().2, 3, "expected an (H, W, 3) tensor");
}

/// Isotropic total variation: mean over every (y, x, c) of
/// sqrt(dh^2 + dv^2 + epsilon), with forward differences that are zero at
/// the last column and row.
pub fn tv_loss(pixels: &Array3<f64>, epsilon: f64) -> f64 {
    tv_accumulate(pixels, epsilon, None)
}

/// Same value as [`tv_loss`] plus its gradient. Where the square root hits
/// zero (only possible with epsilon = 0) the subgradient is zero.
pub fn tv_loss_with_grad(pixels: &Array3<f64>, epsilon: f64) -> (f64, Array3<f64>) {
    let mut grad = Array3::zeros(pixels.dim());
    let value = tv_accumulate(pixels, epsilon, Some(&mut grad));
    (value, grad)
}

fn tv_accumulate(pixels: &Array3<f64>, epsilon: f64, mut grad: Option<&mut Array3<f64>>) -> f64 {
    assert_rgb(pixels);
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    let (h, w, _) = pixels.dim();
    let count = (h * w * 3) as f64;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = pixels[[y, x, c]];
                let dh = if x + 1 < w {
                    pixels[[y, x + 1, c]] - v
                } else {
                    0.0
                };
                let dv = if y + 1 < h {
                    pixels[[y + 1, x, c]] - v
                } else {
                    0.0
                };
                let r = (dh * dh + dv * dv + epsilon).sqrt();
                sum += r;
                if let Some(g) = grad.as_deref_mut() {
                    if r > 0.0 {
                        let scale = 1.0 / (r * count);
                        if x + 1 < w {
                            g[[y, x + 1, c]] += dh * scale;
                            g[[y, x, c]] -= dh * scale;
                        }
                        if y + 1 < h {
                            g[[y + 1, x, c]] += dv * scale;
                            g[[y, x, c]] -= dv * scale;
                        }
                    }
                }
            }
        }
    }
    sum / count
}

/// Unnormalized 5x5 Gaussian weights and their total, in a fixed row-major
/// order so the constant-input blur is exactly 1.
fn blur_kernel() -> ([[f64; 5]; 5], f64) {
    let r = SUPPRESSION_BLUR_RADIUS as isize;
    let two_sigma_sq = 2.0 * SUPPRESSION_BLUR_SIGMA * SUPPRESSION_BLUR_SIGMA;
    let mut k = [[0.0; 5]; 5];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / two_sigma_sq).exp();
            k[(dy + r) as usize][(dx + r) as usize] = w;
            total += w;
        }
    }
    (k, total)
}

/// Mirror indexing that excludes the border pixel (reflect-101).
fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = idx.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// How strongly the suppressed channel shines through the patch. In
/// dominance mode the per-pixel map is relu(own - max(other two)), blurred
/// by a 5x5 Gaussian with mirrored borders and averaged; a saturated pure
/// patch of the suppressed color scores exactly 1. Raw mode skips the
/// channel competition and averages the blurred channel itself.
pub fn suppression_loss(
    pixels: &Array3<f64>,
    channel: SuppressChannel,
    mode: SuppressionMode,
) -> f64 {
    suppression_impl(pixels, channel, mode, None)
}

/// Same value as [`suppression_loss`] plus its gradient. At the relu kink
/// and at channel ties the subgradient is zero / assigned to the first of
/// the two competitors.
pub fn suppression_loss_with_grad(
    pixels: &Array3<f64>,
    channel: SuppressChannel,
    mode: SuppressionMode,
) -> (f64, Array3<f64>) {
    let mut grad = Array3::zeros(pixels.dim());
    let value = suppression_impl(pixels, channel, mode, Some(&mut grad));
    (value, grad)
}

fn suppression_impl(
    pixels: &Array3<f64>,
    channel: SuppressChannel,
    mode: SuppressionMode,
    grad: Option<&mut Array3<f64>>,
) -> f64 {
    assert_rgb(pixels);
    let (h, w, _) = pixels.dim();
    let own = channel.index();
    let others: [usize; 2] = match channel {
        SuppressChannel::Red => [1, 2],
        SuppressChannel::Green => [0, 2],
    };
    // Per-pixel map plus, for the gradient, which input channel each map
    // entry differentiates into (-1 encodes a dead relu).
    let mut map = vec![0.0; h * w];
    let mut source = vec![(own, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match mode {
                SuppressionMode::Dominance => {
                    let a = pixels[[y, x, others[0]]];
                    let b = pixels[[y, x, others[1]]];
                    let (rival_idx, rival) = if a >= b { (others[0], a) } else { (others[1], b) };
                    let d = pixels[[y, x, own]] - rival;
                    if d > 0.0 {
                        map[i] = d;
                        source[i] = (rival_idx, 1.0);
                    } else {
                        source[i] = (rival_idx, 0.0);
                    }
                }
                SuppressionMode::RawChannel => {
                    map[i] = pixels[[y, x, own]];
                    source[i] = (own, 1.0);
                }
            }
        }
    }
    let (kernel, total) = blur_kernel();
    let r = SUPPRESSION_BLUR_RADIUS as isize;
    let count = (h * w) as f64;
    let mut sum = 0.0;
    let mut map_grad = grad.as_ref().map(|_| vec![0.0; h * w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = reflect(x as isize + dx, w);
                    let kw = kernel[(dy + r) as usize][(dx + r) as usize];
                    acc += kw * map[sy * w + sx];
                    if let Some(mg) = map_grad.as_mut() {
                        // d mean / d map[src] accumulates the transposed blur.
                        mg[sy * w + sx] += kw / (total * count);
                    }
                }
            }
            sum += acc / total;
        }
    }
    if let (Some(g), Some(mg)) = (grad, map_grad) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (rival_idx, active) = source[i];
                if active == 0.0 {
                    continue;
                }
                g[[y, x, own]] += mg[i];
                if matches!(mode, SuppressionMode::Dominance) {
                    g[[y, x, rival_idx]] -= mg[i];
                }
            }
        }
    }
    sum / count
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solid(h: usize, w: usize, rgb: [f64; 3]) -> Array3<f64> {
        let mut a = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    a[[y, x, c]] = rgb[c];
                }
            }
        }
        a
    }

    #[test]
    fn tv_hand_value_two_by_two() {
        // Columns [0, 1] in every row and channel: two unit horizontal
        // steps per channel over 12 terms gives 6 / 12 = 0.5.
        let mut p = Array3::zeros((2, 2, 3));
        for y in 0..2 {
            for c in 0..3 {
                p[[y, 1, c]] = 1.0;
            }
        }
        assert_eq!(tv_loss(&p, 0.0), 0.5);
    }

    #[test]
    fn tv_constant_patch_is_zero() {
        let p = solid(7, 7, [0.3, 0.3, 0.3]);
        assert_eq!(tv_loss(&p, 0.0), 0.0);
        let (v, g) = tv_loss_with_grad(&p, 0.0);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Array3::zeros((6, 5, 3));
        for v in p.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let eps = TV_EPSILON_DEFAULT;
        let (_, g) = tv_loss_with_grad(&p, eps);
        let h = 1e-6;
        for y in 0..6 {
            for x in 0..5 {
                for c in 0..3 {
                    let mut plus = p.clone();
                    plus[[y, x, c]] += h;
                    let mut minus = p.clone();
                    minus[[y, x, c]] -= h;
                    let fd = (tv_loss(&plus, eps) - tv_loss(&minus, eps)) / (2.0 * h);
                    let a = g[[y, x, c]];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!(
                        (fd - a).abs() / denom < 1e-4,
                        "tv grad at ({y}, {x}, {c}): fd {fd} vs {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn pure_green_scores_exactly_one() {
        let p = solid(9, 9, [0.0, 1.0, 0.0]);
        let v = suppression_loss(&p, SuppressChannel::Green, SuppressionMode::Dominance);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn pure_red_scores_zero_under_green_suppression() {
        let p = solid(9, 9, [1.0, 0.0, 0.0]);
        let v = suppression_loss(&p, SuppressChannel::Green, SuppressionMode::Dominance);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn red_green_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Array3::zeros((8, 8, 3));
        for v in p.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let mut swapped = p.clone();
        for y in 0..8 {
            for x in 0..8 {
                swapped[[y, x, 0]] = p[[y, x, 1]];
                swapped[[y, x, 1]] = p[[y, x, 0]];
            }
        }
        let green = suppression_loss(&p, SuppressChannel::Green, SuppressionMode::Dominance);
        let red = suppression_loss(&swapped, SuppressChannel::Red, SuppressionMode::Dominance);
        assert_eq!(green, red);
    }

    #[test]
    fn raw_channel_mode_averages_the_channel() {
        // Constant green level: blur of a constant is that constant.
        let p = solid(6, 6, [0.2, 0.7, 0.1]);
        let v = suppression_loss(&p, SuppressChannel::Green, SuppressionMode::RawChannel);
        assert!((v - 0.7).abs() < 1e-12);
    }

    #[test]
    fn suppression_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h_dim, w_dim) = (6, 6);
        let mut p = Array3::zeros((h_dim, w_dim, 3));
        // Keep every pixel away from the relu kink and channel ties so the
        // difference quotient stays on one smooth branch.
        for y in 0..h_dim {
            for x in 0..w_dim {
                let g: f64 = rng.random_range(0.0..1.0);
                let r: f64 = rng.random_range(0.0..1.0);
                let b: f64 = rng.random_range(0.0..1.0);
                let (r, b) = if (r - b).abs() < 0.05 { (r, b + 0.1) } else { (r, b) };
                let rival = r.max(b);
                let g = if (g - rival).abs() < 0.05 { g + 0.1 } else { g };
                p[[y, x, 0]] = r;
                p[[y, x, 1]] = g;
                p[[y, x, 2]] = b.min(1.0);
            }
        }
        for mode in [SuppressionMode::Dominance, SuppressionMode::RawChannel] {
            let (_, grad) = suppression_loss_with_grad(&p, SuppressChannel::Green, mode);
            let h = 1e-6;
            for y in 0..h_dim {
                for x in 0..w_dim {
                    for c in 0..3 {
                        let mut plus = p.clone();
                        plus[[y, x, c]] += h;
                        let mut minus = p.clone();
                        minus[[y, x, c]] -= h;
                        let fd = (suppression_loss(&plus, SuppressChannel::Green, mode)
                            - suppression_loss(&minus, SuppressChannel::Green, mode))
                            / (2.0 * h);
                        let a = grad[[y, x, c]];
                        let denom = fd.abs().max(a.abs()).max(1e-6);
                        assert!(
                            (fd - a).abs() / denom < 1e-4,
                            "suppress grad at ({y}, {x}, {c}) {mode:?}: fd {fd} vs {a}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_indexing_mirrors_without_repeating_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(3, 1), 0);
    }
}
