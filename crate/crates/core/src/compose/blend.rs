//! Feathered pasting: the binary mask blurred by a Gaussian is the alpha.

use std::collections::VecDeque;

use image::{Rgb, RgbImage, RgbaImage};

use crate::mask::InstanceMask;

/// Alpha values this close to 0 or 1 are snapped to exactly 0 or 1.
pub const ALPHA_SNAP: f64 = 1e-6;

pub fn kernel_radius(sigma: f64) -> usize {
    if sigma <= 0.0 {
        0
    } else {
        (3.0 * sigma).ceil() as usize
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = kernel_radius(sigma) as i64;
    if r == 0 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Alpha over the mask canvas padded by the kernel radius on every side;
/// row-major, `(w + 2r) x (h + 2r)`.
pub fn alpha_field(mask: &InstanceMask, sigma: f64) -> (Vec<f64>, usize, usize) {
    let r = kernel_radius(sigma);
    let k = gaussian_kernel(sigma);
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let at = |x: usize, y: usize| -> f64 {
        if x >= r && y >= r && x - r < w && y - r < h && mask.get((x - r) as u32, (y - r) as u32) {
            1.0
        } else {
            0.0
        }
    };
    let mut horiz = vec![0.0; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as i64 + i as i64 - r as i64;
                if sx >= 0 && (sx as usize) < pw {
                    acc += kv * at(sx as usize, y);
                }
            }
            horiz[y * pw + x] = acc;
        }
    }
    let mut alpha = vec![0.0; pw * ph];
    for y in 0..ph {
        for x in 0..pw {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as i64 + i as i64 - r as i64;
                if sy >= 0 && (sy as usize) < ph {
                    acc += kv * horiz[sy as usize * pw + x];
                }
            }
            alpha[y * pw + x] = if acc >= 1.0 - ALPHA_SNAP {
                1.0
            } else if acc <= ALPHA_SNAP {
                0.0
            } else {
                acc
            };
        }
    }
    (alpha, pw, ph)
}

/// Foreground colour over the padded canvas: masked pixels keep their own
/// colour, every other pixel copies the neighbour that first reaches it in a
/// breadth-first sweep outward from the mask.
fn extended_colors(rgba: &RgbaImage, mask: &InstanceMask, r: usize) -> Vec<[u8; 3]> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let mut color = vec![[0u8; 3]; pw * ph];
    let mut filled = vec![false; pw * ph];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as u32, y as u32) {
                let i = (y + r) * pw + x + r;
                let p = rgba.get_pixel(x as u32, y as u32);
                color[i] = [p[0], p[1], p[2]];
                filled[i] = true;
                queue.push_back(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % pw, i / pw);
        let mut visit = |j: usize| {
            if !filled[j] {
                filled[j] = true;
                color[j] = color[i];
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < pw {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - pw);
        }
        if y + 1 < ph {
            visit(i + pw);
        }
    }
    color
}

/// Paste `rgba`/`mask` with its top-left at `offset`:
/// `out = a * fg + (1 - a) * bg` per channel, rounded half-up, where `a` is
/// the mask convolved with a Gaussian of std `sigma` (radius ceil(3 sigma)).
/// Pixels off the canvas are ignored.
pub fn blend(background: &mut RgbImage, rgba: &RgbaImage, mask: &InstanceMask, offset: (i64, i64), sigma: f64) {
    let r = kernel_radius(sigma);
    let (alpha, pw, ph) = alpha_field(mask, sigma);
    let colors = extended_colors(rgba, mask, r);
    let (bw, bh) = (background.width() as i64, background.height() as i64);
    for py in 0..ph {
        let y = offset.1 + py as i64 - r as i64;
        if y < 0 || y >= bh {
            continue;
        }
        for px in 0..pw {
            let x = offset.0 + px as i64 - r as i64;
            if x < 0 || x >= bw {
                continue;
            }
            let i = py * pw + px;
            let a = alpha[i];
            if a == 0.0 {
                continue;
            }
            let fg = colors[i];
            let dst = background.get_pixel_mut(x as u32, y as u32);
            if a == 1.0 {
                *dst = Rgb(fg);
                continue;
            }
            let bg = dst.0;
            *dst = Rgb([0, 1, 2].map(|c| (a * fg[c] as f64 + (1.0 - a) * bg[c] as f64 + 0.5).floor() as u8));
        }
    }
}
