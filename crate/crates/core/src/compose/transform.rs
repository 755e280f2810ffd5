//! Geometric augmentation of cutouts and their placement on a canvas.

use image::{Rgba, RgbaImage};
use rand::Rng;

use crate::foreground::ForegroundAsset;
use crate::mask::InstanceMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    /// Degrees, counter-clockwise in image coordinates.
    pub rotation: f64,
    pub scale: f64,
}

impl AugParams {
    pub const IDENTITY: AugParams = AugParams {
        rotation: 0.0,
        scale: 1.0,
    };
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// rotation ~ U[-range, range], scale ~ U[lo, hi]. Always consumes two draws.
pub fn sample_augmentation(rng: &mut impl Rng, rotation_range: f64, scale_range: (f64, f64)) -> AugParams {
    let rotation = uniform(rng, -rotation_range, rotation_range);
    let scale = uniform(rng, scale_range.0, scale_range.1);
    AugParams { rotation, scale }
}

/// A cutout after augmentation, cropped to the tight box of its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub rgba: RgbaImage,
    pub mask: InstanceMask,
}

/// Rotate then scale about the cutout centre. Colour is resampled
/// bilinearly with alpha weighting; the mask is resampled bilinearly and
/// re-binarized at 0.5. `None` when nothing survives.
pub fn transform_asset(asset: &ForegroundAsset, aug: AugParams) -> Option<Transformed> {
    assert!(aug.scale > 0.0, "scale must be positive");
    let (sw, sh) = asset.rgba.dimensions();
    let (cx, cy) = (sw as f64 / 2.0, sh as f64 / 2.0);
    let (sin, cos) = aug.rotation.to_radians().sin_cos();
    let s = aug.scale;
    let fwd = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (s * (cos * dx - sin * dy), s * (sin * dx + cos * dy))
    };
    let corners = [
        fwd(0.0, 0.0),
        fwd(sw as f64, 0.0),
        fwd(0.0, sh as f64),
        fwd(sw as f64, sh as f64),
    ];
    let min_x = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let ow = ((max_x - min_x - 1e-9).ceil() as u32).max(1);
    let oh = ((max_y - min_y - 1e-9).ceil() as u32).max(1);
    // output canvas centred on the transformed centre
    let (ocx, ocy) = (ow as f64 / 2.0, oh as f64 / 2.0);

    let src = &asset.rgba;
    let mask_at = |x: i64, y: i64| -> f64 {
        if asset.mask.get_signed(x, y) {
            1.0
        } else {
            0.0
        }
    };
    let mut mask = InstanceMask::new(ow, oh);
    let mut rgba = RgbaImage::new(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (dx, dy) = ((ox as f64 + 0.5 - ocx) / s, (oy as f64 + 0.5 - ocy) / s);
            // inverse rotation, then back to pixel-index coordinates
            let sx = cos * dx + sin * dy + cx - 0.5;
            let sy = -sin * dx + cos * dy + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ];
            let m: f64 = taps.iter().map(|&(x, y, w)| w * mask_at(x, y)).sum();
            if m < 0.5 {
                continue;
            }
            let mut acc = [0.0f64; 3];
            for &(x, y, w) in &taps {
                let a = w * mask_at(x, y);
                if a > 0.0 {
                    let p = src.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        acc[c] += a * p[c] as f64;
                    }
                }
            }
            let rgb = acc.map(|v| (v / m + 0.5).floor().clamp(0.0, 255.0) as u8);
            mask.set(ox, oy, true);
            rgba.put_pixel(ox, oy, Rgba([rgb[0], rgb[1], rgb[2], 255]));
        }
    }
    let bbox = mask.bbox()?;
    let mask = mask.crop(bbox);
    let rgba = image::imageops::crop_imm(&rgba, bbox.0, bbox.1, bbox.2, bbox.3).to_image();
    Some(Transformed { rgba, mask })
}

/// Mask pixels that land inside a `bg_w` x `bg_h` canvas at `offset`.
pub fn visible_area(mask: &InstanceMask, offset: (i64, i64), bg_w: u32, bg_h: u32) -> u64 {
    let (w, h) = mask.dims();
    let x_lo = (-offset.0).max(0) as u32;
    let y_lo = (-offset.1).max(0) as u32;
    let x_hi = (bg_w as i64 - offset.0).clamp(0, w as i64) as u32;
    let y_hi = (bg_h as i64 - offset.1).clamp(0, h as i64) as u32;
    let mut n = 0;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            n += mask.get(x, y) as u64;
        }
    }
    n
}

/// Number of rejection-sampling attempts before the centred fallback.
pub const PLACE_TRIES: usize = 100;

/// Top-left offset such that at least `min_visible_fraction` of the mask
/// stays inside the canvas: rejection sampling over every offset that keeps
/// at least one column and row in frame, then the centred position. `None`
/// when both fail.
pub fn place(
    mask: &InstanceMask,
    bg_dims: (u32, u32),
    rng: &mut impl Rng,
    min_visible_fraction: f64,
) -> Option<(i64, i64)> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let (bw, bh) = (bg_dims.0 as i64, bg_dims.1 as i64);
    let need = min_visible_fraction * mask.area() as f64;
    let ok = |o: (i64, i64)| visible_area(mask, o, bg_dims.0, bg_dims.1) as f64 >= need - 1e-9;
    for _ in 0..PLACE_TRIES {
        let o = (rng.random_range(-w + 1..bw), rng.random_range(-h + 1..bh));
        if ok(o) {
            return Some(o);
        }
    }
    let centred = ((bw - w).div_euclid(2), (bh - h).div_euclid(2));
    ok(centred).then_some(centred)
}
