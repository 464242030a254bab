//! Deterministic synthetic grayscale images for tests, training and demos.

use rand::Rng;

use crate::image::Image;
use crate::rng;

/// Flat background with one high-frequency textured quadrant (top right).
pub fn quadrant_texture(size: usize) -> Image {
    let half = size / 2;
    Image::from_fn(size, size, |y, x| {
        if y < half && x >= half {
            0.5 + 0.4 * ((y as f64 * 2.1).sin() * (x as f64 * 1.7).cos())
        } else {
            0.5
        }
    })
}

/// Piecewise-smooth scene: a shaded background, a few soft discs and
/// rectangles, and one patch of oriented stripes.
pub fn scene(size_h: usize, size_w: usize, seed: u64) -> Image {
    let mut r = rng::rng(seed);
    let (h, w) = (size_h as f64, size_w as f64);
    let base = r.gen_range(0.2..0.6);
    let (gy, gx) = (r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3));
    let discs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (r.gen_range(0.0..h), r.gen_range(0.0..w), r.gen_range(0.08..0.25) * h, r.gen_range(-0.35..0.35)))
        .collect();
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let (y0, x0) = (r.gen_range(0.0..0.7 * h), r.gen_range(0.0..0.7 * w));
            (y0, x0, y0 + r.gen_range(0.1..0.3) * h, x0 + r.gen_range(0.1..0.3) * w, r.gen_range(-0.3..0.3))
        })
        .collect();
    let (sy, sx) = (r.gen_range(0.0..0.6 * h), r.gen_range(0.0..0.6 * w));
    let (ey, ex) = (sy + 0.4 * h, sx + 0.4 * w);
    let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
    let freq = r.gen_range(0.6..1.4);
    let amp = r.gen_range(0.1..0.25);

    Image::from_fn(size_h, size_w, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base + gy * yf / h + gx * xf / w;
        for &(cy, cx, rad, a) in &discs {
            let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
            v += a / (1.0 + ((d - rad) / 1.5).exp());
        }
        for &(y0, x0, y1, x1, a) in &rects {
            if yf >= y0 && yf < y1 && xf >= x0 && xf < x1 {
                v += a;
            }
        }
        if yf >= sy && yf < ey && xf >= sx && xf < ex {
            v += amp * (freq * (xf * theta.cos() + yf * theta.sin())).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// `n` scenes of `size×size` drawn from consecutive seeds.
pub fn training_set(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n as u64).map(|i| scene(size, size, seed.wrapping_mul(1000).wrapping_add(i))).collect()
}
