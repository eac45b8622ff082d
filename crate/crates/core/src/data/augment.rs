//! The two augmentation families. Both return values clamped to `[0, 1]`.

use rand::Rng;

use super::ImageShape;
use crate::rng::Stream;

fn uniform(rng: &mut Stream, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn jitter_and_flip(
    img: &mut [f64],
    shape: ImageShape,
    gain: (f64, f64),
    bias: (f64, f64),
    flip: bool,
    rng: &mut Stream,
) {
    let plane = shape.height * shape.width;
    for c in 0..shape.channels {
        let (g, b) = (uniform(rng, gain), uniform(rng, bias));
        for v in &mut img[c * plane..(c + 1) * plane] {
            *v = *v * g + b;
        }
    }
    if flip {
        for row in img.chunks_mut(shape.width) {
            row.reverse();
        }
    }
}

fn clamp(img: &mut [f64]) {
    for v in img {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Zero-padded random crop, per-channel affine jitter and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardAug {
    /// Maximum crop offset in pixels.
    pub crop_pad: usize,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub flip_p: f64,
}

impl Default for StandardAug {
    fn default() -> Self {
        Self {
            crop_pad: 2,
            gain: (0.8, 1.2),
            bias: (-0.1, 0.1),
            flip_p: 0.5,
        }
    }
}

impl StandardAug {
    pub fn apply(&self, img: &[f64], shape: ImageShape, rng: &mut Stream) -> Vec<f64> {
        let (h, w) = (shape.height as isize, shape.width as isize);
        let p = self.crop_pad as isize;
        let dy = rng.random_range(-(p as i64)..=p as i64) as isize;
        let dx = rng.random_range(-(p as i64)..=p as i64) as isize;
        let mut out = vec![0.0; img.len()];
        for c in 0..shape.channels as isize {
            for y in 0..h {
                let sy = y + dy;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for x in 0..w {
                    let sx = x + dx;
                    if (0..w).contains(&sx) {
                        out[((c * h + y) * w + x) as usize] = img[((c * h + sy) * w + sx) as usize];
                    }
                }
            }
        }
        let flip = rng.random::<f64>() < self.flip_p;
        jitter_and_flip(&mut out, shape, self.gain, self.bias, flip, rng);
        clamp(&mut out);
        out
    }
}

pub fn standard_aug(img: &[f64], shape: ImageShape, rng: &mut Stream) -> Vec<f64> {
    StandardAug::default().apply(img, shape, rng)
}

/// Random resized crop, stronger jitter, flip and random grayscale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimclrAug {
    /// Fraction of the image area kept by the crop.
    pub area: (f64, f64),
    /// Crop aspect ratio, sampled log-uniformly.
    pub aspect: (f64, f64),
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub flip_p: f64,
    pub gray_p: f64,
}

impl Default for SimclrAug {
    fn default() -> Self {
        Self {
            area: (0.5, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            gain: (0.6, 1.4),
            bias: (-0.1, 0.1),
            flip_p: 0.5,
            gray_p: 0.2,
        }
    }
}

impl SimclrAug {
    pub fn apply(&self, img: &[f64], shape: ImageShape, rng: &mut Stream) -> Vec<f64> {
        let (h, w) = (shape.height as f64, shape.width as f64);
        let area = uniform(rng, self.area);
        let ratio = uniform(rng, (self.aspect.0.ln(), self.aspect.1.ln())).exp();
        let cw = ((area * ratio).sqrt() * w).clamp(1.0, w);
        let ch = ((area / ratio).sqrt() * h).clamp(1.0, h);
        let x0 = uniform(rng, (0.0, w - cw));
        let y0 = uniform(rng, (0.0, h - ch));
        let (sy, sx) = (ch / h, cw / w);
        let mut out = vec![0.0; img.len()];
        let (hh, ww) = (shape.height, shape.width);
        for c in 0..shape.channels {
            let plane = &img[c * hh * ww..(c + 1) * hh * ww];
            for y in 0..hh {
                let fy = (y0 + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
                let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
                let y_hi = (y_lo + 1).min(hh - 1);
                for x in 0..ww {
                    let fx = (x0 + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
                    let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
                    let x_hi = (x_lo + 1).min(ww - 1);
                    let top = plane[y_lo * ww + x_lo] * (1.0 - tx) + plane[y_lo * ww + x_hi] * tx;
                    let bottom =
                        plane[y_hi * ww + x_lo] * (1.0 - tx) + plane[y_hi * ww + x_hi] * tx;
                    out[(c * hh + y) * ww + x] = if ty == 0.0 {
                        top
                    } else {
                        top * (1.0 - ty) + bottom * ty
                    };
                }
            }
        }
        let flip = rng.random::<f64>() < self.flip_p;
        jitter_and_flip(&mut out, shape, self.gain, self.bias, flip, rng);
        if rng.random::<f64>() < self.gray_p {
            let plane = hh * ww;
            for i in 0..plane {
                let mean = (0..shape.channels).map(|c| out[c * plane + i]).sum::<f64>()
                    / shape.channels as f64;
                for c in 0..shape.channels {
                    out[c * plane + i] = mean;
                }
            }
        }
        clamp(&mut out);
        out
    }
}

pub fn simclr_aug(img: &[f64], shape: ImageShape, rng: &mut Stream) -> Vec<f64> {
    SimclrAug::default().apply(img, shape, rng)
}
