use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::seeds;

use super::Sample;

/// Largest rotation, in degrees, in either direction.
const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Random centred crop covering 50–100 % of each side, resized back.
    pub center_crop: bool,
}

#[derive(Clone, Copy, Debug)]
struct Transform {
    hflip: bool,
    vflip: bool,
    cos: f64,
    sin: f64,
    /// Source-space extent relative to the output (1 = no crop).
    zoom: f64,
}

impl Transform {
    fn draw(aug_seed: u64, config: AugmentConfig) -> Self {
        let mut rng = seeds::rng(aug_seed, "augment", 0);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        let zoom = if config.center_crop {
            rng.random_range(0.5..=1.0)
        } else {
            1.0
        };
        Self {
            hflip,
            vflip,
            cos: angle.cos(),
            sin: angle.sin(),
            zoom,
        }
    }

    /// Source coordinates for output pixel `(y, x)` of an `h×w` grid.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let y = if self.vflip { h - 1 - y } else { y } as f64;
        let x = if self.hflip { w - 1 - x } else { x } as f64;
        let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
        let (dy, dx) = (y - cy, x - cx);
        let sy = cy + self.zoom * (self.cos * dy - self.sin * dx);
        let sx = cx + self.zoom * (self.sin * dy + self.cos * dx);
        (sy, sx)
    }
}

/// Mirrors a continuous coordinate into `[0, n − 1]`.
fn reflect(t: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = t.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn warp_image(img: &Tensor, t: &Transform) -> Tensor {
    let [c, h, w] = *img.shape() else {
        unreachable!("samples hold C×H×W images")
    };
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = t.source(y, x, h, w);
                let (sy, sx) = (reflect(sy, h), reflect(sx, w));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(img.shape(), out).expect("interpolation of finite values")
}

fn warp_mask(mask: &[u8], h: usize, w: usize, t: &Transform) -> Vec<u8> {
    let mut out = Vec::with_capacity(mask.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source(y, x, h, w);
            let sy = reflect(sy, h).round() as usize;
            let sx = reflect(sx, w).round() as usize;
            out.push(mask[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Random flips (each with probability ½) and a rotation within ±10°, shared
/// by the clean image, the degraded image and the mask. Images are resampled
/// bilinearly with mirrored borders; the mask uses nearest neighbour.
pub fn augment(sample: &Sample, aug_seed: u64, config: AugmentConfig) -> Sample {
    if !config.enabled {
        return sample.clone();
    }
    let t = Transform::draw(aug_seed, config);
    let (h, w) = (sample.clean.shape()[1], sample.clean.shape()[2]);
    Sample {
        clean: warp_image(&sample.clean, &t),
        degraded: warp_image(&sample.degraded, &t),
        label: sample.label,
        mask: warp_mask(&sample.mask, h, w, &t),
        sample_seed: sample.sample_seed,
    }
}
