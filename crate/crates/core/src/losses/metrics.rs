use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::LossError;

/// PSNR reported for (near-)identical images instead of +∞.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Evaluation metrics for one model over one evaluation split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub ssim: f64,
    /// Classifier runs only.
    pub accuracy: Option<f64>,
    /// Segmenter runs only.
    pub miou: Option<f64>,
    pub n_samples: usize,
}

fn check_same(what: &'static str, a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            what,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1.0, on copies clamped to
/// `[0, 1]`. Capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64, LossError> {
    check_same("psnr", pred, target)?;
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.clamp(0.0, 1.0) - t.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / pred.numel() as f64;
    if mse < 10f64.powf(-PSNR_CAP_DB / 10.0) {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    }) as usize
}

/// Separable Gaussian filter with reflection padding.
fn filter(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = win
                .iter()
                .enumerate()
                .map(|(i, &c)| c * plane[y * w + reflect(x as isize + i as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = win
                .iter()
                .enumerate()
                .map(|(i, &c)| c * rows[reflect(y as isize + i as isize - half, h) * w + x])
                .sum();
        }
    }
    out
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize), LossError> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(LossError::ShapeMismatch {
            what: "ssim expects H×W or C×H×W",
            left: t.shape().to_vec(),
            right: vec![],
        }),
    }
}

/// Structural similarity: 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, reflection padding, mean over pixels, channels
/// averaged. Inputs are clamped to `[0, 1]`.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64, LossError> {
    check_same("ssim", pred, target)?;
    let (c, h, w) = planes(pred)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(LossError::ImageTooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = pred.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let y: Vec<f64> = target.data()[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(&x, h, w, &win), filter(&y, h, w, &win));
        let (exx, eyy, exy) = (
            filter(&xx, h, w, &win),
            filter(&yy, h, w, &win),
            filter(&xy, h, w, &win),
        );
        let mut sum = 0.0;
        for i in 0..plane {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / plane as f64;
    }
    Ok(total / c as f64)
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Fraction of rows of `N×C` logits whose argmax equals the label. Ties go to
/// the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = *logits.shape().last().expect("logits have a class axis");
    let n = logits.numel() / c;
    assert_eq!(n, labels.len(), "one label per row");
    let correct = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    correct as f64 / n as f64
}

/// Running per-class intersection and union counts for segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegConfusion {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl SegConfusion {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    /// Adds argmax predictions of `N×K×H×W` logits against `N×H×W` masks.
    pub fn add(&mut self, logits: &Tensor, masks: &[usize]) {
        let [n, k, h, w] = *logits.shape() else {
            panic!("segmentation logits must be N×K×H×W, got {:?}", logits.shape());
        };
        assert_eq!(k, self.intersection.len(), "class count");
        assert_eq!(masks.len(), n * h * w, "one mask value per pixel");
        let plane = h * w;
        let data = logits.data();
        for b in 0..n {
            for px in 0..plane {
                let pred = argmax((0..k).map(|c| data[(b * k + c) * plane + px]));
                let truth = masks[b * plane + px];
                if pred == truth {
                    self.intersection[pred] += 1;
                    self.union[pred] += 1;
                } else {
                    self.union[pred] += 1;
                    self.union[truth] += 1;
                }
            }
        }
    }

    /// Adds the counts of `other`, which must have the same class count.
    pub fn merge(&mut self, other: &SegConfusion) {
        assert_eq!(other.intersection.len(), self.intersection.len(), "class count");
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    /// Macro-averaged IoU; a class absent from both prediction and ground
    /// truth scores 1.
    pub fn miou(&self) -> f64 {
        let k = self.intersection.len();
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .sum::<f64>()
            / k as f64
    }
}

/// mIoU of one batch of segmentation logits.
pub fn miou(logits: &Tensor, masks: &[usize]) -> f64 {
    let mut conf = SegConfusion::new(logits.shape()[1]);
    conf.add(logits, masks);
    conf.miou()
}
