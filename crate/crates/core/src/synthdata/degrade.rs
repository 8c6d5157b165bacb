use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution as _, Poisson, StandardNormal};

use crate::autodiff::Tensor;
use crate::seeds;

use super::SynthError;

/// A corruption applied to a clean `C×H×W` image.
///
/// Text form: `gaussian:SIGMA`, `poisson:RATE`, `blur:K:STD`,
/// `downsample:GAMMA`, or several joined with `+` (applied left to right).
#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    Gaussian { sigma: f64 },
    Poisson { rate: f64 },
    Blur { kernel: usize, std: f64 },
    Downsample { gamma: usize },
    Composite(Vec<Degradation>),
}

impl Degradation {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        match *self {
            Degradation::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("gaussian sigma {sigma} must be ≥ 0"))
            }
            Degradation::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("poisson rate {rate} must be > 0"))
            }
            Degradation::Blur { kernel, std } if kernel % 2 == 0 || !(std > 0.0) => {
                bad(format!("blur needs an odd kernel and positive std, got {kernel}/{std}"))
            }
            Degradation::Downsample { gamma } if gamma != 2 && gamma != 4 => {
                bad(format!("downsample factor {gamma} must be 2 or 4"))
            }
            Degradation::Composite(ref parts) => parts.iter().try_for_each(Degradation::validate),
            _ => Ok(()),
        }
    }

    /// Product of all downsampling factors (1 when none).
    pub fn scale_factor(&self) -> usize {
        match self {
            Degradation::Downsample { gamma } => *gamma,
            Degradation::Composite(parts) => parts.iter().map(Degradation::scale_factor).product(),
            _ => 1,
        }
    }

    fn stages(&self) -> Vec<&Degradation> {
        match self {
            Degradation::Composite(parts) => parts.iter().flat_map(Degradation::stages).collect(),
            other => vec![other],
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Degradation::Poisson { rate } => write!(f, "poisson:{rate}"),
            Degradation::Blur { kernel, std } => write!(f, "blur:{kernel}:{std}"),
            Degradation::Downsample { gamma } => write!(f, "downsample:{gamma}"),
            Degradation::Composite(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Degradation {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SynthError::Config(format!("unrecognized degradation {s:?}"));
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            let stages = parts.iter().map(|p| p.parse()).collect::<Result<Vec<_>, _>>()?;
            return Ok(Degradation::Composite(stages));
        }
        let fields: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| fields.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        let int = |i: usize| fields.get(i).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        let d = match (fields[0], fields.len()) {
            ("gaussian", 2) => Degradation::Gaussian { sigma: num(1)? },
            ("poisson", 2) => Degradation::Poisson { rate: num(1)? },
            ("blur", 3) => Degradation::Blur {
                kernel: int(1)?,
                std: num(2)?,
            },
            ("downsample", 2) => Degradation::Downsample { gamma: int(1)? },
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Normalized 1-D Gaussian weights of length `kernel`.
pub fn blur_kernel(kernel: usize, std: f64) -> Vec<f64> {
    let half = (kernel / 2) as f64;
    let w: Vec<f64> = (0..kernel)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * std * std)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m >= n { period - m } else { m }) as usize
}

/// One separable pass along rows (`horizontal`) or columns. Written as
/// `x + Σ wᵢ (xᵢ − x)` so constant images come back unchanged bit for bit.
fn blur_pass(data: &[f64], c: usize, h: usize, w: usize, weights: &[f64], horizontal: bool) -> Vec<f64> {
    let half = (weights.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let centre = plane[y * w + x];
                let mut acc = 0.0;
                for (i, &wt) in weights.iter().enumerate() {
                    let o = i as isize - half;
                    let v = if horizontal {
                        plane[y * w + reflect(x as isize + o, w)]
                    } else {
                        plane[reflect(y as isize + o, h) * w + x]
                    };
                    acc += wt * (v - centre);
                }
                out[ch * h * w + y * w + x] = centre + acc;
            }
        }
    }
    out
}

fn block_average(data: &[f64], c: usize, h: usize, w: usize, g: usize) -> Vec<f64> {
    let (ho, wo) = (h / g, w / g);
    let norm = (g * g) as f64;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..g {
                    for dx in 0..g {
                        s += data[ch * h * w + (oy * g + dy) * w + ox * g + dx];
                    }
                }
                out.push(s / norm);
            }
        }
    }
    out
}

/// Applies `config` to a `C×H×W` image. Noise stages clamp to `[0, 1]`; each
/// stage draws from its own stream keyed by `(noise_seed, stage index)`.
pub fn degrade(clean: &Tensor, config: &Degradation, noise_seed: u64) -> Result<Tensor, SynthError> {
    config.validate()?;
    let [c, mut h, mut w] = *clean.shape() else {
        return Err(SynthError::Config(format!(
            "expected a C×H×W image, got {:?}",
            clean.shape()
        )));
    };
    let mut data = clean.data().to_vec();
    for (stage, d) in config.stages().into_iter().enumerate() {
        let mut rng = seeds::rng(noise_seed, "degrade", stage as u64);
        match *d {
            Degradation::Gaussian { sigma } => {
                if sigma == 0.0 {
                    continue;
                }
                for v in &mut data {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = (*v + sigma * n).clamp(0.0, 1.0);
                }
            }
            Degradation::Poisson { rate } => {
                for v in &mut data {
                    let lambda = *v / rate;
                    let k = if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive finite mean").sample(&mut rng)
                    } else {
                        0.0
                    };
                    *v = (k * rate).clamp(0.0, 1.0);
                }
            }
            Degradation::Blur { kernel, std } => {
                let weights = blur_kernel(kernel, std);
                let rows = blur_pass(&data, c, h, w, &weights, true);
                data = blur_pass(&rows, c, h, w, &weights, false);
            }
            Degradation::Downsample { gamma } => {
                if h % gamma != 0 || w % gamma != 0 {
                    return Err(SynthError::NotDivisible { h, w, gamma });
                }
                data = block_average(&data, c, h, w, gamma);
                h /= gamma;
                w /= gamma;
            }
            Degradation::Composite(_) => unreachable!("stages are flattened"),
        }
    }
    Ok(Tensor::new(&[c, h, w], data)?)
}
