use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::seeds;

use super::SynthError;

/// Scene family. `B` has a rougher background and dimmer blobs than `A`, for
/// cross-distribution evaluation.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    A,
    B,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::A => "a",
            Distribution::B => "b",
        })
    }
}

impl FromStr for Distribution {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Distribution::A),
            "b" => Ok(Distribution::B),
            _ => Err(SynthError::Config(format!(
                "unknown distribution {s:?} (expected a or b)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub distribution: Distribution,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            min_blobs: 1,
            max_blobs: 3,
            distribution: Distribution::A,
        }
    }
}

struct Ranges {
    grid: usize,
    background: (f64, f64),
    intensity: (f64, f64),
}

impl SceneConfig {
    fn ranges(&self) -> Ranges {
        match self.distribution {
            Distribution::A => Ranges {
                grid: 4,
                background: (0.2, 0.5),
                intensity: (0.6, 0.95),
            },
            Distribution::B => Ranges {
                grid: 8,
                background: (0.25, 0.5),
                intensity: (0.55, 0.8),
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("scene {}×{} is smaller than 16×16", self.height, self.width));
        }
        if self.min_blobs < 1 || self.min_blobs > self.max_blobs || self.max_blobs > 3 {
            return bad(format!(
                "blob range {}..={} must lie within 1..=3",
                self.min_blobs, self.max_blobs
            ));
        }
        Ok(())
    }
}

/// A clean scene with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub clean: Tensor,
    pub label: usize,
    pub mask: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(y, x)`, with both semi-axes grown by
    /// `grow` pixels.
    fn rho2(&self, y: f64, x: f64, grow: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / (self.a + grow)).powi(2) + (v / (self.b + grow)).powi(2)
    }

    /// Fraction of the pixel at `(row, col)` inside the ellipse, from a 4×4
    /// sub-pixel grid.
    fn coverage(&self, row: usize, col: usize) -> f64 {
        const SUB: usize = 4;
        let mut inside = 0;
        for sy in 0..SUB {
            for sx in 0..SUB {
                let y = row as f64 + (sy as f64 + 0.5) / SUB as f64;
                let x = col as f64 + (sx as f64 + 0.5) / SUB as f64;
                if self.rho2(y, x, 0.0) <= 1.0 {
                    inside += 1;
                }
            }
        }
        inside as f64 / (SUB * SUB) as f64
    }
}

/// Gap in pixels kept between neighbouring blobs.
const BLOB_GAP: f64 = 2.0;
const MAX_ATTEMPTS: usize = 200;

fn place_blobs(rng: &mut impl Rng, count: usize, h: usize, w: usize) -> Vec<Ellipse> {
    let side = h.min(w) as f64;
    let mut scale = 1.0;
    loop {
        let mut placed: Vec<Ellipse> = Vec::with_capacity(count);
        let mut attempts = 0;
        while placed.len() < count && attempts < MAX_ATTEMPTS {
            attempts += 1;
            let a = rng.random_range(0.08..0.19) * side * scale;
            let b = rng.random_range(0.08..0.19) * side * scale;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let r = a.max(b) + 1.0;
            let cy = rng.random_range(r..h as f64 - r);
            let cx = rng.random_range(r..w as f64 - r);
            let e = Ellipse {
                cy,
                cx,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            };
            // Conservative separation test on enclosing circles.
            let clear = placed.iter().all(|p| {
                let d = ((p.cy - e.cy).powi(2) + (p.cx - e.cx).powi(2)).sqrt();
                d > p.a.max(p.b) + e.a.max(e.b) + BLOB_GAP
            });
            if clear {
                placed.push(e);
            }
        }
        if placed.len() == count {
            return placed;
        }
        scale *= 0.85;
    }
}

fn background(rng: &mut impl Rng, grid: usize, h: usize, w: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let g: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(0.0..1.0)).collect();
    let at = |gy: usize, gx: usize| g[gy.min(grid - 1) * grid + gx.min(grid - 1)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 * (grid - 1) as f64 / (h - 1) as f64;
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        for x in 0..w {
            let fx = x as f64 * (grid - 1) as f64 / (w - 1) as f64;
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            out.push(lo + (hi - lo) * v);
        }
    }
    out
}

/// Builds the clean scene for `sample_seed`: a smooth random background with
/// 1 to 3 non-overlapping anti-aliased ellipses. The label is the blob count
/// minus one; the mask marks pixels at least half covered by a blob.
pub fn generate_scene(sample_seed: u64, config: &SceneConfig) -> Result<Scene, SynthError> {
    config.validate()?;
    let (h, w, c) = (config.height, config.width, config.channels);
    let ranges = config.ranges();
    let mut rng = seeds::rng(sample_seed, "scene", 0);
    let count = rng.random_range(config.min_blobs..=config.max_blobs);
    let blobs = place_blobs(&mut rng, count, h, w);
    let intensities: Vec<f64> = blobs
        .iter()
        .map(|_| rng.random_range(ranges.intensity.0..ranges.intensity.1))
        .collect();

    let mut coverage = vec![0.0; h * w];
    let mut blob_value = vec![0.0; h * w];
    for (e, &v) in blobs.iter().zip(&intensities) {
        let r = e.a.max(e.b) + 1.0;
        let (y0, y1) = (
            (e.cy - r).floor().max(0.0) as usize,
            ((e.cy + r).ceil() as usize).min(h),
        );
        let (x0, x1) = (
            (e.cx - r).floor().max(0.0) as usize,
            ((e.cx + r).ceil() as usize).min(w),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let cov = e.coverage(y, x);
                if cov > 0.0 {
                    coverage[y * w + x] = cov;
                    blob_value[y * w + x] = v;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let bg = background(&mut rng, ranges.grid, h, w, ranges.background);
        data.extend(
            bg.iter()
                .zip(&coverage)
                .zip(&blob_value)
                .map(|((&b, &cov), &v)| b * (1.0 - cov) + v * cov),
        );
    }
    let mask = coverage.iter().map(|&cov| u8::from(cov >= 0.5)).collect();
    Ok(Scene {
        clean: Tensor::new(&[c, h, w], data)?,
        label: count - 1,
        mask,
    })
}

#[cfg(test)]
pub(crate) fn components(mask: &[u8], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut count = 0;
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}
