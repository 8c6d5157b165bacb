use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Padding, Tape, Tensor, Var};
use crate::seeds;

use super::{BoundParams, ModelError, ParameterSet};

/// What a network does, with its task-specific size parameter.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelRole {
    EnhancerDenoise,
    EnhancerSr { gamma: usize },
    Classifier { classes: usize },
    Segmenter { classes: usize },
}

impl ModelRole {
    pub fn is_enhancer(self) -> bool {
        matches!(self, ModelRole::EnhancerDenoise | ModelRole::EnhancerSr { .. })
    }

    fn prefix(self) -> &'static str {
        match self {
            ModelRole::EnhancerDenoise | ModelRole::EnhancerSr { .. } => "enh",
            ModelRole::Classifier { .. } => "cls",
            ModelRole::Segmenter { .. } => "seg",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelRole::EnhancerDenoise => write!(f, "enhancer_denoise"),
            ModelRole::EnhancerSr { gamma } => write!(f, "enhancer_sr {gamma}"),
            ModelRole::Classifier { classes } => write!(f, "classifier {classes}"),
            ModelRole::Segmenter { classes } => write!(f, "segmenter {classes}"),
        }
    }
}

impl FromStr for ModelRole {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let arg = parts.next().map(|a| a.parse::<usize>());
        let bad = || ModelError::Config(format!("unrecognized model role {s:?}"));
        match (kind, arg) {
            ("enhancer_denoise", None) => Ok(ModelRole::EnhancerDenoise),
            ("enhancer_sr", Some(Ok(gamma))) => Ok(ModelRole::EnhancerSr { gamma }),
            ("classifier", Some(Ok(classes))) => Ok(ModelRole::Classifier { classes }),
            ("segmenter", Some(Ok(classes))) => Ok(ModelRole::Segmenter { classes }),
            _ => Err(bad()),
        }
    }
}

/// Architecture of one network.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub role: ModelRole,
    /// Image channels of the model input.
    pub channels: usize,
    /// Feature channels of every hidden conv layer.
    pub width: usize,
    /// Number of conv blocks. Enhancer: total conv layers (≥ 2). Classifier:
    /// conv blocks before pooling (≥ 1). Segmenter: convs at the coarse level
    /// (≥ 1).
    pub depth: usize,
    /// Spatial size of the model input (the low-resolution size for SR).
    pub input_hw: (usize, usize),
}

impl ModelConfig {
    pub fn enhancer_denoise(channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            role: ModelRole::EnhancerDenoise,
            channels,
            width: 16,
            depth: 3,
            input_hw,
        }
    }

    pub fn enhancer_sr(gamma: usize, channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            role: ModelRole::EnhancerSr { gamma },
            ..Self::enhancer_denoise(channels, input_hw)
        }
    }

    pub fn classifier(classes: usize, channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            role: ModelRole::Classifier { classes },
            channels,
            width: 16,
            depth: 2,
            input_hw,
        }
    }

    pub fn segmenter(classes: usize, channels: usize, input_hw: (usize, usize)) -> Self {
        Self {
            role: ModelRole::Segmenter { classes },
            channels,
            width: 16,
            depth: 1,
            input_hw,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.channels == 0 || self.width == 0 {
            return err("channels and width must be positive".into());
        }
        let (h, w) = self.input_hw;
        if h < 2 || w < 2 {
            return err(format!("input {h}×{w} is too small"));
        }
        match self.role {
            ModelRole::EnhancerDenoise | ModelRole::EnhancerSr { .. } if self.depth < 2 => {
                err("enhancer depth must be at least 2".into())
            }
            ModelRole::EnhancerSr { gamma } if gamma != 2 && gamma != 4 => {
                err(format!("SR factor {gamma} must be 2 or 4"))
            }
            ModelRole::Classifier { classes } | ModelRole::Segmenter { classes } if classes < 2 => {
                err(format!("need at least 2 classes, got {classes}"))
            }
            ModelRole::Classifier { .. } | ModelRole::Segmenter { .. } if self.depth < 1 => {
                err("recognizer depth must be at least 1".into())
            }
            ModelRole::Classifier { .. } | ModelRole::Segmenter { .. } if h % 2 != 0 || w % 2 != 0 => {
                err(format!("recognizer input {h}×{w} must have even sides"))
            }
            _ => Ok(()),
        }
    }

    /// Output spatial size.
    pub fn output_hw(&self) -> (usize, usize) {
        match self.role {
            ModelRole::EnhancerSr { gamma } => (self.input_hw.0 * gamma, self.input_hw.1 * gamma),
            ModelRole::Classifier { .. } => (1, 1),
            _ => self.input_hw,
        }
    }

    /// `(name, shape, fan_in)` of every parameter, in definition order.
    /// Biases have `fan_in = 0`.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let p = self.role.prefix();
        let (c, w) = (self.channels, self.width);
        let mut specs = Vec::new();
        let mut conv = |name: String, co: usize, ci: usize, k: usize| {
            specs.push((format!("{p}.{name}.weight"), vec![co, ci, k, k], ci * k * k));
            specs.push((format!("{p}.{name}.bias"), vec![co], 0));
        };
        match self.role {
            ModelRole::EnhancerDenoise | ModelRole::EnhancerSr { .. } => {
                for i in 0..self.depth {
                    let ci = if i == 0 { c } else { w };
                    let co = if i + 1 == self.depth { c } else { w };
                    conv(format!("conv{i}"), co, ci, 3);
                }
            }
            ModelRole::Classifier { classes } => {
                for i in 0..self.depth {
                    conv(format!("conv{i}"), w, if i == 0 { c } else { w }, 3);
                }
                specs.push((format!("{p}.dense.weight"), vec![w, classes], w));
                specs.push((format!("{p}.dense.bias"), vec![classes], 0));
            }
            ModelRole::Segmenter { classes } => {
                conv("enc".into(), w, c, 3);
                for i in 0..self.depth {
                    conv(format!("mid{i}"), w, w, 3);
                }
                conv("dec".into(), w, 2 * w, 3);
                conv("head".into(), classes, w, 1);
            }
        }
        specs
    }
}

/// Kaiming-normal weights (variance `2 / fan_in`), zero biases. Each tensor
/// draws from its own stream keyed by `(seed, name)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let entries = config
        .param_specs()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = seeds::rng(seed, &name, 0);
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            Ok((name, Tensor::new(&shape, data)?))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    ParameterSet::new(entries)
}

/// Checks that `params` has exactly the names and shapes `config` defines.
pub fn check_params(config: &ModelConfig, params: &ParameterSet) -> Result<(), ModelError> {
    let specs = config.param_specs();
    let ok = specs.len() == params.len()
        && specs
            .iter()
            .zip(params.iter())
            .all(|((name, shape, _), (pn, pt))| name == pn && shape.as_slice() == pt.shape());
    if ok {
        Ok(())
    } else {
        Err(ModelError::Params(format!(
            "parameters do not match architecture {}",
            config.role
        )))
    }
}

fn check_input(tape: &Tape, input: Var, config: &ModelConfig) -> Result<usize, ModelError> {
    match *tape.shape(input) {
        [n, c, h, w] if c == config.channels && (h, w) == config.input_hw => Ok(n),
        ref s => Err(ModelError::Shape(format!(
            "{} expects N×{}×{}×{}, got {:?}",
            config.role, config.channels, config.input_hw.0, config.input_hw.1, s
        ))),
    }
}

fn conv3(tape: &mut Tape, x: Var, p: &BoundParams, at: usize) -> Result<Var, ModelError> {
    Ok(tape.conv2d(x, p.var(at), p.var(at + 1), Padding::Reflect(1), 1)?)
}

/// Enhancer forward pass on an `N×C×H×W` batch.
///
/// Denoise: `x + residual(x)`. SR: nearest-upsample by γ, then the same
/// residual stack at the output resolution. Outputs are not clamped.
pub fn enhancer_forward(
    tape: &mut Tape,
    params: &BoundParams,
    input: Var,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    check_input(tape, input, config)?;
    let base = match config.role {
        ModelRole::EnhancerDenoise => input,
        ModelRole::EnhancerSr { gamma } => tape.upsample_nearest(input, gamma)?,
        role => return Err(ModelError::Config(format!("{role} is not an enhancer"))),
    };
    let mut h = base;
    for i in 0..config.depth {
        h = conv3(tape, h, params, 2 * i)?;
        if i + 1 < config.depth {
            h = tape.relu(h)?;
        }
    }
    Ok(tape.add(base, h)?)
}

/// Recognizer forward pass. Classifier: logits `N×classes`. Segmenter:
/// per-pixel logits `N×classes×H×W`.
pub fn recognizer_forward(
    tape: &mut Tape,
    params: &BoundParams,
    input: Var,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    let n = check_input(tape, input, config)?;
    match config.role {
        ModelRole::Classifier { classes } => {
            let mut h = input;
            for i in 0..config.depth {
                h = conv3(tape, h, params, 2 * i)?;
                h = tape.relu(h)?;
                if i == 0 {
                    h = tape.avgpool(h, 2)?;
                }
            }
            let pooled = tape.global_avgpool(h)?;
            let flat = tape.reshape(pooled, &[n, config.width])?;
            let at = 2 * config.depth;
            let logits = tape.matmul(flat, params.var(at))?;
            let logits = tape.add_row_bias(logits, params.var(at + 1))?;
            debug_assert_eq!(tape.shape(logits), [n, classes]);
            Ok(logits)
        }
        ModelRole::Segmenter { .. } => {
            let enc = conv3(tape, input, params, 0)?;
            let enc = tape.relu(enc)?;
            let mut h = tape.avgpool(enc, 2)?;
            for i in 0..config.depth {
                h = conv3(tape, h, params, 2 + 2 * i)?;
                h = tape.relu(h)?;
            }
            let up = tape.upsample_nearest(h, 2)?;
            let cat = tape.concat_channels(&[up, enc])?;
            let at = 2 + 2 * config.depth;
            let dec = conv3(tape, cat, params, at)?;
            let dec = tape.relu(dec)?;
            Ok(tape.conv2d(dec, params.var(at + 2), params.var(at + 3), Padding::Zero(0), 1)?)
        }
        role => Err(ModelError::Config(format!("{role} is not a recognizer"))),
    }
}

/// Enhancer parameters whose last conv is zero, so the network is the
/// identity (denoise) or nearest-neighbour upsampling (SR).
pub fn identity_enhancer_params(config: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    let params = init_params(config, seed)?;
    let last = config.depth - 1;
    let zeroed: Vec<(String, Tensor)> = params
        .iter()
        .map(|(name, t)| {
            let t = if name.contains(&format!(".conv{last}.")) {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            };
            (name.to_string(), t)
        })
        .collect();
    ParameterSet::new(zeroed)
}
