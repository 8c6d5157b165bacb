use rand::seq::SliceRandom;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::losses::{ce_loss, pixel_loss, unsup_vr_loss, CeTarget};
use crate::nn::{
    enhancer_forward, init_params, recognizer_forward, BoundParams, GradientVector, ModelConfig, ModelRole,
    ParameterSet,
};
use crate::seeds;
use crate::synthdata::{augment, AugmentConfig, Sample};

use super::{
    adam_update, combine_gradients_multi, descent_check, joint_direction, AdamState, EngineError, OptimConfig,
    StepRecord, Strategy, StrategyConfig, Supervision,
};

/// A stacked mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `N×C×h×w` enhancer input.
    pub degraded: Tensor,
    /// `N×C×H×W` target.
    pub clean: Tensor,
    pub labels: Vec<usize>,
    /// `N×H×W` per-pixel classes.
    pub masks: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self, EngineError> {
        let mut degraded = Vec::new();
        let mut clean = Vec::new();
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        let mut shapes = None;
        for s in samples {
            let pair = (s.degraded.shape().to_vec(), s.clean.shape().to_vec());
            match &shapes {
                None => shapes = Some(pair),
                Some(p) if *p != pair => return Err(EngineError::Config("samples in a batch differ in shape".into())),
                Some(_) => {}
            }
            degraded.extend_from_slice(s.degraded.data());
            clean.extend_from_slice(s.clean.data());
            labels.push(s.label);
            masks.extend(s.mask.iter().map(|&m| m as usize));
        }
        let Some((ds, cs)) = shapes else {
            return Err(EngineError::Config("empty batch".into()));
        };
        let n = labels.len();
        let stack = |s: &[usize]| [&[n][..], s].concat();
        Ok(Self {
            degraded: Tensor::new(&stack(&ds), degraded)?,
            clean: Tensor::new(&stack(&cs), clean)?,
            labels,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mini-batches for one epoch. The order is a permutation drawn from
/// `(run_seed, epoch)` and augmentation seeds are keyed by position, so two
/// runs with the same seed see identical batches whatever else they do.
pub fn epoch_batches(
    samples: &[Sample],
    batch_size: usize,
    run_seed: u64,
    epoch: usize,
    aug: AugmentConfig,
) -> Result<Vec<Batch>, EngineError> {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(run_seed, "shuffle", epoch as u64));
    order
        .chunks(batch_size.max(1))
        .enumerate()
        .map(|(b, chunk)| {
            let picked: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let position = (epoch * n + b * batch_size + j) as u64;
                    augment(&samples[i], seeds::derive(run_seed, "augment", position), aug)
                })
                .collect();
            Batch::from_samples(&picked)
        })
        .collect()
}

/// An auxiliary recognizer with its parameters and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    pub config: ModelConfig,
    pub phi: ParameterSet,
    pub adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub enhancer: ModelConfig,
    pub theta: ParameterSet,
    pub theta_adam: AdamState,
    pub recognizers: Vec<Recognizer>,
    /// Enhancer epochs completed.
    pub epoch: usize,
    /// Enhancer updates applied.
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    /// Fresh parameters: the enhancer from `(seed, "enhancer")`, recognizer
    /// `k` from `(seed, "recognizer", k)`.
    pub fn new(enhancer: ModelConfig, recognizers: &[ModelConfig], seed: u64) -> Result<Self, EngineError> {
        if !enhancer.role.is_enhancer() {
            return Err(EngineError::Config(format!("{} is not an enhancer", enhancer.role)));
        }
        let out_hw = enhancer.output_hw();
        let theta = init_params(&enhancer, seeds::derive(seed, "enhancer", 0))?;
        let recognizers = recognizers
            .iter()
            .enumerate()
            .map(|(k, cfg)| {
                if cfg.role.is_enhancer() {
                    return Err(EngineError::Config(format!("{} is not a recognizer", cfg.role)));
                }
                if cfg.input_hw != out_hw || cfg.channels != enhancer.channels {
                    return Err(EngineError::Config(format!(
                        "recognizer input {}×{:?} does not match enhancer output {}×{:?}",
                        cfg.channels, cfg.input_hw, enhancer.channels, out_hw
                    )));
                }
                let phi = init_params(cfg, seeds::derive(seed, "recognizer", k as u64))?;
                Ok(Recognizer {
                    config: *cfg,
                    adam: AdamState::new(phi.numel()),
                    phi,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self {
            enhancer,
            theta_adam: AdamState::new(theta.numel()),
            theta,
            recognizers,
            epoch: 0,
            step: 0,
            seed,
        })
    }
}

/// The recorded forward pass of one task-driven step.
pub struct TaskGraph {
    pub tape: Tape,
    pub theta: BoundParams,
    pub phi: Vec<BoundParams>,
    pub enhanced: Var,
    pub loss_ip: Var,
    /// One recognition loss per recognizer; empty without an auxiliary.
    pub loss_vr: Vec<Var>,
}

fn supervised_loss(tape: &mut Tape, role: ModelRole, logits: Var, batch: &Batch) -> Result<Var, EngineError> {
    let target = match role {
        ModelRole::Classifier { .. } => CeTarget::ImageLevel(&batch.labels),
        ModelRole::Segmenter { .. } => CeTarget::PixelLevel(&batch.masks),
        other => return Err(EngineError::Config(format!("{other} has no recognition loss"))),
    };
    Ok(ce_loss(tape, logits, target)?)
}

/// Records `IP(X)`, the pixel loss and (for auxiliary strategies) every
/// recognition loss on one tape. The pixel loss is recorded before any
/// recognizer node, so its gradient does not depend on the auxiliary branch.
pub fn build_task_graph(
    state: &TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
) -> Result<TaskGraph, EngineError> {
    let mut tape = Tape::new();
    let theta = state.theta.bind(&mut tape, true);
    let x = tape.constant(batch.degraded.clone());
    let y = tape.constant(batch.clean.clone());
    let enhanced = enhancer_forward(&mut tape, &theta, x, &state.enhancer)?;
    let loss_ip = pixel_loss(&mut tape, strategy.pixel_loss, enhanced, y)?;
    let mut phi = Vec::new();
    let mut loss_vr = Vec::new();
    if strategy.strategy.uses_auxiliary() {
        let trainable = strategy.trains_recognizer();
        for rec in &state.recognizers {
            let bound = rec.phi.bind(&mut tape, trainable);
            let loss = match strategy.supervision {
                Supervision::Supervised => {
                    let logits = recognizer_forward(&mut tape, &bound, enhanced, &rec.config)?;
                    supervised_loss(&mut tape, rec.config.role, logits, batch)?
                }
                Supervision::Unsupervised => unsup_vr_loss(&mut tape, &bound, enhanced, y, &rec.config)?,
            };
            phi.push(bound);
            loss_vr.push(loss);
        }
    }
    Ok(TaskGraph {
        tape,
        theta,
        phi,
        enhanced,
        loss_ip,
        loss_vr,
    })
}

/// Losses and gradients of one step, split by target parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradients {
    pub loss_ip: f64,
    pub loss_vr: Vec<f64>,
    /// `∇_θ L_IP`.
    pub g_ip: GradientVector,
    /// `∇_θ L_VR` per recognizer.
    pub g_vr_theta: Vec<GradientVector>,
    /// `∇_φ L_VR` per recognizer, when the recognizer is trainable.
    pub g_vr_phi: Vec<Option<GradientVector>>,
}

fn finite(what: &str, g: &GradientVector) -> Result<(), EngineError> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(EngineError::NonFinite(what.into()))
    }
}

/// One forward pass and one backward sweep per loss.
pub fn compute_task_gradients(
    state: &TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
) -> Result<TaskGradients, EngineError> {
    let graph = build_task_graph(state, batch, strategy)?;
    let tape = &graph.tape;
    let grads = tape.backward(graph.loss_ip)?;
    let g_ip = graph.theta.gradient(&grads, &state.theta);
    finite("g_ip", &g_ip)?;
    let trainable = strategy.trains_recognizer();
    let mut loss_vr = Vec::new();
    let mut g_vr_theta = Vec::new();
    let mut g_vr_phi = Vec::new();
    for ((loss, bound), rec) in graph.loss_vr.iter().zip(&graph.phi).zip(&state.recognizers) {
        loss_vr.push(tape.value(*loss).item());
        let grads = tape.backward(*loss)?;
        let gt = graph.theta.gradient(&grads, &state.theta);
        finite("g_vr_theta", &gt)?;
        g_vr_theta.push(gt);
        g_vr_phi.push(if trainable {
            let gp = bound.gradient(&grads, &rec.phi);
            finite("g_vr_phi", &gp)?;
            Some(gp)
        } else {
            None
        });
    }
    Ok(TaskGradients {
        loss_ip: tape.value(graph.loss_ip).item(),
        loss_vr,
        g_ip,
        g_vr_theta,
        g_vr_phi,
    })
}

fn abort(step: usize) -> impl FnOnce(EngineError) -> EngineError {
    move |e| match e {
        EngineError::NonFinite(what) => EngineError::NumericalAbort { step, reason: what },
        EngineError::Autodiff(AutodiffError::NonFinite { op }) => EngineError::NumericalAbort {
            step,
            reason: format!("non-finite output of {op}"),
        },
        other => other,
    }
}

fn empty_record(state: &TrainState, strategy: &StrategyConfig) -> StepRecord {
    StepRecord {
        step: state.step,
        epoch: state.epoch,
        strategy: strategy.strategy,
        supervision: strategy.supervision,
        gate_mode: strategy.gate_mode,
        loss_ip: 0.0,
        loss_vr: 0.0,
        cosine_s: 0.0,
        gate_open: false,
        norm_g_ip: 0.0,
        norm_g_vr: 0.0,
        inner_product_check: 0.0,
    }
}

/// Enhancer update on the pixel loss alone.
fn ip_only_step(
    state: &mut TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
    optim: &OptimConfig,
) -> Result<StepRecord, EngineError> {
    let ip_only = StrategyConfig {
        strategy: Strategy::None,
        ..*strategy
    };
    let g = compute_task_gradients(state, batch, &ip_only)?;
    let (theta, adam) = adam_update(&state.theta, &g.g_ip, &state.theta_adam, optim)?;
    let record = StepRecord {
        loss_ip: g.loss_ip,
        norm_g_ip: g.g_ip.norm(),
        inner_product_check: descent_check(&g.g_ip, &g.g_ip)?,
        ..empty_record(state, strategy)
    };
    state.theta = theta;
    state.theta_adam = adam;
    Ok(record)
}

fn recognizer_input(tape: &mut Tape, state: &TrainState, images: &Tensor) -> Result<Var, EngineError> {
    let x = tape.constant(images.clone());
    Ok(match state.enhancer.role {
        ModelRole::EnhancerSr { gamma } if images.shape()[2] != state.enhancer.output_hw().0 => {
            tape.upsample_nearest(x, gamma)?
        }
        _ => x,
    })
}

/// Supervised recognizer updates on `images` (clean or degraded), leaving
/// the enhancer untouched. Returns the summed loss.
fn recognizer_step(
    state: &mut TrainState,
    images: &Tensor,
    batch: &Batch,
    optim: &OptimConfig,
) -> Result<f64, EngineError> {
    let mut total = 0.0;
    let mut updated = Vec::with_capacity(state.recognizers.len());
    for rec in &state.recognizers {
        let mut tape = Tape::new();
        let input = recognizer_input(&mut tape, state, images)?;
        let bound = rec.phi.bind(&mut tape, true);
        let logits = recognizer_forward(&mut tape, &bound, input, &rec.config)?;
        let loss = supervised_loss(&mut tape, rec.config.role, logits, batch)?;
        total += tape.value(loss).item();
        let g = bound.gradient(&tape.backward(loss)?, &rec.phi);
        finite("g_vr_phi", &g)?;
        updated.push(adam_update(&rec.phi, &g, &rec.adam, optim)?);
    }
    for (rec, (phi, adam)) in state.recognizers.iter_mut().zip(updated) {
        rec.phi = phi;
        rec.adam = adam;
    }
    Ok(total)
}

fn recognizer_only_step(
    state: &mut TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
    optim: &OptimConfig,
) -> Result<StepRecord, EngineError> {
    let mut tape = Tape::new();
    let input = recognizer_input(&mut tape, state, &batch.degraded)?;
    let y = tape.constant(batch.clean.clone());
    let l = pixel_loss(&mut tape, strategy.pixel_loss, input, y)?;
    let loss_ip = tape.value(l).item();
    let loss_vr = recognizer_step(state, &batch.degraded, batch, optim)?;
    Ok(StepRecord {
        loss_ip,
        loss_vr,
        ..empty_record(state, strategy)
    })
}

fn auxiliary_step(
    state: &mut TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
    optim: &OptimConfig,
) -> Result<StepRecord, EngineError> {
    let g = compute_task_gradients(state, batch, strategy)?;
    let aux: Vec<&[f64]> = g.g_vr_theta.iter().map(|v| &v[..]).collect();
    let (d, cosine_s, gate_open) = match strategy.strategy {
        Strategy::GradProm => {
            let (d, outcomes) = combine_gradients_multi(&g.g_ip, &aux, strategy.lambda, strategy.gate_mode)?;
            let s = outcomes.iter().map(|o| o.cosine).fold(f64::INFINITY, f64::min);
            (d, s, outcomes.iter().all(|o| o.open))
        }
        _ => {
            let d = joint_direction(&g.g_ip, &aux, strategy.lambda)?;
            let s = aux
                .iter()
                .map(|a| super::cosine_similarity(&g.g_ip, a))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            (d, s, true)
        }
    };
    let cosine_s = if cosine_s.is_finite() { cosine_s } else { 0.0 };
    let mut vr_sum = vec![0.0; g.g_ip.len()];
    for a in &aux {
        vr_sum.iter_mut().zip(a.iter()).for_each(|(s, v)| *s += v);
    }
    let (theta, theta_adam) = adam_update(&state.theta, &d, &state.theta_adam, optim)?;
    let mut recognizers = Vec::with_capacity(state.recognizers.len());
    for (rec, gp) in state.recognizers.iter().zip(&g.g_vr_phi) {
        recognizers.push(match gp {
            Some(gp) => adam_update(&rec.phi, gp, &rec.adam, optim)?,
            None => (rec.phi.clone(), rec.adam.clone()),
        });
    }
    let record = StepRecord {
        loss_ip: g.loss_ip,
        loss_vr: g.loss_vr.iter().sum(),
        cosine_s,
        gate_open,
        norm_g_ip: g.g_ip.norm(),
        norm_g_vr: GradientVector::new(vr_sum).norm(),
        inner_product_check: descent_check(&d, &g.g_ip)?,
        ..empty_record(state, strategy)
    };
    state.theta = theta;
    state.theta_adam = theta_adam;
    for (rec, (phi, adam)) in state.recognizers.iter_mut().zip(recognizers) {
        rec.phi = phi;
        rec.adam = adam;
    }
    Ok(record)
}

/// One update under `strategy`. On error the state is left unchanged; a
/// non-finite value becomes [`EngineError::NumericalAbort`] carrying the
/// step index.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    strategy: &StrategyConfig,
    optim: &OptimConfig,
) -> Result<StepRecord, EngineError> {
    let step = state.step;
    let record = match strategy.strategy {
        Strategy::None => ip_only_step(state, batch, strategy, optim),
        Strategy::RecognizerOnly => recognizer_only_step(state, batch, strategy, optim),
        Strategy::Joint | Strategy::Frozen | Strategy::GradProm => auxiliary_step(state, batch, strategy, optim),
    }
    .map_err(abort(step))?;
    state.step += 1;
    Ok(record)
}

/// One pass over `train` at the state's current epoch.
pub fn train_epoch(
    state: &mut TrainState,
    train: &[Sample],
    strategy: &StrategyConfig,
    optim: &OptimConfig,
    aug: AugmentConfig,
) -> Result<Vec<StepRecord>, EngineError> {
    let batches = epoch_batches(train, optim.batch_size, state.seed, state.epoch, aug)?;
    let records = batches
        .iter()
        .map(|b| train_step(state, b, strategy, optim))
        .collect::<Result<Vec<_>, _>>()?;
    state.epoch += 1;
    Ok(records)
}

/// Phase 1: supervised recognizer training on clean images for
/// `vr_pretrain_epochs`. Phase 2: `warmup_epochs` of enhancer-only training,
/// during which recognizer parameters do not change. Only auxiliary
/// strategies run phase 2.
pub fn warmup_and_pretrain(
    state: &mut TrainState,
    train: &[Sample],
    strategy: &StrategyConfig,
    optim: &OptimConfig,
    aug: AugmentConfig,
) -> Result<Vec<StepRecord>, EngineError> {
    let pretrain_seed = seeds::derive(state.seed, "pretrain", 0);
    for e in 0..strategy.vr_pretrain_epochs {
        for batch in epoch_batches(train, optim.batch_size, pretrain_seed, e, aug)? {
            let step = state.step;
            recognizer_step(state, &batch.clean, &batch, optim).map_err(abort(step))?;
        }
    }
    let mut records = Vec::new();
    if strategy.strategy.uses_auxiliary() {
        for _ in 0..strategy.warmup_epochs {
            for batch in epoch_batches(train, optim.batch_size, state.seed, state.epoch, aug)? {
                let step = state.step;
                records.push(ip_only_step(state, &batch, strategy, optim).map_err(abort(step))?);
                state.step += 1;
            }
            state.epoch += 1;
        }
    }
    Ok(records)
}

/// Enhancer output for an `N×C×h×w` batch.
pub fn enhance(config: &ModelConfig, theta: &ParameterSet, degraded: &Tensor) -> Result<Tensor, EngineError> {
    let mut tape = Tape::new();
    let bound = theta.bind(&mut tape, false);
    let x = tape.constant(degraded.clone());
    let out = enhancer_forward(&mut tape, &bound, x, config)?;
    Ok(tape.value(out).clone())
}

/// Recognizer logits for an `N×C×H×W` batch.
pub fn recognize(config: &ModelConfig, phi: &ParameterSet, images: &Tensor) -> Result<Tensor, EngineError> {
    let mut tape = Tape::new();
    let bound = phi.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = recognizer_forward(&mut tape, &bound, x, config)?;
    Ok(tape.value(out).clone())
}
