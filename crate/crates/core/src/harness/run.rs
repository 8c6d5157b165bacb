use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::engine::{
    enhance, recognize, train_epoch, warmup_and_pretrain, write_step_records, Batch, EngineError, StepRecord, Strategy,
    TrainState,
};
use crate::exec::Exec;
use crate::losses::{accuracy, psnr, ssim, MetricsRecord, SegConfusion};
use crate::nn::{checkpoint, ModelConfig, ModelRole, ParameterSet};
use crate::seeds;
use crate::synthdata::{make_split, Distribution, Sample, Split};

use super::plots::{write_metrics_rows, MetricsRow};
use super::{ExperimentConfig, HarnessError};

pub const ARTIFACT_VERSION: &str = concat!("gradprom ", env!("CARGO_PKG_VERSION"));

/// Samples scored per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub step: usize,
    pub reason: String,
}

/// What a run trained and evaluated on. Runs that share `dataset_seed` see
/// the same samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_seed: u64,
    pub train_distribution: Distribution,
    pub eval_distribution: Distribution,
    pub degradation: String,
    pub train_sample_seeds: Vec<u64>,
    pub eval_sample_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dataset_seed: u64,
    /// Final evaluation; absent when training aborted.
    pub metrics: Option<MetricsRecord>,
    pub abort: Option<AbortInfo>,
    /// Enhancer updates recorded in `steps.csv`.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsStats {
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub artifact_version: String,
    pub config: String,
    pub seeds: Vec<SeedOutcome>,
    /// Seeds that finished without a numerical abort.
    pub completed: usize,
    pub mean: Option<MetricsStats>,
    /// Sample standard deviation; only with two or more completed seeds.
    pub std: Option<MetricsStats>,
    /// Kept out of `summary.json` so reruns compare byte for byte; written to
    /// `timing.txt` instead.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn aborted(&self) -> impl Iterator<Item = &SeedOutcome> {
        self.seeds.iter().filter(|s| s.abort.is_some())
    }
}

fn stats(outcomes: &[SeedOutcome]) -> (Option<MetricsStats>, Option<MetricsStats>) {
    let done: Vec<&MetricsRecord> = outcomes.iter().filter_map(|o| o.metrics.as_ref()).collect();
    if done.is_empty() {
        return (None, None);
    }
    let n = done.len() as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let std = |xs: &[f64]| {
        let m = mean(xs);
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
    };
    let column =
        |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Option<Vec<f64>> { done.iter().map(|r| f(r)).collect() };
    let psnr = column(&|r| Some(r.psnr)).unwrap_or_default();
    let ssim = column(&|r| Some(r.ssim)).unwrap_or_default();
    let acc = column(&|r| r.accuracy);
    let miou = column(&|r| r.miou);
    let means = MetricsStats {
        psnr: mean(&psnr),
        ssim: mean(&ssim),
        accuracy: acc.as_deref().map(mean),
        miou: miou.as_deref().map(mean),
    };
    let stds = (n >= 2.0).then(|| MetricsStats {
        psnr: std(&psnr),
        ssim: std(&ssim),
        accuracy: acc.as_deref().map(std),
        miou: miou.as_deref().map(std),
    });
    (Some(means), stds)
}

pub(crate) fn summarize(cfg: &ExperimentConfig, outcomes: Vec<SeedOutcome>, wall_clock_secs: f64) -> RunSummary {
    let (mean, std) = stats(&outcomes);
    RunSummary {
        artifact_version: ARTIFACT_VERSION.into(),
        config: cfg.echo(),
        completed: outcomes.iter().filter(|o| o.abort.is_none()).count(),
        seeds: outcomes,
        mean,
        std,
        wall_clock_secs,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

/// Training and evaluation splits for one run seed. The dataset seed depends
/// only on `dataset.seed` and the run seed, never on the strategy.
pub fn build_datasets(
    cfg: &ExperimentConfig,
    run_seed: u64,
    exec: Exec,
) -> Result<(Vec<Sample>, Vec<Sample>, DatasetInfo), HarnessError> {
    let d = &cfg.dataset;
    let dataset_seed = seeds::derive(d.seed, "dataset", run_seed);
    let eval_scene = cfg.eval_scene();
    let train = make_split(dataset_seed, Split::Train, d.n_train, &d.scene, &d.degradation, exec)?;
    let eval = make_split(dataset_seed, Split::Eval, d.n_eval, &eval_scene, &d.degradation, exec)?;
    let info = DatasetInfo {
        dataset_seed,
        train_distribution: d.scene.distribution,
        eval_distribution: eval_scene.distribution,
        degradation: d.degradation.to_string(),
        train_sample_seeds: train.iter().map(|s| s.sample_seed).collect(),
        eval_sample_seeds: eval.iter().map(|s| s.sample_seed).collect(),
    };
    Ok((train, eval, info))
}

fn check_input(what: &str, cfg: &ModelConfig, shape: &[usize]) -> Result<(), HarnessError> {
    let expected = [cfg.channels, cfg.input_hw.0, cfg.input_hw.1];
    if shape != expected {
        return Err(HarnessError::Mismatch(format!(
            "{what} ({}) expects inputs {expected:?}, dataset has {shape:?}",
            cfg.role
        )));
    }
    Ok(())
}

/// Nearest-neighbour upsampling of degraded images to the clean size.
fn upsample_to(degraded: &Tensor, clean_hw: usize) -> Result<Tensor, HarnessError> {
    let h = degraded.shape()[2];
    if h == clean_hw {
        return Ok(degraded.clone());
    }
    if !clean_hw.is_multiple_of(h) {
        return Err(HarnessError::Mismatch(format!("cannot upsample {h} to {clean_hw}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(degraded.clone());
    let up = tape.upsample_nearest(x, clean_hw / h).map_err(EngineError::from)?;
    Ok(tape.value(up).clone())
}

struct BatchScores {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    correct: Option<usize>,
    confusion: Option<SegConfusion>,
}

/// Scores an enhancer (or, with `None`, the degraded input upsampled to the
/// clean size) on `samples`: mean per-sample PSNR and SSIM against the clean
/// images, plus accuracy of the first classifier and mIoU of the first
/// segmenter applied to the enhanced images. Batches run over `exec`; the
/// reduction is in sample order.
pub fn evaluate(
    enhancer: Option<(&ModelConfig, &ParameterSet)>,
    recognizers: &[(ModelConfig, ParameterSet)],
    samples: &[Sample],
    exec: Exec,
) -> Result<MetricsRecord, HarnessError> {
    let Some(first) = samples.first() else {
        return Err(HarnessError::Mismatch("no samples to evaluate".into()));
    };
    if let Some((cfg, _)) = enhancer {
        if !cfg.role.is_enhancer() {
            return Err(HarnessError::Mismatch(format!("{} is not an enhancer", cfg.role)));
        }
        check_input("enhancer", cfg, first.degraded.shape())?;
        let (h, w) = cfg.output_hw();
        if first.clean.shape() != [cfg.channels, h, w] {
            return Err(HarnessError::Mismatch(format!(
                "enhancer output {:?} does not match clean images {:?}",
                (cfg.channels, h, w),
                first.clean.shape()
            )));
        }
    }
    let classifier = recognizers
        .iter()
        .find(|(c, _)| matches!(c.role, ModelRole::Classifier { .. }));
    let segmenter = recognizers
        .iter()
        .find(|(c, _)| matches!(c.role, ModelRole::Segmenter { .. }));
    for (cfg, _) in classifier.iter().chain(segmenter.iter()) {
        check_input("recognizer", cfg, first.clean.shape())?;
    }
    let clean_hw = first.clean.shape()[1];
    let starts: Vec<usize> = (0..samples.len()).step_by(EVAL_BATCH).collect();
    let scored = exec.map(&starts, |&start| -> Result<BatchScores, HarnessError> {
        let chunk = &samples[start..(start + EVAL_BATCH).min(samples.len())];
        let batch = Batch::from_samples(chunk)?;
        let enhanced = match enhancer {
            Some((cfg, theta)) => enhance(cfg, theta, &batch.degraded)?,
            None => upsample_to(&batch.degraded, clean_hw)?,
        };
        let per = enhanced.numel() / chunk.len();
        let shape = &enhanced.shape()[1..];
        let mut scores = BatchScores {
            psnr: Vec::with_capacity(chunk.len()),
            ssim: Vec::with_capacity(chunk.len()),
            correct: None,
            confusion: None,
        };
        for (i, s) in chunk.iter().enumerate() {
            let img =
                Tensor::new(shape, enhanced.data()[i * per..(i + 1) * per].to_vec()).map_err(EngineError::from)?;
            scores.psnr.push(psnr(&img, &s.clean)?);
            scores.ssim.push(ssim(&img, &s.clean)?);
        }
        if let Some((cfg, phi)) = classifier {
            let logits = recognize(cfg, phi, &enhanced)?;
            scores.correct = Some((accuracy(&logits, &batch.labels) * chunk.len() as f64).round() as usize);
        }
        if let Some((cfg, phi)) = segmenter {
            let ModelRole::Segmenter { classes } = cfg.role else {
                unreachable!()
            };
            let mut conf = SegConfusion::new(classes);
            conf.add(&recognize(cfg, phi, &enhanced)?, &batch.masks);
            scores.confusion = Some(conf);
        }
        Ok(scores)
    });
    let mut psnr_all = Vec::with_capacity(samples.len());
    let mut ssim_all = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    let mut confusion = segmenter.map(|(cfg, _)| match cfg.role {
        ModelRole::Segmenter { classes } => SegConfusion::new(classes),
        _ => unreachable!(),
    });
    for s in scored {
        let s = s?;
        psnr_all.extend(s.psnr);
        ssim_all.extend(s.ssim);
        correct += s.correct.unwrap_or(0);
        if let (Some(total), Some(part)) = (confusion.as_mut(), s.confusion.as_ref()) {
            total.merge(part);
        }
    }
    let n = samples.len();
    Ok(MetricsRecord {
        psnr: psnr_all.iter().sum::<f64>() / n as f64,
        ssim: ssim_all.iter().sum::<f64>() / n as f64,
        accuracy: classifier.map(|_| correct as f64 / n as f64),
        miou: confusion.map(|c| c.miou()),
        n_samples: n,
    })
}

fn recognizer_pairs(state: &TrainState) -> Vec<(ModelConfig, ParameterSet)> {
    state.recognizers.iter().map(|r| (r.config, r.phi.clone())).collect()
}

fn evaluate_state(
    state: &TrainState,
    strategy: Strategy,
    eval: &[Sample],
    exec: Exec,
) -> Result<MetricsRecord, HarnessError> {
    let enhancer = (strategy != Strategy::RecognizerOnly).then_some((&state.enhancer, &state.theta));
    evaluate(enhancer, &recognizer_pairs(state), eval, exec)
}

/// Writes `enhancer/` (omitted for recognizer-only runs) and
/// `recognizer_<k>/` checkpoints under `dir`.
pub fn save_checkpoints(dir: &Path, state: &TrainState, strategy: Strategy) -> Result<(), HarnessError> {
    if strategy != Strategy::RecognizerOnly {
        checkpoint::save(&dir.join("enhancer"), &state.enhancer, &state.theta)?;
    }
    for (k, r) in state.recognizers.iter().enumerate() {
        checkpoint::save(&dir.join(format!("recognizer_{k}")), &r.config, &r.phi)?;
    }
    Ok(())
}

/// A model architecture with its parameters.
pub type Checkpoint = (ModelConfig, ParameterSet);

/// Enhancer (if present) and recognizers saved by [`save_checkpoints`].
pub fn load_checkpoints(dir: &Path) -> Result<(Option<Checkpoint>, Vec<Checkpoint>), HarnessError> {
    let enh_dir = dir.join("enhancer");
    let enhancer = if enh_dir.join(checkpoint::MANIFEST).exists() {
        Some(checkpoint::load(&enh_dir)?)
    } else {
        None
    };
    let mut recognizers = Vec::new();
    loop {
        let d = dir.join(format!("recognizer_{}", recognizers.len()));
        if !d.join(checkpoint::MANIFEST).exists() {
            break;
        }
        recognizers.push(checkpoint::load(&d)?);
    }
    if enhancer.is_none() && recognizers.is_empty() {
        return Err(HarnessError::Mismatch(format!(
            "no checkpoints under {}",
            dir.display()
        )));
    }
    Ok((enhancer, recognizers))
}

fn metrics_row(epoch: usize, strategy: Strategy, m: &MetricsRecord) -> MetricsRow {
    MetricsRow {
        epoch,
        strategy,
        psnr: m.psnr,
        ssim: m.ssim,
        accuracy: m.accuracy,
        miou: m.miou,
        n_samples: m.n_samples,
    }
}

/// One seed end to end: dataset, recognizer pretraining and warmup,
/// task-driven training with evaluation every `eval_interval` epochs and at
/// the end. Writes `steps.csv`, `metrics.csv`, `dataset.json` and
/// `checkpoints/` under `dir`. A numerical abort stops training and is
/// reported in the outcome rather than as an error.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, exec: Exec) -> Result<SeedOutcome, HarnessError> {
    fs::create_dir_all(dir)?;
    let (train, eval, info) = build_datasets(cfg, seed, exec)?;
    write_json(&dir.join("dataset.json"), &info)?;
    let strategy = &cfg.strategy;
    let kind = strategy.strategy;
    let mut state = TrainState::new(cfg.enhancer_config(), &cfg.recognizer_configs(), seed)?;
    let aug = cfg.dataset.augment;
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut rows = vec![metrics_row(0, kind, &evaluate_state(&state, kind, &eval, exec)?)];
    let mut abort = None;
    let epochs = cfg.run.epochs;
    let due = |epoch: usize| epoch.is_multiple_of(cfg.run.eval_interval) || epoch == epochs;

    let mut body = || -> Result<(), HarnessError> {
        warmup_and_pretrain(&mut state, &train, strategy, &cfg.optim, aug)?;
        if state.epoch > 0 && due(state.epoch) {
            rows.push(metrics_row(
                state.epoch,
                kind,
                &evaluate_state(&state, kind, &eval, exec)?,
            ));
        }
        while state.epoch < epochs {
            steps.extend(train_epoch(&mut state, &train, strategy, &cfg.optim, aug)?);
            if due(state.epoch) {
                rows.push(metrics_row(
                    state.epoch,
                    kind,
                    &evaluate_state(&state, kind, &eval, exec)?,
                ));
            }
        }
        Ok(())
    };
    match body() {
        Ok(()) => {}
        Err(HarnessError::Engine(EngineError::NumericalAbort { step, reason })) => {
            abort = Some(AbortInfo { step, reason })
        }
        Err(e) => return Err(e),
    }

    let mut csv_bytes = Vec::new();
    write_step_records(&mut csv_bytes, &steps)?;
    fs::write(dir.join("steps.csv"), csv_bytes)?;
    fs::write(dir.join("metrics.csv"), write_metrics_rows(&rows)?)?;
    save_checkpoints(&dir.join("checkpoints"), &state, kind)?;
    Ok(SeedOutcome {
        seed,
        dataset_seed: info.dataset_seed,
        metrics: if abort.is_none() {
            rows.last().map(|r| MetricsRecord {
                psnr: r.psnr,
                ssim: r.ssim,
                accuracy: r.accuracy,
                miou: r.miou,
                n_samples: r.n_samples,
            })
        } else {
            None
        },
        abort,
        steps: steps.len(),
    })
}

/// Every seed of `cfg.run.seeds` into `out/seed_<s>/`, plus `config.txt`
/// (the effective configuration), `summary.json` and `timing.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, exec: Exec) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.echo())?;
    let outcomes = exec
        .map(&cfg.run.seeds, |&s| {
            run_seed(cfg, s, &out.join(format!("seed_{s}")), exec)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(cfg, outcomes, started.elapsed().as_secs_f64());
    write_json(&out.join("summary.json"), &summary)?;
    fs::write(
        out.join("timing.txt"),
        format!("wall_clock_secs {:.3}\n", summary.wall_clock_secs),
    )?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::identity_enhancer_params;
    use crate::synthdata::{Degradation, SceneConfig};

    #[test]
    fn std_needs_two_seeds() {
        let rec = |p: f64| SeedOutcome {
            seed: 0,
            dataset_seed: 0,
            metrics: Some(MetricsRecord {
                psnr: p,
                ssim: 0.5,
                accuracy: Some(1.0),
                miou: None,
                n_samples: 4,
            }),
            abort: None,
            steps: 0,
        };
        let (m, s) = stats(&[rec(20.0)]);
        assert_eq!(m.unwrap().psnr, 20.0);
        assert!(s.is_none());
        let (m, s) = stats(&[rec(20.0), rec(22.0)]);
        assert_eq!(m.unwrap().psnr, 21.0);
        let s = s.unwrap();
        assert!((s.psnr - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.ssim, 0.0);
        assert_eq!(s.miou, None);
    }

    #[test]
    fn identity_on_clean_images_hits_cap() {
        let scene = SceneConfig::default();
        let deg = Degradation::Gaussian { sigma: 0.0 };
        let samples = make_split(5, Split::Eval, 6, &scene, &deg, Exec::Sequential).unwrap();
        let cfg = ModelConfig::enhancer_denoise(1, (32, 32));
        let theta = identity_enhancer_params(&cfg, 1).unwrap();
        let m = evaluate(Some((&cfg, &theta)), &[], &samples, Exec::default()).unwrap();
        assert_eq!(m.psnr, crate::losses::PSNR_CAP_DB);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.n_samples, 6);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let samples = make_split(
            5,
            Split::Eval,
            2,
            &SceneConfig::default(),
            &Degradation::Gaussian { sigma: 0.1 },
            Exec::Sequential,
        )
        .unwrap();
        let cfg = ModelConfig::enhancer_sr(2, 1, (32, 32));
        let theta = identity_enhancer_params(&cfg, 1).unwrap();
        assert!(matches!(
            evaluate(Some((&cfg, &theta)), &[], &samples, Exec::Sequential),
            Err(HarnessError::Mismatch(_))
        ));
    }
}
