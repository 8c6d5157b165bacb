use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{OptimConfig, Strategy, StrategyConfig, Supervision};
use crate::losses::PixelLoss;
use crate::nn::ModelConfig;
use crate::synthdata::{AugmentConfig, Degradation, Distribution, SceneConfig};

use super::HarnessError;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RecognizerKind {
    Classifier,
    Segmenter,
}

impl RecognizerKind {
    fn name(self) -> &'static str {
        match self {
            RecognizerKind::Classifier => "classifier",
            RecognizerKind::Segmenter => "segmenter",
        }
    }
}

impl FromStr for RecognizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classifier" => Ok(RecognizerKind::Classifier),
            "segmenter" => Ok(RecognizerKind::Segmenter),
            _ => Err(format!("expected classifier or segmenter, got {s:?}")),
        }
    }
}

impl Display for RecognizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Image classes predicted by the classifier (blob count 1–3).
pub const CLASSIFIER_CLASSES: usize = 3;
/// Background and lesion.
pub const SEGMENTER_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub scene: SceneConfig,
    /// Scene family of the evaluation split; `None` means the training one.
    pub eval_distribution: Option<Distribution>,
    pub degradation: Degradation,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub enhancer_width: usize,
    pub enhancer_depth: usize,
    pub recognizers: Vec<RecognizerKind>,
    pub recognizer_width: usize,
    pub classifier_depth: usize,
    pub segmenter_depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    /// Enhancer epochs, warmup included.
    pub epochs: usize,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Axes of the strategy comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSection {
    pub strategies: Vec<Strategy>,
    pub supervisions: Vec<Supervision>,
    pub sigmas: Vec<f64>,
    pub gammas: Vec<usize>,
    /// Adds enhancer-only and recognizer-only rows per degradation.
    pub benchmarks: bool,
    /// Gaussian 0.3 + Poisson 0.1 + blur 3/2.0.
    pub composite: bool,
    /// Train on scene family A, evaluate on B.
    pub cross_distribution: bool,
    /// Classifier and segmenter as simultaneous auxiliaries.
    pub multi_aux: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub strategy: StrategyConfig,
    pub optim: OptimConfig,
    pub run: RunSection,
    pub grid: GridSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection {
                seed: 0,
                n_train: 512,
                n_eval: 128,
                scene: SceneConfig::default(),
                eval_distribution: None,
                degradation: Degradation::Gaussian { sigma: 0.1 },
                augment: AugmentConfig::default(),
            },
            model: ModelSection {
                enhancer_width: 16,
                enhancer_depth: 3,
                recognizers: vec![RecognizerKind::Classifier],
                recognizer_width: 16,
                classifier_depth: 2,
                segmenter_depth: 1,
            },
            strategy: StrategyConfig::default(),
            optim: OptimConfig::default(),
            run: RunSection {
                epochs: 30,
                eval_interval: 5,
                seeds: vec![0, 1, 2, 3, 4],
                out: PathBuf::from("runs"),
            },
            grid: GridSection {
                strategies: vec![Strategy::Joint, Strategy::Frozen, Strategy::GradProm],
                supervisions: vec![Supervision::Unsupervised, Supervision::Supervised],
                sigmas: vec![0.05, 0.1, 0.2, 0.3],
                gammas: vec![2, 4],
                benchmarks: true,
                composite: true,
                cross_distribution: true,
                multi_aux: true,
            },
        }
    }
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn pixel_loss_name(p: PixelLoss) -> &'static str {
    match p {
        PixelLoss::Mse => "mse",
        PixelLoss::L1 => "l1",
    }
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let m = &self.model;
        let s = &self.strategy;
        let o = &self.optim;
        let r = &self.run;
        let g = &self.grid;
        vec![
            ("dataset.seed", d.seed.to_string()),
            ("dataset.n_train", d.n_train.to_string()),
            ("dataset.n_eval", d.n_eval.to_string()),
            ("dataset.height", d.scene.height.to_string()),
            ("dataset.width", d.scene.width.to_string()),
            ("dataset.channels", d.scene.channels.to_string()),
            ("dataset.distribution", d.scene.distribution.to_string()),
            (
                "dataset.eval_distribution",
                d.eval_distribution.map_or("same".into(), |x| x.to_string()),
            ),
            ("dataset.degradation", d.degradation.to_string()),
            ("dataset.augment", d.augment.enabled.to_string()),
            ("dataset.center_crop", d.augment.center_crop.to_string()),
            ("model.enhancer_width", m.enhancer_width.to_string()),
            ("model.enhancer_depth", m.enhancer_depth.to_string()),
            ("model.recognizers", list(&m.recognizers)),
            ("model.recognizer_width", m.recognizer_width.to_string()),
            ("model.classifier_depth", m.classifier_depth.to_string()),
            ("model.segmenter_depth", m.segmenter_depth.to_string()),
            ("strategy.kind", s.strategy.to_string()),
            ("strategy.gate_mode", s.gate_mode.to_string()),
            ("strategy.supervision", s.supervision.to_string()),
            ("strategy.lambda", s.lambda.to_string()),
            ("strategy.warmup_epochs", s.warmup_epochs.to_string()),
            ("strategy.vr_pretrain_epochs", s.vr_pretrain_epochs.to_string()),
            ("strategy.update_vr_params", s.update_vr_params.to_string()),
            ("strategy.pixel_loss", pixel_loss_name(s.pixel_loss).into()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.epsilon", o.epsilon.to_string()),
            ("optim.batch_size", o.batch_size.to_string()),
            ("run.epochs", r.epochs.to_string()),
            ("run.eval_interval", r.eval_interval.to_string()),
            ("run.seeds", list(&r.seeds)),
            ("run.out", r.out.display().to_string()),
            ("grid.strategies", list(&g.strategies)),
            ("grid.supervisions", list(&g.supervisions)),
            ("grid.sigmas", list(&g.sigmas)),
            ("grid.gammas", list(&g.gammas)),
            ("grid.benchmarks", g.benchmarks.to_string()),
            ("grid.composite", g.composite.to_string()),
            ("grid.cross_distribution", g.cross_distribution.to_string()),
            ("grid.multi_aux", g.multi_aux.to_string()),
        ]
    }

    /// The full effective configuration in the input format.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("keys are section.name");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    /// Sets one `section.key` to its text form, then revalidates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        self.assign(key, value).map_err(|message| HarnessError::Config {
            key: key.into(),
            message,
        })?;
        self.validate()
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| format!("{e} ({v:?})"))
        }
        fn named<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        let d = &mut self.dataset;
        let m = &mut self.model;
        let s = &mut self.strategy;
        let o = &mut self.optim;
        let r = &mut self.run;
        let g = &mut self.grid;
        match key {
            "dataset.seed" => d.seed = num(value)?,
            "dataset.n_train" => d.n_train = num(value)?,
            "dataset.n_eval" => d.n_eval = num(value)?,
            "dataset.height" => d.scene.height = num(value)?,
            "dataset.width" => d.scene.width = num(value)?,
            "dataset.channels" => d.scene.channels = num(value)?,
            "dataset.distribution" => d.scene.distribution = named(value)?,
            "dataset.eval_distribution" => {
                d.eval_distribution = if value == "same" { None } else { Some(named(value)?) }
            }
            "dataset.degradation" => d.degradation = named(value)?,
            "dataset.augment" => d.augment.enabled = parse_bool(value)?,
            "dataset.center_crop" => d.augment.center_crop = parse_bool(value)?,
            "model.enhancer_width" => m.enhancer_width = num(value)?,
            "model.enhancer_depth" => m.enhancer_depth = num(value)?,
            "model.recognizers" => m.recognizers = parse_list(value)?,
            "model.recognizer_width" => m.recognizer_width = num(value)?,
            "model.classifier_depth" => m.classifier_depth = num(value)?,
            "model.segmenter_depth" => m.segmenter_depth = num(value)?,
            "strategy.kind" => s.strategy = named(value)?,
            "strategy.gate_mode" => s.gate_mode = named(value)?,
            "strategy.supervision" => s.supervision = named(value)?,
            "strategy.lambda" => s.lambda = num(value)?,
            "strategy.warmup_epochs" => s.warmup_epochs = num(value)?,
            "strategy.vr_pretrain_epochs" => s.vr_pretrain_epochs = num(value)?,
            "strategy.update_vr_params" => s.update_vr_params = parse_bool(value)?,
            "strategy.pixel_loss" => {
                s.pixel_loss = match value {
                    "mse" => PixelLoss::Mse,
                    "l1" => PixelLoss::L1,
                    _ => return Err(format!("expected mse or l1, got {value:?}")),
                }
            }
            "optim.lr" => o.lr = num(value)?,
            "optim.beta1" => o.beta1 = num(value)?,
            "optim.beta2" => o.beta2 = num(value)?,
            "optim.epsilon" => o.epsilon = num(value)?,
            "optim.batch_size" => o.batch_size = num(value)?,
            "run.epochs" => r.epochs = num(value)?,
            "run.eval_interval" => r.eval_interval = num(value)?,
            "run.seeds" => r.seeds = parse_list(value)?,
            "run.out" => r.out = PathBuf::from(value),
            "grid.strategies" => g.strategies = parse_list(value)?,
            "grid.supervisions" => g.supervisions = parse_list(value)?,
            "grid.sigmas" => g.sigmas = parse_list(value)?,
            "grid.gammas" => g.gammas = parse_list(value)?,
            "grid.benchmarks" => g.benchmarks = parse_bool(value)?,
            "grid.composite" => g.composite = parse_bool(value)?,
            "grid.cross_distribution" => g.cross_distribution = parse_bool(value)?,
            "grid.multi_aux" => g.multi_aux = parse_bool(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses `section.key = value` lines, optionally grouped under
    /// `[section]` headers. `#` starts a comment. Keys not set keep their
    /// defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |key: &str, msg: String| HarnessError::Config {
                key: key.to_string(),
                message: format!("line {}: {msg}", no + 1),
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(at(line, "expected key = value".into()));
            };
            let (k, v) = (k.trim(), v.trim());
            let key = match (&section, k.contains('.')) {
                (Some(sec), false) => format!("{sec}.{k}"),
                _ => k.to_string(),
            };
            if !seen.insert(key.clone()) {
                return Err(at(&key, "key given twice".into()));
            }
            cfg.assign(&key, v).map_err(|msg| at(&key, msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config {
            key: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, message: String| {
            Err(HarnessError::Config {
                key: key.into(),
                message,
            })
        };
        if let Err(e) = self.dataset.scene.validate() {
            return bad("dataset", e.to_string());
        }
        if let Err(e) = self.dataset.degradation.validate() {
            return bad("dataset.degradation", e.to_string());
        }
        if self.dataset.n_train == 0 || self.dataset.n_eval == 0 {
            return bad("dataset.n_train", "both splits need at least one sample".into());
        }
        let gamma = self.dataset.degradation.scale_factor();
        if !self.dataset.scene.height.is_multiple_of(gamma) || !self.dataset.scene.width.is_multiple_of(gamma) {
            return bad("dataset.degradation", format!("image size not divisible by {gamma}"));
        }
        if self.model.recognizers.is_empty() {
            return bad("model.recognizers", "at least one recognizer is required".into());
        }
        if let Err(e) = self.strategy.validate() {
            return bad("strategy.lambda", e.to_string());
        }
        if let Err(e) = self.optim.validate() {
            return bad("optim", e.to_string());
        }
        if self.run.epochs == 0 || self.run.eval_interval == 0 {
            return bad("run.epochs", "epochs and eval_interval must be positive".into());
        }
        if self.strategy.warmup_epochs > self.run.epochs {
            return bad("strategy.warmup_epochs", "warmup is longer than the run".into());
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds", "at least one seed is required".into());
        }
        if let Some(&g) = self.grid.gammas.iter().find(|&&g| g != 2 && g != 4) {
            return bad("grid.gammas", format!("factor {g} must be 2 or 4"));
        }
        if let Some(&s) = self.grid.sigmas.iter().find(|&&s| !(s >= 0.0)) {
            return bad("grid.sigmas", format!("sigma {s} must be ≥ 0"));
        }
        if let Err(e) = self.enhancer_config().validate() {
            return bad("model.enhancer_depth", e.to_string());
        }
        for r in self.recognizer_configs() {
            if let Err(e) = r.validate() {
                return bad("model.recognizers", e.to_string());
            }
        }
        Ok(())
    }

    /// Denoiser when the degradation keeps the size, SR enhancer otherwise.
    pub fn enhancer_config(&self) -> ModelConfig {
        let scene = &self.dataset.scene;
        let gamma = self.dataset.degradation.scale_factor();
        let mut cfg = if gamma == 1 {
            ModelConfig::enhancer_denoise(scene.channels, (scene.height, scene.width))
        } else {
            ModelConfig::enhancer_sr(gamma, scene.channels, (scene.height / gamma, scene.width / gamma))
        };
        cfg.width = self.model.enhancer_width;
        cfg.depth = self.model.enhancer_depth;
        cfg
    }

    pub fn recognizer_configs(&self) -> Vec<ModelConfig> {
        let scene = &self.dataset.scene;
        let hw = (scene.height, scene.width);
        self.model
            .recognizers
            .iter()
            .map(|kind| {
                let mut cfg = match kind {
                    RecognizerKind::Classifier => {
                        let mut c = ModelConfig::classifier(CLASSIFIER_CLASSES, scene.channels, hw);
                        c.depth = self.model.classifier_depth;
                        c
                    }
                    RecognizerKind::Segmenter => {
                        let mut c = ModelConfig::segmenter(SEGMENTER_CLASSES, scene.channels, hw);
                        c.depth = self.model.segmenter_depth;
                        c
                    }
                };
                cfg.width = self.model.recognizer_width;
                cfg
            })
            .collect()
    }

    /// Scene of the evaluation split.
    pub fn eval_scene(&self) -> SceneConfig {
        SceneConfig {
            distribution: self
                .dataset
                .eval_distribution
                .unwrap_or(self.dataset.scene.distribution),
            ..self.dataset.scene.clone()
        }
    }
}
