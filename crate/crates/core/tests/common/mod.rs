#![allow(dead_code)]

use gradprom::autodiff::Tensor;
use gradprom::engine::{
    build_task_graph, compute_task_gradients, Batch, Strategy, StrategyConfig, Supervision, TrainState,
};
use gradprom::exec::Exec;
use gradprom::nn::ModelConfig;
use gradprom::synthdata::{make_split, Degradation, Sample, SceneConfig, Split};

pub fn small_scene() -> SceneConfig {
    SceneConfig {
        height: 16,
        width: 16,
        ..SceneConfig::default()
    }
}

pub fn samples(seed: u64, n: usize, sigma: f64) -> Vec<Sample> {
    make_split(
        seed,
        Split::Train,
        n,
        &small_scene(),
        &Degradation::Gaussian { sigma },
        Exec::Sequential,
    )
    .unwrap()
}

pub fn narrow(mut cfg: ModelConfig) -> ModelConfig {
    cfg.width = 4;
    cfg
}

pub fn state(seed: u64, recognizers: &[ModelConfig]) -> TrainState {
    let enh = narrow(ModelConfig::enhancer_denoise(1, (16, 16)));
    TrainState::new(enh, recognizers, seed).unwrap()
}

pub fn classifier() -> ModelConfig {
    narrow(ModelConfig::classifier(3, 1, (16, 16)))
}

pub fn segmenter() -> ModelConfig {
    narrow(ModelConfig::segmenter(2, 1, (16, 16)))
}

pub fn strategy(kind: Strategy, supervision: Supervision, lambda: f64) -> StrategyConfig {
    StrategyConfig {
        strategy: kind,
        supervision,
        lambda,
        ..StrategyConfig::default()
    }
}

pub fn batch(samples: &[Sample]) -> Batch {
    Batch::from_samples(samples).unwrap()
}

/// Largest elementwise `|a − b| / max(|a|, |b|)` (0 where both are 0).
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Compares `g_ip + λ·Σ g_vr_theta` from separate sweeps with one backward
/// sweep of `L_IP + λ·Σ L_VR`.
pub fn decomposition_error(state: &TrainState, batch: &Batch, strategy: &StrategyConfig) -> f64 {
    let g = compute_task_gradients(state, batch, strategy).unwrap();
    let mut combined = g.g_ip.to_vec();
    for gv in &g.g_vr_theta {
        combined
            .iter_mut()
            .zip(gv.iter())
            .for_each(|(c, v)| *c += strategy.lambda * v);
    }
    let mut graph = build_task_graph(state, batch, strategy).unwrap();
    let mut total = graph.loss_ip;
    for &l in &graph.loss_vr {
        let scaled = graph.tape.scale(l, strategy.lambda).unwrap();
        total = graph.tape.add(total, scaled).unwrap();
    }
    let grads = graph.tape.backward(total).unwrap();
    let single = graph.theta.gradient(&grads, &state.theta);
    max_rel_diff(&combined, &single)
}

pub fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

pub fn tensor_bits(t: &Tensor) -> Vec<u64> {
    bits(t.data())
}

/// A 16×16, two-seed, three-epoch experiment that trains in well under a
/// second per seed.
pub const TINY_CONFIG: &str = "\
[dataset]
seed = 3
n_train = 16
n_eval = 8
height = 16
width = 16
degradation = gaussian:0.2

[model]
enhancer_width = 4
recognizer_width = 4

[strategy]
lambda = 0.5
vr_pretrain_epochs = 1

[optim]
lr = 0.001

[run]
epochs = 3
eval_interval = 2
seeds = 0,1

[grid]
strategies = joint,gradprom
supervisions = supervised
sigmas = 0.2
gammas = 2
composite = false
cross_distribution = false
multi_aux = false
";

pub fn tiny_config() -> gradprom::harness::ExperimentConfig {
    gradprom::harness::ExperimentConfig::parse(TINY_CONFIG).unwrap()
}

/// Every regular file under `root` with its path relative to `root`, sorted.
pub fn read_tree(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}
