//! Finite-difference battery over every tape primitive and every model
//! architecture.

use rand::Rng;

use crate::autodiff::{grad_check_many, AutodiffError, Coordinates, GradCheckReport, Padding, Tape, Tensor, Var};
use crate::exec::Exec;
use crate::nn::{enhancer_forward, init_params, recognizer_forward, BoundParams, ModelConfig, ModelError};
use crate::seeds;

/// Finite-difference step used throughout the battery.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-6;
/// Probed coordinates per input tensor for whole-model checks.
const MODEL_COORDS: usize = 4;

type CaseFn = fn(u64) -> Result<GradCheckReport, AutodiffError>;

/// One named check, run once per seed.
#[derive(Clone, Copy)]
pub struct BatteryCase {
    pub name: &'static str,
    run: CaseFn,
}

impl BatteryCase {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport, AutodiffError> {
        (self.run)(seed)
    }
}

/// Aggregate over all seeds of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: usize,
    pub report: GradCheckReport,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.report.max_rel_error < TOLERANCE && self.report.checked > 0
    }
}

fn uniform(seed: u64, tag: &str, shape: &[usize]) -> Tensor {
    let mut rng = seeds::rng(seed, tag, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

/// Contracts `out` with fixed random weights so every output element carries a
/// distinct gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = uniform(seed, "projection", tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check(
    seed: u64,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
) -> Result<GradCheckReport, AutodiffError> {
    grad_check_many(
        |tape, vars| {
            let out = f(tape, vars)?;
            project(tape, out, seed)
        },
        inputs,
        STEP,
        Coordinates::All,
    )
}

fn unary(seed: u64, op: fn(&mut Tape, Var) -> Result<Var, AutodiffError>) -> Result<GradCheckReport, AutodiffError> {
    check(seed, &[uniform(seed, "a", &[3, 4])], |t, v| op(t, v[0]))
}

fn binary(
    seed: u64,
    op: fn(&mut Tape, Var, Var) -> Result<Var, AutodiffError>,
) -> Result<GradCheckReport, AutodiffError> {
    let inputs = [uniform(seed, "a", &[3, 4]), uniform(seed, "b", &[3, 4])];
    check(seed, &inputs, |t, v| op(t, v[0], v[1]))
}

fn conv(seed: u64, padding: Padding, stride: usize) -> Result<GradCheckReport, AutodiffError> {
    let inputs = [
        uniform(seed, "input", &[1, 2, 5, 5]),
        uniform(seed, "kernel", &[3, 2, 3, 3]),
        uniform(seed, "bias", &[3]),
    ];
    check(seed, &inputs, |t, v| t.conv2d(v[0], v[1], v[2], padding, stride))
}

fn model_error(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument {
            op: "model",
            reason: other.to_string(),
        },
    }
}

/// Checks a whole network on a small batch, probing sampled coordinates of
/// every parameter tensor and of the input.
fn model(seed: u64, config: ModelConfig, batch: usize) -> Result<GradCheckReport, AutodiffError> {
    let params = init_params(&config, seed).map_err(model_error)?;
    let (h, w) = config.input_hw;
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    // Biases start at zero; shift them so the check sees a generic point.
    for (t, (name, _)) in inputs.iter_mut().zip(params.iter()) {
        if name.ends_with(".bias") {
            *t = uniform(seed, name, t.shape()).map(|v| 0.1 * v)?;
        }
    }
    inputs.push(uniform(seed, "batch", &[batch, config.channels, h, w]).map(|v| 0.5 + 0.5 * v)?);
    grad_check_many(
        |tape, vars| {
            let (p, x) = vars.split_at(vars.len() - 1);
            let bound = BoundParams::from_vars(p.to_vec());
            let out = if config.role.is_enhancer() {
                enhancer_forward(tape, &bound, x[0], &config)
            } else {
                recognizer_forward(tape, &bound, x[0], &config)
            }
            .map_err(model_error)?;
            project(tape, out, seed)
        },
        &inputs,
        STEP,
        Coordinates::Sample {
            per_tensor: MODEL_COORDS,
            seed: seeds::derive(seed, "coords", 0),
        },
    )
}

fn small(mut c: ModelConfig) -> ModelConfig {
    c.width = 4;
    c
}

/// Every case of the battery, primitives first.
pub fn cases() -> Vec<BatteryCase> {
    fn case(name: &'static str, run: CaseFn) -> BatteryCase {
        BatteryCase { name, run }
    }
    vec![
        case("add", |s| binary(s, Tape::add)),
        case("sub", |s| binary(s, Tape::sub)),
        case("mul", |s| binary(s, Tape::mul)),
        case("scale", |s| unary(s, |t, a| t.scale(a, -1.7))),
        case("add_scalar", |s| unary(s, |t, a| t.add_scalar(a, 0.3))),
        case("relu", |s| unary(s, Tape::relu)),
        case("sigmoid", |s| unary(s, Tape::sigmoid)),
        case("abs", |s| unary(s, Tape::abs)),
        case("matmul", |s| {
            let inputs = [uniform(s, "a", &[3, 4]), uniform(s, "b", &[4, 2])];
            check(s, &inputs, |t, v| t.matmul(v[0], v[1]))
        }),
        case("add_row_bias", |s| {
            let inputs = [uniform(s, "a", &[3, 4]), uniform(s, "b", &[4])];
            check(s, &inputs, |t, v| t.add_row_bias(v[0], v[1]))
        }),
        case("conv2d_zero", |s| conv(s, Padding::Zero(1), 1)),
        case("conv2d_reflect", |s| conv(s, Padding::Reflect(1), 1)),
        case("conv2d_stride2", |s| conv(s, Padding::Zero(1), 2)),
        case("conv2d_valid", |s| conv(s, Padding::Zero(0), 1)),
        case("avgpool", |s| {
            check(s, &[uniform(s, "x", &[2, 2, 4, 4])], |t, v| t.avgpool(v[0], 2))
        }),
        case("upsample_nearest", |s| {
            check(s, &[uniform(s, "x", &[2, 2, 3, 3])], |t, v| t.upsample_nearest(v[0], 2))
        }),
        case("global_avgpool", |s| {
            check(s, &[uniform(s, "x", &[2, 3, 4, 4])], |t, v| t.global_avgpool(v[0]))
        }),
        case("mean", |s| unary(s, Tape::mean)),
        case("sum", |s| unary(s, Tape::sum)),
        case("reshape", |s| unary(s, |t, a| t.reshape(a, &[2, 6]))),
        case("concat_channels", |s| {
            let inputs = [uniform(s, "a", &[2, 1, 3, 3]), uniform(s, "b", &[2, 2, 3, 3])];
            check(s, &inputs, |t, v| t.concat_channels(&[v[0], v[1]]))
        }),
        case("log_softmax", |s| unary(s, |t, a| t.log_softmax(a, 1))),
        case("enhancer_denoise", |s| {
            model(s, small(ModelConfig::enhancer_denoise(1, (6, 6))), 2)
        }),
        case("enhancer_denoise_rgb", |s| {
            model(s, small(ModelConfig::enhancer_denoise(3, (4, 4))), 1)
        }),
        case("enhancer_sr2", |s| {
            model(s, small(ModelConfig::enhancer_sr(2, 1, (4, 4))), 2)
        }),
        case("enhancer_sr4", |s| {
            model(s, small(ModelConfig::enhancer_sr(4, 1, (2, 2))), 2)
        }),
        case("classifier", |s| {
            model(s, small(ModelConfig::classifier(3, 1, (8, 8))), 2)
        }),
        case("segmenter", |s| {
            model(s, small(ModelConfig::segmenter(2, 1, (8, 8))), 2)
        }),
    ]
}

/// Runs every case at seeds `0..seeds`, spreading (case, seed) pairs over
/// `exec`. Results come back in case order.
pub fn run_battery(exec: Exec, seeds: usize) -> Vec<CaseResult> {
    let all = cases();
    let outcomes = exec.map_indexed(all.len() * seeds, |i| all[i / seeds].run((i % seeds) as u64));
    all.iter()
        .zip(outcomes.chunks(seeds.max(1)))
        .map(|(case, runs)| {
            let mut report = GradCheckReport::default();
            let mut error = None;
            for r in runs {
                match r {
                    Ok(rep) => report = report.merge(*rep),
                    Err(e) if error.is_none() => error = Some(e.to_string()),
                    Err(_) => {}
                }
            }
            CaseResult {
                name: case.name,
                seeds,
                report,
                error,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        for r in run_battery(Exec::default(), 3) {
            assert!(r.passed(), "{} failed: {:?}", r.name, r);
        }
    }
}
