use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::engine::{GateMode, Strategy, Supervision};
use crate::exec::Exec;
use crate::synthdata::{Degradation, Distribution};

use super::plots::{collect_csvs, emit_plots};
use super::run::{run_seed, summarize, write_json, SeedOutcome};
use super::{ExperimentConfig, HarnessError, RecognizerKind};

/// Gaussian σ = 0.3, Poisson rate 0.1 and a 3×3 blur with std 2.0.
pub const COMPOSITE_DEGRADATION: &str = "gaussian:0.3+poisson:0.1+blur:3:2";

/// One configuration of the comparison grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub scenario: &'static str,
    /// Output directory relative to `<out>/cells`.
    pub dir: PathBuf,
    pub config: ExperimentConfig,
}

/// One `(cell, seed)` line of `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub strategy: Strategy,
    pub supervision: Supervision,
    pub gate_mode: GateMode,
    pub degradation: String,
    pub train_distribution: Distribution,
    pub eval_distribution: Distribution,
    pub recognizers: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub abort_step: Option<usize>,
}

#[derive(Serialize)]
struct CellSummaryRow {
    scenario: String,
    strategy: Strategy,
    supervision: Supervision,
    degradation: String,
    eval_distribution: Distribution,
    recognizers: String,
    seeds: usize,
    completed: usize,
    psnr_mean: Option<f64>,
    psnr_std: Option<f64>,
    psnr_median: Option<f64>,
    ssim_mean: Option<f64>,
    ssim_std: Option<f64>,
    accuracy_mean: Option<f64>,
    miou_mean: Option<f64>,
}

fn slug(deg: &Degradation) -> String {
    deg.to_string().replace(':', "-").replace('+', "_")
}

fn recognizer_list(cfg: &ExperimentConfig) -> String {
    cfg.model
        .recognizers
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Every cell for `base`: enhancer-only and recognizer-only benchmarks plus
/// strategy × supervision for each Gaussian σ and each SR factor, then the
/// composite degradation, the A→B cross-distribution evaluation and the
/// classifier + segmenter row (the last three at `dataset.degradation`
/// where not fixed). All cells share `dataset.seed` and the run seeds.
pub fn build_grid(base: &ExperimentConfig) -> Result<Vec<Cell>, HarnessError> {
    let g = &base.grid;
    let mut cells = Vec::new();
    let mut push = |scenario: &'static str, cfg: &ExperimentConfig, with_benchmarks: bool| {
        let deg = slug(&cfg.dataset.degradation);
        if with_benchmarks && g.benchmarks {
            for kind in [Strategy::None, Strategy::RecognizerOnly] {
                let mut c = cfg.clone();
                c.strategy.strategy = kind;
                cells.push(Cell {
                    scenario,
                    dir: PathBuf::from(scenario).join(&deg).join(kind.name()),
                    config: c,
                });
            }
        }
        for &kind in &g.strategies {
            for &sup in &g.supervisions {
                let mut c = cfg.clone();
                c.strategy.strategy = kind;
                c.strategy.supervision = sup;
                cells.push(Cell {
                    scenario,
                    dir: PathBuf::from(scenario).join(&deg).join(format!("{kind}_{sup}")),
                    config: c,
                });
            }
        }
    };
    for &sigma in &g.sigmas {
        let mut c = base.clone();
        c.dataset.degradation = Degradation::Gaussian { sigma };
        push("noise", &c, true);
    }
    for &gamma in &g.gammas {
        let mut c = base.clone();
        c.dataset.degradation = Degradation::Downsample { gamma };
        push("sr", &c, true);
    }
    if g.composite {
        let mut c = base.clone();
        c.dataset.degradation = COMPOSITE_DEGRADATION.parse()?;
        push("composite", &c, true);
    }
    if g.cross_distribution {
        let mut c = base.clone();
        c.dataset.scene.distribution = Distribution::A;
        c.dataset.eval_distribution = Some(Distribution::B);
        push("cross_distribution", &c, true);
    }
    if g.multi_aux {
        let mut c = base.clone();
        c.model.recognizers = vec![RecognizerKind::Classifier, RecognizerKind::Segmenter];
        push("multi_aux", &c, false);
    }
    for cell in &cells {
        cell.config.validate()?;
    }
    Ok(cells)
}

fn csv_bytes<T: Serialize>(rows: &[T], name: &str) -> Result<Vec<u8>, HarnessError> {
    let err = |e: csv::Error| HarnessError::Csv {
        path: name.into(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
}

/// Runs the grid of [`build_grid`] with `(cell, seed)` pairs as independent
/// jobs over `exec`; each job is internally sequential. Writes per-run
/// outputs under `out/cells/`, a `summary.json` per cell, `comparison.csv`,
/// `comparison_summary.csv` and plots under `out/plots/`.
pub fn compare(base: &ExperimentConfig, out: &Path, exec: Exec) -> Result<Vec<ComparisonRow>, HarnessError> {
    base.validate()?;
    let started = Instant::now();
    let cells = build_grid(base)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), base.echo())?;
    let cells_root = out.join("cells");
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.config.run.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = exec.map(&jobs, |&(i, seed)| {
        let dir = cells_root.join(&cells[i].dir).join(format!("seed_{seed}"));
        run_seed(&cells[i].config, seed, &dir, Exec::Sequential)
    });
    let mut per_cell: Vec<Vec<SeedOutcome>> = vec![Vec::new(); cells.len()];
    for (&(i, _), r) in jobs.iter().zip(results) {
        per_cell[i].push(r?);
    }

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (cell, outcomes) in cells.iter().zip(per_cell) {
        let cfg = &cell.config;
        let dir = cells_root.join(&cell.dir);
        fs::write(dir.join("config.txt"), cfg.echo())?;
        let eval_distribution = cfg.eval_scene().distribution;
        for o in &outcomes {
            rows.push(ComparisonRow {
                scenario: cell.scenario.into(),
                strategy: cfg.strategy.strategy,
                supervision: cfg.strategy.supervision,
                gate_mode: cfg.strategy.gate_mode,
                degradation: cfg.dataset.degradation.to_string(),
                train_distribution: cfg.dataset.scene.distribution,
                eval_distribution,
                recognizers: recognizer_list(cfg),
                seed: o.seed,
                dataset_seed: o.dataset_seed,
                psnr: o.metrics.as_ref().map(|m| m.psnr),
                ssim: o.metrics.as_ref().map(|m| m.ssim),
                accuracy: o.metrics.as_ref().and_then(|m| m.accuracy),
                miou: o.metrics.as_ref().and_then(|m| m.miou),
                abort_step: o.abort.as_ref().map(|a| a.step),
            });
        }
        let psnrs: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.metrics.as_ref().map(|m| m.psnr))
            .collect();
        let summary = summarize(cfg, outcomes, 0.0);
        write_json(&dir.join("summary.json"), &summary)?;
        summaries.push(CellSummaryRow {
            scenario: cell.scenario.into(),
            strategy: cfg.strategy.strategy,
            supervision: cfg.strategy.supervision,
            degradation: cfg.dataset.degradation.to_string(),
            eval_distribution,
            recognizers: recognizer_list(cfg),
            seeds: summary.seeds.len(),
            completed: summary.completed,
            psnr_mean: summary.mean.as_ref().map(|m| m.psnr),
            psnr_std: summary.std.as_ref().map(|m| m.psnr),
            psnr_median: median(&psnrs),
            ssim_mean: summary.mean.as_ref().map(|m| m.ssim),
            ssim_std: summary.std.as_ref().map(|m| m.ssim),
            accuracy_mean: summary.mean.as_ref().and_then(|m| m.accuracy),
            miou_mean: summary.mean.as_ref().and_then(|m| m.miou),
        });
    }
    fs::write(out.join("comparison.csv"), csv_bytes(&rows, "comparison.csv")?)?;
    fs::write(
        out.join("comparison_summary.csv"),
        csv_bytes(&summaries, "comparison_summary.csv")?,
    )?;
    emit_plots(&collect_csvs(&cells_root)?, &out.join("plots"))?;
    fs::write(
        out.join("timing.txt"),
        format!("wall_clock_secs {:.3}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let cells = build_grid(&ExperimentConfig::default()).unwrap();
        // 6 degradations (4 σ, 2 γ) + composite + cross: 2 benchmarks + 3×2 each; multi-aux 3×2.
        assert_eq!(cells.len(), 8 * 8 + 6);
        let dirs: std::collections::BTreeSet<_> = cells.iter().map(|c| c.dir.clone()).collect();
        assert_eq!(dirs.len(), cells.len());
        assert!(cells.iter().all(|c| c.config.dataset.seed == 0));
        assert!(cells
            .iter()
            .any(|c| c.dir == Path::new("noise/gaussian-0.3/gradprom_supervised")));
        assert!(cells.iter().any(|c| c.dir == Path::new("sr/downsample-4/none")));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
