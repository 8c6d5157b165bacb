use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use gradprom::battery::{run_battery, TOLERANCE};
use gradprom::exec::{with_jobs, Exec};
use gradprom::harness::{
    build_datasets, collect_csvs, compare, emit_plots, evaluate, load_checkpoints, run_experiment, ExperimentConfig,
    HarnessError,
};
use gradprom::synthdata::{load_dataset, make_dataset, write_dataset};

#[derive(Parser)]
#[command(name = "gradprom", version, about = "Cosine-gated auxiliary-gradient training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`section.key = value` lines); defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (dataset seed for `generate`, run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to disk.
    Generate(Common),
    /// Train every seed of one configuration.
    Train(Common),
    /// Evaluate saved checkpoints on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `enhancer/` and `recognizer_<k>/`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset written by `generate`; otherwise built from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the strategy comparison grid.
    Compare(Common),
    /// Finite-difference check of every primitive and model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        seeds: usize,
    },
    /// Draw SVG plots from steps.csv / metrics.csv files or directories.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn echo(cfg: &ExperimentConfig) {
    println!("# effective configuration");
    print!("{}", cfg.echo());
    println!();
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.run.out.clone())
}

fn generate(common: &Common) -> Result<ExitCode, HarnessError> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
    }
    echo(&cfg);
    let d = &cfg.dataset;
    let dataset = make_dataset(d.seed, d.n_train, d.n_eval, &d.scene, &d.degradation, Exec::default())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
    write_dataset(&out, &dataset)?;
    println!(
        "wrote {} train / {} eval samples to {}",
        dataset.train.len(),
        dataset.eval.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(common: &Common) -> Result<ExitCode, HarnessError> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    let out = out_dir(common, &cfg);
    echo(&cfg);
    println!("# output directory: {}", out.display());
    let summary = run_experiment(&cfg, &out, Exec::default())?;
    for s in &summary.seeds {
        match (&s.metrics, &s.abort) {
            (Some(m), _) => println!("seed {}: psnr {:.3} dB, ssim {:.4}", s.seed, m.psnr, m.ssim),
            (None, Some(a)) => println!("seed {}: aborted at step {}: {}", s.seed, a.step, a.reason),
            (None, None) => {}
        }
    }
    if let Some(mean) = &summary.mean {
        println!("mean psnr {:.3} dB over {} seed(s)", mean.psnr, summary.completed);
    }
    println!("{:.1} s, results in {}", summary.wall_clock_secs, out.display());
    Ok(if summary.aborted().next().is_some() {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval(common: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<ExitCode, HarnessError> {
    let cfg = load_config(common)?;
    let (enhancer, recognizers) = load_checkpoints(checkpoint)?;
    let samples = match data {
        Some(dir) => load_dataset(dir, Exec::default())?.eval,
        None => {
            echo(&cfg);
            let seed = common.seed.unwrap_or(cfg.run.seeds[0]);
            build_datasets(&cfg, seed, Exec::default())?.1
        }
    };
    let enhancer = enhancer.as_ref().map(|(c, p)| (c, p));
    let metrics = evaluate(enhancer, &recognizers, &samples, Exec::default())?;
    let json = serde_json::to_string_pretty(&metrics)?;
    println!("{json}");
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("eval.json"), json + "\n")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_compare(common: &Common) -> Result<ExitCode, HarnessError> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    let out = out_dir(common, &cfg);
    echo(&cfg);
    println!("# output directory: {}", out.display());
    let rows = compare(&cfg, &out, Exec::default())?;
    let aborted = rows.iter().filter(|r| r.abort_step.is_some()).count();
    println!(
        "{} runs, {} aborted; table in {}",
        rows.len(),
        aborted,
        out.join("comparison.csv").display()
    );
    Ok(if aborted > 0 {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn gradcheck(seeds: usize) -> ExitCode {
    let started = Instant::now();
    let results = run_battery(Exec::default(), seeds);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        print!(
            "{status:4} {:<24} max rel err {:.2e} ({} coords, {} skipped)",
            r.name, r.report.max_rel_error, r.report.checked, r.report.skipped
        );
        match &r.error {
            Some(e) => println!(": {e}"),
            None => println!(),
        }
    }
    println!(
        "{} cases × {seeds} seeds, tolerance {TOLERANCE:e}, {failed} failed, {:.1} s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn plot(common: &Common, inputs: &[PathBuf]) -> Result<ExitCode, HarnessError> {
    let mut csvs = Vec::new();
    for p in inputs {
        if p.is_dir() {
            csvs.extend(collect_csvs(p)?);
        } else {
            csvs.push(p.clone());
        }
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
    for f in emit_plots(&csvs, &out)? {
        println!("wrote {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = match &cli.command {
        Command::Generate(c) | Command::Train(c) | Command::Compare(c) => c.jobs,
        Command::Eval { common, .. } | Command::Gradcheck { common, .. } | Command::Plot { common, .. } => common.jobs,
    };
    let result = with_jobs(jobs, || match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => eval(common, checkpoint, data.as_deref()),
        Command::Compare(c) => run_compare(c),
        Command::Gradcheck { seeds, .. } => Ok(gradcheck(*seeds)),
        Command::Plot { common, inputs } => plot(common, inputs),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
