use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotrack::config::RunConfig;
use cotrack::harness::{benchmark_planning, run_experiment, trace_plan, Variant};
use cotrack::{Error, Result};

mod artifacts;

use artifacts::OutputDir;

#[derive(Parser)]
#[command(name = "cotrack", version, about = "Run pose-optimizing MPC tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Candidate-evaluation workers, overriding `planner.threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiments and write per-trial CSVs, a JSON report
    /// and planner timing.
    Run,
    /// Time single plans over the `[bench]` sweep.
    Bench,
    /// Dump one plan of the first trial as JSON.
    PlanDebug {
        /// Time step to inspect.
        #[arg(long)]
        step: usize,
        /// Variant to replay; the first configured one by default.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Check a config and print its hash.
    ValidateConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } => 2,
        Error::Io(_) => 3,
        _ => 1,
    }
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let Some(path) = &cli.config else {
        return Err(Error::Config {
            field: "--config".into(),
            msg: "a config file is required".into(),
        });
    };
    let mut config = RunConfig::load(path)?;
    if let Some(t) = cli.threads {
        config.planner.threads = t;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(out) = &cli.out {
        config.output_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn output_dir(config: &RunConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("cotrack-out"))
}

fn cmd_run(config: &RunConfig) -> Result<()> {
    let mut out = OutputDir::create(&output_dir(config))?;
    let result = write_run(config, &mut out);
    if result.is_err() {
        out.discard();
    }
    result
}

fn write_run(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let mut reports = Vec::new();
    for &variant in &config.planner.variants {
        let spec = config.experiment(variant)?;
        log::info!("running {variant}: {} trials of {} steps", spec.trials, spec.steps());
        let report = run_experiment(&spec)?;
        for record in &report.records {
            out.write(
                &format!("trials/{variant}-seed{}.csv", record.seed),
                &artifacts::trial_csv(config, record),
            )?;
        }
        if report.unreliable {
            log::warn!("{variant}: {} of {} trials failed", report.failures.len(), report.trials);
        }
        println!(
            "{variant}: mean C_total {:.3} (stddev {:.3}) over {}/{} trials",
            report.mean_cost, report.stddev_cost, report.completed, report.trials
        );
        reports.push(report);
    }
    let path = out.write("report.json", &artifacts::report_json(config, &reports)?)?;
    out.write("timing.csv", &artifacts::run_timing_csv(config, &reports))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bench(config: &RunConfig) -> Result<()> {
    let Some(bench) = &config.bench else {
        return Err(Error::Config {
            field: "bench".into(),
            msg: "the [bench] table is required for `bench`".into(),
        });
    };
    let variant = config.planner.variants[0];
    let spec = config.experiment(variant)?;
    let rows = benchmark_planning(&spec, &bench.candidate_counts, &bench.horizons, &bench.widths, bench.plans)?;
    let mut out = OutputDir::create(&output_dir(config))?;
    match out.write("bench.csv", &artifacts::bench_csv(config, &rows)) {
        Ok(path) => {
            for r in &rows {
                println!(
                    "|Theta|={:<3} H={:<3} width={:<3} median {:.1} us",
                    r.candidates,
                    r.horizon,
                    r.width,
                    r.median_seconds * 1e6
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn cmd_plan_debug(config: &RunConfig, step: usize, variant: Option<&str>) -> Result<()> {
    let variant: Variant = match variant {
        Some(v) => v.parse()?,
        None => config.planner.variants[0],
    };
    let spec = config.experiment(variant)?;
    let trace = trace_plan(&spec, step)?;
    let json = serde_json::to_string_pretty(&trace).map_err(std::io::Error::other)?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load(&cli).and_then(|config| match &cli.command {
        Command::Run => cmd_run(&config),
        Command::Bench => cmd_bench(&config),
        Command::PlanDebug { step, variant } => cmd_plan_debug(&config, *step, variant.as_deref()),
        Command::ValidateConfig => {
            println!("ok {}", config.hash());
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
