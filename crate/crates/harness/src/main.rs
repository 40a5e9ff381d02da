use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rlab_core::baselines::FmConfig;
use rlab_core::env::ReplayConfig;
use rlab_harness::checkpoint::{load_checkpoint, save_checkpoint};
use rlab_harness::config::{Method, Preset, RunConfig};
use rlab_harness::experiment::{
    compare, run_ablation, run_experiment_with, write_ablation, write_json, write_results, ExperimentResult, MetaClock,
};
use rlab_harness::replay::replay_file;
use rlab_harness::report::{export_report, read_csv};
use rlab_harness::selftest::run_selftest;
use rlab_harness::{HarnessError, Replica, Result};

#[derive(Parser)]
#[command(name = "rlab", version, about = "Adaptive A/B allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the configured seeds.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Write the final state of the first seed here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue a run from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run every method on shared seeds.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the full system and each single-flag ablation on paired seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stream a Criteo TSV file through the parser and an online click model.
    Replay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "rlab-out")]
        out: PathBuf,
        /// Abort on the first malformed line.
        #[arg(long)]
        strict_parse: bool,
        #[arg(long, default_value_t = 1.0)]
        sampling_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        report_every: u64,
    },
    /// Re-render the chart from CSV files.
    Report {
        /// CSV files or directories containing them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "rlab-out")]
        out: PathBuf,
    },
    /// Run the built-in gradient and statistics checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in environment applied on top of the configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    allow_generator_fallback: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(preset) = self.preset {
            preset.apply(&mut cfg);
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.allow_generator_fallback {
            cfg.generator.allow_fallback = true;
        }
        for warning in cfg.validate()? {
            eprintln!("warning: {warning}");
        }
        Ok(cfg)
    }
}

fn print_results(results: &[ExperimentResult]) {
    for r in results {
        let median = r.median_final_ctr().map_or("n/a".to_string(), |m| format!("{m:.4}"));
        println!(
            "{:<16} seeds ok {:>3}  failed {:>3}  median final CTR {median}",
            r.label,
            r.runs.len(),
            r.failures.len()
        );
    }
}

fn any_failed(results: &[ExperimentResult]) -> Result<()> {
    let failed: usize = results.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        return Err(HarnessError::Runtime(format!("{failed} seed run(s) failed; see failures/")));
    }
    Ok(())
}

fn csv_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| HarnessError::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

fn simulate(run: &RunArgs, checkpoint: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let clock = MetaClock::start();
    if let Some(path) = resume {
        let mut replica: Replica = load_checkpoint(path)?;
        let cfg = replica.config().clone();
        let out = run.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
        replica.run_to_end()?;
        if let Some(ck) = checkpoint {
            save_checkpoint(&replica, ck)?;
        }
        let name = format!("{}_seed{}", cfg.method, replica.seed());
        export_report(&[(name, replica.series().clone())], &out)?;
        println!("resumed seed {} to step {}: CTR {:.4}", replica.seed(), replica.step(), replica.totals().rate());
        return clock.write(&out, "simulate --resume", &cfg);
    }
    let cfg = run.resolve()?;
    let failures = cfg.out_dir.join("failures");
    let result = run_experiment_with(&cfg, Some(&failures))?;
    write_results(std::slice::from_ref(&result), &cfg.out_dir)?;
    if let Some(ck) = checkpoint {
        let mut replica = Replica::new(&cfg, cfg.seeds[0])?;
        replica.run_to_end()?;
        save_checkpoint(&replica, ck)?;
    }
    clock.write(&cfg.out_dir, "simulate", &cfg)?;
    print_results(std::slice::from_ref(&result));
    any_failed(std::slice::from_ref(&result))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { run, checkpoint, resume } => simulate(&run, checkpoint.as_deref(), resume.as_deref()),
        Command::Compare { run } => {
            let clock = MetaClock::start();
            let cfg = run.resolve()?;
            let results = compare(&cfg, Some(&cfg.out_dir.join("failures")))?;
            write_results(&results, &cfg.out_dir)?;
            clock.write(&cfg.out_dir, "compare", &cfg)?;
            print_results(&results);
            any_failed(&results)
        }
        Command::Ablate { run } => {
            let clock = MetaClock::start();
            let cfg = run.resolve()?;
            let report = run_ablation(&cfg, Some(&cfg.out_dir.join("failures")))?;
            write_ablation(&report, &cfg.out_dir)?;
            clock.write(&cfg.out_dir, "ablate", &cfg)?;
            let mut all = vec![report.full.clone()];
            all.extend(report.ablated.iter().cloned());
            print_results(&all);
            any_failed(&all)
        }
        Command::Replay {
            input,
            out,
            strict_parse,
            sampling_rate,
            seed,
            report_every,
        } => {
            if report_every == 0 {
                return Err(HarnessError::Config("--report-every must be positive".into()));
            }
            let cfg = ReplayConfig {
                sampling_rate,
                seed,
                strict: strict_parse,
                ..ReplayConfig::default()
            };
            let (series, summary) = replay_file(&input, &cfg, &FmConfig::default(), report_every)?;
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
            if !series.rows.is_empty() {
                export_report(&[("replay".to_string(), series)], &out)?;
            }
            write_json(&out.join("replay_summary.json"), &summary)?;
            println!(
                "{} records ({} skipped), label CTR {:.4}, progressive log loss {:.4}",
                summary.records, summary.skipped, summary.label_ctr, summary.progressive_log_loss
            );
            Ok(())
        }
        Command::Report { inputs, out } => {
            let files = csv_inputs(&inputs)?;
            let mut set = Vec::new();
            for f in files {
                let name = f.file_stem().map_or("series".into(), |s| s.to_string_lossy().into_owned());
                set.push((name, read_csv(&f)?));
            }
            let files = export_report(&set, &out)?;
            println!("wrote {}", files.chart.display());
            Ok(())
        }
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(HarnessError::Runtime("self-test failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
