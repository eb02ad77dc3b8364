//! `sflguard` command line: single runs, multi-seed sweeps and the two
//! benchmark scenarios.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sflguard::bench::{desk_toml, detect_bench, theorem_scenario, ScenarioConfig};
use sflguard::config::ExperimentConfig;
use sflguard::experiment::{run_experiment, write_outputs};

#[derive(Parser)]
#[command(name = "sflguard", version, about = "Split federated learning poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its metrics CSV and summary JSON.
    Run(RunArgs),
    /// Run one experiment per seed, each in its own process.
    Sweep(SweepArgs),
    /// Gradient-variance check before and after substitution.
    Theorem(BenchArgs),
    /// Detection-only Monte-Carlo on displaced smashed records.
    DetectBench(DetectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The subcommand's default: full-size defaults for `run` and `sweep`,
    /// the desk benchmark for `theorem` and `detect-bench`.
    Default,
    /// The small desk benchmark.
    Desk,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; keys absent from it take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base configuration when no file is given.
    #[arg(long, value_enum, default_value = "default", conflicts_with = "config")]
    preset: Preset,
    /// Override a config key, e.g. `--set rounds=20 --set defense=full`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "SFLGUARD_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

impl ConfigArgs {
    fn base_text(&self, fallback: &str) -> Result<String> {
        match &self.config {
            Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())),
            None => Ok(match self.preset {
                Preset::Default => fallback.to_string(),
                Preset::Desk => desk_toml().to_string(),
            }),
        }
    }

    fn pairs(&self) -> Result<Vec<(String, String)>> {
        self.overrides
            .iter()
            .map(|kv| {
                let (k, v) = kv
                    .split_once('=')
                    .with_context(|| format!("override `{kv}` is not KEY=VALUE"))?;
                Ok((k.trim().to_string(), v.trim().to_string()))
            })
            .collect()
    }

    fn load(&self, fallback: &str) -> Result<ExperimentConfig> {
        let config = ExperimentConfig::from_toml_with_overrides(&self.base_text(fallback)?, &self.pairs()?)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output file stem; defaults to `run-seed<seed>`.
    #[arg(long)]
    name: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds `0..seeds`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Displacement of poisoned records in within-class standard deviations.
    #[arg(long)]
    displacement: Option<f64>,
    #[arg(long)]
    warm_rounds: Option<usize>,
    #[arg(long)]
    records_per_client: Option<usize>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Share of each malicious client's records that are displaced.
    #[arg(long)]
    poison_share: Option<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run(args) => run(args),
        Cmd::Sweep(args) => sweep(args),
        Cmd::Theorem(args) => theorem(args),
        Cmd::DetectBench(args) => detect(args),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let config = args.config.load("")?;
    if args.dry_run {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let result = run_experiment(&config)?;
    let name = args.name.unwrap_or_else(|| format!("run-seed{}", config.seed));
    let written = write_outputs(&result, &args.config.out, &name)?;
    let s = &result.summary;
    println!(
        "seed {} rounds {} final_accuracy {:.4} best_accuracy {:.4} ({} ms)",
        s.seed, s.rounds, s.final_accuracy, s.best_accuracy, s.wall_ms
    );
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn read_summary(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be positive");
    }
    // Validate once up front so a bad key fails before any process starts.
    args.config.load("")?;
    let exe = std::env::current_exe()?;
    let mut finals = Vec::new();
    for seed in args.first_seed..args.first_seed + args.seeds {
        let name = format!("sweep-seed{seed}");
        let mut cmd = Command::new(&exe);
        cmd.arg("run").arg("--out").arg(&args.config.out).arg("--name").arg(&name);
        match &args.config.config {
            Some(path) => cmd.arg("--config").arg(path),
            None => cmd.arg("--preset").arg(match args.config.preset {
                Preset::Default => "default",
                Preset::Desk => "desk",
            }),
        };
        for kv in &args.config.overrides {
            cmd.arg("--set").arg(kv);
        }
        cmd.arg("--set").arg(format!("seed={seed}"));
        let status = cmd.status().with_context(|| format!("spawning seed {seed}"))?;
        if !status.success() {
            bail!("seed {seed} failed with {status}");
        }
        let summary = read_summary(&args.config.out.join(format!("{name}.json")))?;
        let acc = summary["final_accuracy"].as_f64().context("summary lacks final_accuracy")?;
        finals.push((seed, acc));
    }
    let n = finals.len() as f64;
    let mean = finals.iter().map(|f| f.1).sum::<f64>() / n;
    let std = (finals.iter().map(|f| (f.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let report = serde_json::json!({
        "seeds": finals.iter().map(|f| f.0).collect::<Vec<_>>(),
        "final_accuracy": finals.iter().map(|f| f.1).collect::<Vec<_>>(),
        "mean": mean,
        "std": std,
    });
    let path = args.config.out.join("sweep.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("final_accuracy mean {mean:.4} std {std:.4} over {} seeds", finals.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn scenario(args: &BenchArgs, preset: ScenarioConfig) -> Result<(ScenarioConfig, ExperimentConfig)> {
    let config = args.config.load(desk_toml())?;
    let scenario = ScenarioConfig {
        base: config.clone(),
        warm_rounds: args.warm_rounds.unwrap_or(preset.warm_rounds),
        records_per_client: args.records_per_client.unwrap_or(preset.records_per_client),
        displacement: args.displacement.unwrap_or(preset.displacement),
        ..preset
    };
    Ok((scenario, config))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn theorem(args: BenchArgs) -> Result<()> {
    let (scenario, config) = scenario(&args, ScenarioConfig::theorem())?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let report = theorem_scenario(&scenario, &config.detect_config(), &config.gan_config(), &seeds)?;
    println!("factor(alpha=0.2, M=80, M^=20) = {}", report.reference_factor);
    for t in &report.trials {
        println!(
            "seed {}: M {} M^ {} factor {:.4} sgv {:.4} -> {:.4} ratio {:.4} {}",
            t.seed,
            t.clean,
            t.poisoned,
            t.check.factor,
            t.check.before.sgv,
            t.check.after.sgv,
            t.check.ratio,
            if t.check.holds { "holds" } else { "violated" }
        );
    }
    println!("holds in {}/{} trials ({} ms)", report.holds, report.trials.len(), report.wall_ms);
    println!("wrote {}", write_json(&args.config.out, "theorem.json", &report)?.display());
    Ok(())
}

fn detect(args: DetectArgs) -> Result<()> {
    let (mut scenario, config) = scenario(&args.bench, ScenarioConfig::desk())?;
    if let Some(share) = args.poison_share {
        scenario.poison_share = share;
    }
    let seeds: Vec<u64> = (0..args.bench.seeds).collect();
    let report = detect_bench(&scenario, &config.detect_config(), &seeds)?;
    for t in &report.trials {
        println!(
            "seed {}: flagged {} poisoned {} precision {:.4} recall {:.4}",
            t.seed, t.stats.flagged, t.stats.poisoned, t.stats.precision, t.stats.recall
        );
    }
    println!(
        "mean precision {:.4} recall {:.4} f1 {:.4} ({} ms)",
        report.mean_precision, report.mean_recall, report.mean_f1, report.wall_ms
    );
    println!("wrote {}", write_json(&args.bench.config.out, "detect_bench.json", &report)?.display());
    Ok(())
}
