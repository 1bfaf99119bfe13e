use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use c3sim::harness::{self, Mode, RunOutput, ScenarioConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Community,
    Vendor,
}

/// Run a community-cloud scenario and write its report and logs.
#[derive(Debug, Parser)]
#[command(name = "c3sim", version)]
struct Cli {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run several seeds in parallel, e.g. `1-10` or `3,5,8`; each run
    /// writes to `<out>/seed-<n>`.
    #[arg(long, conflicts_with = "seed")]
    seeds: Option<String>,
    /// Override the horizon, in ticks.
    #[arg(long)]
    until: Option<u64>,
    /// Output directory for the report and CSV logs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Override the serving substrate.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Audit invariants after the run; exit 3 on any violation.
    #[arg(long)]
    check: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("--seeds: expected `a-b` or a comma list, got {s:?}");
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn emit(run: &RunOutput, cfg: &ScenarioConfig, dir: &std::path::Path, format: Format) -> std::io::Result<()> {
    run.logs.write_dir(dir, &run.meta)?;
    std::fs::write(dir.join("scenario.toml"), cfg.to_toml())?;
    match format {
        Format::Json => std::fs::write(dir.join("report.json"), run.report_json()),
        Format::Csv => std::fs::write(dir.join("report.csv"), run.report_csv()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match ScenarioConfig::load(&cli.scenario) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(u) = cli.until {
        cfg.horizon = u;
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Community => Mode::Community,
            ModeArg::Vendor => Mode::Vendor,
        };
    }
    if let Err(e) = cfg.validate() {
        eprintln!("config error: {e}");
        return ExitCode::from(2);
    }

    let runs: Vec<(ScenarioConfig, RunOutput, PathBuf)> = match &cli.seeds {
        None => {
            let run = harness::run_scenario(&cfg).expect("validated");
            vec![(cfg, run, cli.out.clone())]
        }
        Some(spec) => {
            let seeds = match parse_seeds(spec) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let outs = harness::sweep(&cfg, &seeds).expect("validated");
            seeds
                .iter()
                .zip(outs)
                .map(|(s, run)| {
                    let mut c = cfg.clone();
                    c.seed = *s;
                    (c, run, cli.out.join(format!("seed-{s}")))
                })
                .collect()
        }
    };

    let mut violated = false;
    for (cfg, run, dir) in &runs {
        if let Err(e) = emit(run, cfg, dir, cli.format) {
            eprintln!("cannot write {}: {e}", dir.display());
            return ExitCode::FAILURE;
        }
        let r = &run.report;
        println!(
            "{} seed={} mode={} availability={:.4} p95={} transfers={} -> {}",
            cfg.name,
            cfg.seed,
            cfg.mode,
            r["availability"].as_f64().unwrap_or(0.0),
            r["latency"]["p95"],
            r["currency"]["transfers"],
            dir.display()
        );
        if cli.check {
            for v in &run.violations {
                eprintln!("violation [{}] seed={}: {}", v.check, cfg.seed, v.detail);
            }
            violated |= !run.violations.is_empty();
        }
    }
    if violated {
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
