use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use treefed_core::harness::{
    agg_check, measure_dissemination, read_records, route_check, run_scenario, summarize, write_csv, write_table,
    DisseminationRow, MetricsRecord, ProtocolChoice, ScenarioConfig, SweepConfig,
};

#[derive(Parser)]
#[command(name = "treefed", version, about = "Tree federated fine-tuning simulator")]
struct Cli {
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Result directory [default: results/<scenario id>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every scenario and dissemination point of a sweep config.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "results/sweep")]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Route random keys and compare every destination with a ring scan.
    RouteCheck {
        #[arg(long, default_value_t = 1000)]
        nodes: usize,
        #[arg(long, default_value_t = 10_000)]
        lookups: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tree aggregation with flat and recursive means.
    AggCheck {
        #[arg(long, default_value_t = 5)]
        shapes: usize,
        #[arg(long, default_value_t = 100)]
        sets: usize,
        #[arg(long, default_value_t = 200)]
        max_nodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics files into seed-averaged tables.
    Report {
        /// A metrics.jsonl file or a directory searched recursively.
        input: PathBuf,
        /// Also write summary.txt and summary.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ProtocolChoice>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    rounds: Option<u64>,
}

fn parse_mode(s: &str) -> std::result::Result<ProtocolChoice, String> {
    s.parse()
        .map_err(|_| format!("expected centralized, decentralized or auto, got {s:?}"))
}

impl Overrides {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.fanout {
            cfg.fanout = v;
        }
        if let Some(v) = self.nodes {
            cfg.nodes = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_summaries(records: &[MetricsRecord], out: Option<&Path>, quiet: bool) -> Result<()> {
    let rows = summarize(records);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_table(&rows, fs::File::create(dir.join("summary.txt"))?)?;
        write_csv(&rows, fs::File::create(dir.join("summary.csv"))?)?;
    }
    if !quiet {
        write_table(&rows, io::stdout().lock())?;
    }
    Ok(())
}

fn write_dissemination(rows: &[DisseminationRow], dir: &Path) -> Result<()> {
    let mut jsonl = fs::File::create(dir.join("dissemination.jsonl"))?;
    let mut csv = fs::File::create(dir.join("dissemination.csv"))?;
    writeln!(csv, "nodes,trees,bytes,seed,tree,depth,completion_ms")?;
    for r in rows {
        writeln!(jsonl, "{}", serde_json::to_string(r)?)?;
        for (i, (d, c)) in r.depth.iter().zip(&r.completion_ms).enumerate() {
            writeln!(csv, "{},{},{},{},{i},{d},{c}", r.nodes, r.trees, r.bytes, r.seed)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Run { config, overrides, out } => {
            let mut cfg = ScenarioConfig::from_toml(&read(&config)?)?;
            overrides.apply(&mut cfg);
            cfg.validate()?;
            let out = out.unwrap_or_else(|| Path::new("results").join(cfg.id()));
            let result = run_scenario(&cfg)?;
            result.write_to(&out)?;
            if !quiet {
                println!("{} -> {}", cfg.id(), out.display());
                for (t, acc) in &result.summary.final_accuracy {
                    println!("topic {t}: accuracy {acc:.4} f1 {:.4}", result.summary.final_f1[t]);
                }
            }
            Ok(true)
        }
        Command::Sweep {
            config,
            overrides,
            out,
            jobs,
        } => {
            let mut sweep = SweepConfig::from_toml(&read(&config)?)?;
            if let Some(base) = sweep.scenario.as_mut() {
                overrides.apply(base);
            }
            let scenarios = sweep.scenarios()?;
            let specs = sweep.dissemination_specs()?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
            fs::create_dir_all(&out)?;
            let results: Vec<Vec<MetricsRecord>> = pool.install(|| {
                scenarios
                    .par_iter()
                    .map(|cfg| -> Result<Vec<MetricsRecord>> {
                        let r = run_scenario(cfg)?;
                        r.write_to(&out.join(cfg.id()))?;
                        Ok(r.records)
                    })
                    .collect::<Result<_>>()
            })?;
            let rows: Vec<DisseminationRow> =
                pool.install(|| specs.par_iter().map(measure_dissemination).collect::<Result<_, _>>())?;
            let records: Vec<MetricsRecord> = results.into_iter().flatten().collect();
            if !records.is_empty() {
                write_summaries(&records, Some(&out), quiet)?;
            }
            if !rows.is_empty() {
                write_dissemination(&rows, &out)?;
                if !quiet {
                    for r in &rows {
                        println!(
                            "nodes {:>5} trees {} bytes {:>9}: completion {:?} ms, depth {:?}",
                            r.nodes, r.trees, r.bytes, r.completion_ms, r.depth
                        );
                    }
                }
            }
            if !quiet {
                println!(
                    "{} scenarios, {} dissemination points -> {}",
                    scenarios.len(),
                    rows.len(),
                    out.display()
                );
            }
            Ok(true)
        }
        Command::RouteCheck {
            nodes,
            lookups,
            seed,
            out,
        } => {
            let audit = route_check(nodes, lookups, seed)?;
            if let Some(dir) = out {
                write_json(&dir.join("route_check.json"), &audit)?;
            }
            if !quiet {
                println!(
                    "{}/{} lookups correct, max hops {} (bound {}), mean {:.3}",
                    audit.correct, audit.lookups, audit.max_hops, audit.hop_bound, audit.mean_hops
                );
            }
            Ok(audit.passed())
        }
        Command::AggCheck {
            shapes,
            sets,
            max_nodes,
            seed,
            out,
        } => {
            let audit = agg_check(shapes, sets, max_nodes, seed)?;
            if let Some(dir) = out {
                write_json(&dir.join("agg_check.json"), &audit)?;
            }
            if !quiet {
                println!(
                    "{shapes} shapes x {sets} sets: weighted error {:.2e}, per-level error {:.2e}",
                    audit.weighted_max_err, audit.per_level_max_err
                );
            }
            Ok(audit.passed())
        }
        Command::Report { input, out } => {
            let records = read_records(&input)?;
            if records.is_empty() {
                bail!("no metrics records under {}", input.display());
            }
            write_summaries(&records, out.as_deref(), quiet)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
