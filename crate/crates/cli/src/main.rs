use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanalloc::{builtin, load_scenario, run_with, RunOptions, ScenarioConfig, BUILTIN_NAMES};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "chanalloc", version, about = "Run multi-channel relay selection scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its CSV tables and manifest.
    Run {
        /// Builtin name, scenario JSON file or a previous manifest.json.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Shorten or stretch the run; toggle times scale along.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write trace.txt with one line per event.
        #[arg(long)]
        trace: bool,
    },
    /// Print the builtin scenarios.
    List,
    /// Run a range of seeds in parallel, one subdirectory per seed.
    Sweep {
        #[arg(long)]
        scenario: String,
        /// Inclusive range such as `1..5`.
        #[arg(long, value_parser = parse_seed_range)]
        seeds: (u64, u64),
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_seed_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a range like 1..5, got `{s}`"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|e| format!("bad range end: {e}"))?;
    if a > b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok((a, b))
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Invalid(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Failure::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

struct Prepared {
    cfg: ScenarioConfig,
    /// Duration before `--duration-s` was applied, if it was.
    scaled_from_s: Option<f64>,
}

fn prepare(scenario: &str, seed: Option<u64>, duration_s: Option<f64>) -> Result<Prepared, Failure> {
    let mut cfg = load_scenario(scenario).map_err(|e| Failure::Invalid(e.to_string()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let mut scaled_from_s = None;
    if let Some(d) = duration_s {
        let original = cfg.duration_s;
        cfg.scale_to_duration(d).map_err(|e| Failure::Invalid(e.to_string()))?;
        cfg.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
        scaled_from_s = Some(original);
    }
    Ok(Prepared { cfg, scaled_from_s })
}

fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn execute(p: &Prepared, out: &Path, trace: bool) -> Result<String, Failure> {
    let cfg = &p.cfg;
    let opts = RunOptions {
        trace,
        record_checks: false,
    };
    let result = run_with(cfg, cfg.seed, opts).map_err(|e| Failure::Invalid(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;

    let mut csvs = Vec::new();
    for (name, text) in result.summary().csv_files() {
        write_file(&out.join(name), &text)?;
        csvs.push(json!({ "name": name, "sha256": sha256_hex(text.as_bytes()) }));
    }
    if let Some(t) = &result.trace {
        write_file(&out.join("trace.txt"), t)?;
    }
    let manifest = json!({
        "scenario": cfg,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "scaled": p.scaled_from_s.is_some(),
        "original_duration_s": p.scaled_from_s.unwrap_or(cfg.duration_s),
        "tool_version": concat!("chanalloc ", env!("CARGO_PKG_VERSION")),
        "trace_digest": format!("{:016x}", result.trace_digest),
        "csv": csvs,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&out.join("manifest.json"), &text)?;

    if !result.conserved() {
        return Err(Failure::Runtime(format!(
            "packet accounting mismatch: generated {} delivered {} dropped {} residual {}",
            result.generated,
            result.delivered,
            result.dropped(),
            result.residual
        )));
    }
    Ok(format!(
        "{} seed {}: generated {} delivered {} dropped {} -> {}",
        cfg.name,
        cfg.seed,
        result.generated,
        result.delivered,
        result.dropped(),
        out.display()
    ))
}

fn list() {
    println!("{:<22} {:>10} {:>8} {:>12}  channels", "name", "duration_s", "sources", "toggles");
    for name in BUILTIN_NAMES {
        let c = builtin(name).expect("builtin exists");
        let ch: Vec<String> = c.channels.iter().map(u8::to_string).collect();
        println!(
            "{:<22} {:>10} {:>8} {:>12}  {}",
            name,
            c.duration_s,
            c.sources.count,
            c.toggles.len(),
            ch.join(",")
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::List => {
            list();
            Ok(())
        }
        Command::Run {
            scenario,
            seed,
            duration_s,
            out,
            trace,
        } => prepare(&scenario, seed, duration_s)
            .and_then(|p| execute(&p, &out, trace))
            .map(|line| println!("{line}")),
        Command::Sweep {
            scenario,
            seeds: (a, b),
            duration_s,
            out,
        } => {
            let base = prepare(&scenario, None, duration_s);
            base.and_then(|base| {
                let results: Vec<Result<String, Failure>> = (a..=b)
                    .into_par_iter()
                    .map(|seed| {
                        let mut p = Prepared {
                            cfg: base.cfg.clone(),
                            scaled_from_s: base.scaled_from_s,
                        };
                        p.cfg.seed = seed;
                        execute(&p, &out.join(format!("seed-{seed}")), false)
                    })
                    .collect();
                let mut worst = Ok(());
                for r in results {
                    match r {
                        Ok(line) => println!("{line}"),
                        Err(f) if matches!(worst, Err(Failure::Runtime(_))) => {
                            let _ = f.report();
                        }
                        Err(f) => {
                            if let Err(prev) = std::mem::replace(&mut worst, Err(f)) {
                                let _ = prev.report();
                            }
                        }
                    }
                }
                worst
            })
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
