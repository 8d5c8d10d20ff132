//! `fdtd` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or config errors, 2 when a check
//! fails or a run becomes unstable. Every command writes a JSON summary to
//! the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fdtd_core::scenario::{self, BoundaryKind, CheckOptions, RunOptions, Scenario};
use fdtd_core::Error;
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "fdtd", version, about = "Energy-stable FDTD with subgridding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write probe CSVs and a JSON summary.
    Run(RunArgs),
    /// Check the dissipativity conditions of every subsystem.
    Check(CheckArgs),
    /// Print cell counts of the coarse, fine, nonuniform and subgridded variants.
    Count(CountArgs),
    /// Compare two waveform or profile CSV files.
    Compare(CompareArgs),
    /// Run with the per-step energy balance recorded and verified.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "FDTD_OUT_DIR", default_value = "fdtd-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Fraction of the governing CFL limit.
    #[arg(long)]
    dt_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dt_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the matrix checks and report only the classical bound.
    #[arg(long)]
    classical_only: bool,
    /// Largest unknown count for the dense checks.
    #[arg(long)]
    size_guard_override: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// File under test.
    a: PathBuf,
    /// Reference file.
    b: PathBuf,
    /// Largest accepted relative L2 difference.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step residual bound relative to the initial storage.
    #[arg(long)]
    tolerance: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Instability { .. } => EXIT_FAILED,
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: code_of(&e),
            err: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = err.downcast_ref::<Error>().map_or(EXIT_CONFIG, code_of);
        Failure { code, err }
    }
}

/// `Ok(false)` means the command ran but its verdict is a failure.
type Outcome = Result<bool, Failure>;

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    Scenario::from_path(path).map_err(|e| Failure {
        code: EXIT_CONFIG,
        err: anyhow::Error::from(e).context(format!("loading {}", path.display())),
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn execute(sc: &Scenario, opts: &RunOptions, out: &Path) -> Outcome {
    let res = scenario::run(sc, opts)?;
    res.write(out)?;
    let s = &res.summary;
    println!(
        "{}: {} steps, dt = {:.4e} s, {} unknowns, {:.2} s",
        s.name, s.steps, s.dt, s.unknowns, s.wall_time_s
    );
    for p in &s.probes {
        println!(
            "  probe {}: max |value| = {:.4e} ({})",
            p.name, p.max_abs, p.file
        );
    }
    let ok = s.energy.as_ref().is_none_or(|e| e.passed);
    if let Some(e) = &s.energy {
        println!(
            "  energy: max |residual| {:.3e} J ({:.3e} of initial storage), tolerance {:.1e}: {}",
            e.max_abs_residual,
            e.max_abs_residual / e.initial_storage,
            e.tolerance,
            verdict(e.passed)
        );
    }
    println!("  summary: {}", out.join("summary.json").display());
    Ok(ok)
}

fn cmd_run(a: &RunArgs) -> Outcome {
    let sc = load(&a.config)?;
    let opts = RunOptions {
        steps: a.steps,
        dt_fraction: a.dt_fraction,
        seed: a.seed,
    };
    execute(&sc, &opts, &a.out.out)
}

fn cmd_audit(a: &AuditArgs) -> Outcome {
    let mut sc = load(&a.config)?;
    if sc.faces.contains(&BoundaryKind::Cpml) {
        return Err(Error::Config {
            field: "boundary".into(),
            message: "the energy audit needs a closed domain without absorbing layers".into(),
        }
        .into());
    }
    sc.audit.energy = true;
    if let Some(t) = a.tolerance {
        sc.audit.tolerance = t;
    }
    let opts = RunOptions {
        steps: a.steps,
        dt_fraction: None,
        seed: a.seed,
    };
    execute(&sc, &opts, &a.out.out)
}

fn cmd_check(a: &CheckArgs) -> Outcome {
    let sc = load(&a.config)?;
    let mut opts = CheckOptions {
        classical_only: a.classical_only,
        dt_fraction: a.dt_fraction,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(g) = a.size_guard_override {
        opts.size_guard = g;
    }
    let rep = scenario::check(&sc, &opts)?;
    println!("dt = {:.6e} s", rep.dt);
    for s in &rep.subsystems {
        print!(
            "{}: {} unknowns, classical limit {:.6e} s",
            s.name, s.unknowns, s.classical_limit
        );
        if let Some(g) = s.generalized_limit {
            print!(", generalized limit {g:.6e} s");
        }
        println!();
        if let Some(t) = &s.theorem1 {
            println!(
                "  R > 0: {}  F >= 0: {}  LS = B: {}",
                verdict(t.r_positive),
                verdict(t.f_psd),
                verdict(t.ls_equals_b)
            );
        }
        if let Some(n) = &s.note {
            println!("  {n}");
        }
        println!("  {}", verdict(s.passed));
    }
    if let Some(v) = rep.interface_supply {
        println!("interface supply (relative): {v:.3e}");
    }
    if let Some(r) = rep.oracle_rho {
        println!("spectral radius: {r:.12}");
    }
    for n in &rep.notes {
        println!("note: {n}");
    }
    println!("{}", verdict(rep.passed));
    let path = write_json(
        &a.out.out,
        "check.json",
        &serde_json::to_value(&rep).map_err(anyhow::Error::from)?,
    )?;
    println!("summary: {}", path.display());
    Ok(rep.passed)
}

fn cmd_count(a: &CountArgs) -> Outcome {
    let sc = load(&a.config)?;
    let c = sc.cell_counts()?;
    let show = |label: &str, v: Option<usize>| match v {
        Some(n) => println!("{label:<16}{n}"),
        None => println!("{label:<16}-"),
    };
    show("coarse", Some(c.coarse));
    show("fine", c.fine_everywhere);
    show("nonuniform", c.nonuniform);
    show("subgridded", c.subgridded);
    let path = write_json(
        &a.out.out,
        "count.json",
        &json!({ "name": sc.name, "cells": c }),
    )?;
    println!("summary: {}", path.display());
    Ok(true)
}

fn cmd_compare(a: &CompareArgs) -> Outcome {
    let c = scenario::compare_csv(&a.a, &a.b)
        .with_context(|| format!("comparing {} with {}", a.a.display(), a.b.display()))?;
    let ok = c.rel_l2 <= a.tolerance;
    println!(
        "relative L2 difference {:.4e}, max abs difference {:.4e} over {} points (tolerance {}): {}",
        c.rel_l2,
        c.max_abs,
        c.points,
        a.tolerance,
        verdict(ok)
    );
    let path = write_json(
        &a.out.out,
        "compare.json",
        &json!({
            "a": a.a,
            "b": a.b,
            "rel_l2": c.rel_l2,
            "max_abs": c.max_abs,
            "points": c.points,
            "tolerance": a.tolerance,
            "passed": ok,
        }),
    )?;
    println!("summary: {}", path.display());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, out, res) = match &cli.command {
        Command::Run(a) => ("run", &a.out.out, cmd_run(a)),
        Command::Check(a) => ("check", &a.out.out, cmd_check(a)),
        Command::Count(a) => ("count", &a.out.out, cmd_count(a)),
        Command::Compare(a) => ("compare", &a.out.out, cmd_compare(a)),
        Command::Audit(a) => ("audit", &a.out.out, cmd_audit(a)),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            let v =
                json!({ "command": name, "exit_code": f.code, "error": format!("{:#}", f.err) });
            if let Err(e) = write_json(out, "error.json", &v) {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(f.code)
        }
    }
}
