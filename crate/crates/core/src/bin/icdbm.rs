use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ic_dbm::bench::corpus::{classify_corpus, load_fixture, render_patch};
use ic_dbm::bench::report::write_report;
use ic_dbm::dbm::{OptLevel, LEVEL_ENV_VAR};
use ic_dbm::native::Scenario;

#[derive(Parser)]
#[command(name = "icdbm", about = "Inline-cache hit path rewriting: corpus checks, demos and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every .site fixture in a directory and check its annotation.
    Classify { corpus_dir: PathBuf },
    /// Show a fixture's hit path before and after patching.
    PatchDemo {
        fixture: PathBuf,
        /// 0, 1 or 2; defaults to $IC_DBM_LEVEL, then 2.
        #[arg(long)]
        level: Option<OptLevel>,
    },
    /// Run a native benchmark scenario and save the reps as JSON.
    Bench {
        /// mono, bishape, kshape or array
        scenario: Scenario,
        /// 0, 1 or 2; defaults to $IC_DBM_LEVEL, then 0.
        #[arg(long)]
        level: Option<OptLevel>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// About 50 ms per rep instead of about 2 s.
        #[arg(long)]
        short: bool,
        /// Fixed iterations per rep instead of calibrating.
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Summarize the runs saved in a directory into CSV tables.
    Report { run_dir: PathBuf },
}

fn level(flag: Option<OptLevel>, default: OptLevel) -> Result<OptLevel, String> {
    match flag {
        Some(l) => Ok(l),
        None => OptLevel::from_env()
            .map(|l| l.unwrap_or(default))
            .map_err(|e| format!("{LEVEL_ENV_VAR}: {e}")),
    }
}

fn classify(dir: &Path) -> Result<(), String> {
    let report = classify_corpus(dir).map_err(|e| e.to_string())?;
    for e in &report.entries {
        let mark = if e.agrees() { "ok  " } else { "FAIL" };
        println!("{mark} {:<32} {}", e.fixture.name, e.verdict);
        if !e.agrees() {
            println!("     expected {}", e.fixture.expect);
        }
    }
    let h = report.histogram();
    println!("sites {}: O0 {}  O1 {}  O2 {}", h.total(), h.o0, h.o1, h.o2);
    for (reason, n) in report.reasons() {
        println!("  {reason}: {n}");
    }
    match report.disagreements().count() {
        0 => Ok(()),
        n => Err(format!("{n} fixture(s) disagree with their annotation")),
    }
}

fn patch_demo(path: &Path, cap: OptLevel) -> Result<(), String> {
    let f = load_fixture(path).map_err(|e| e.to_string())?;
    let text = render_patch(&f, cap).map_err(|e| format!("{}: {e}", path.display()))?;
    print!("{text}");
    Ok(())
}

#[cfg(all(target_arch = "x86_64", unix))]
fn bench(scenario: Scenario, level: OptLevel, reps: usize, short: bool, iterations: Option<u64>, out: &Path) -> Result<(), String> {
    use ic_dbm::bench::report::{compare, save_run, Metric};
    use ic_dbm::native::{run_benchmark, BenchConfig};

    if reps == 0 {
        return Err("--reps must be at least 1".into());
    }
    let mut config = if short { BenchConfig::short(reps) } else { BenchConfig::full(reps) };
    config.iterations = match iterations {
        Some(n) => Some(n),
        None => Some(calibrated(scenario, &config, out)?),
    };
    let result = run_benchmark(scenario, level, &config).map_err(|e| e.to_string())?;
    let path = save_run(out, &result).map_err(|e| e.to_string())?;

    let checksums: std::collections::BTreeSet<u64> = result.reps.iter().map(|r| r.checksum).collect();
    println!("{scenario} at {level}: {} reps of {} iterations", result.reps.len(), result.iterations);
    for metric in Metric::ALL {
        match compare(&result, &result, metric) {
            Some(c) => println!("  {:<14} mean {:.1}", metric.name(), c.sample.mean()),
            None => println!("  {:<14} unavailable", metric.name()),
        }
    }
    for e in &result.counter_errors {
        println!("  counter unavailable: {e}");
    }
    if let Some(last) = result.reps.last() {
        println!(
            "  site levels {:?}, {} rewrite(s), {} unprotect call(s)",
            last.site_levels,
            last.stats.modifications(),
            last.unprotect_calls
        );
    }
    println!("  checksums {}", if checksums.len() == 1 { "identical" } else { "DIFFER" });
    println!("saved {}", path.display());
    if checksums.len() != 1 {
        return Err("reps disagree on the checksum".into());
    }
    Ok(())
}

/// Every level of a scenario must run the same work, so the first bench
/// into a run directory calibrates and later ones reuse its count.
#[cfg(all(target_arch = "x86_64", unix))]
fn calibrated(scenario: Scenario, config: &ic_dbm::native::BenchConfig, out: &Path) -> Result<u64, String> {
    let kind = if config.target.as_secs() >= 1 { "full" } else { "short" };
    let path = out.join(format!("{scenario}-{kind}.iterations"));
    if let Ok(text) = std::fs::read_to_string(&path) {
        return text.trim().parse().map_err(|_| format!("{}: not an iteration count", path.display()));
    }
    let n = ic_dbm::native::calibrate(scenario, config.target).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    std::fs::write(&path, format!("{n}\n")).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(n)
}

#[cfg(not(all(target_arch = "x86_64", unix)))]
fn bench(_: Scenario, _: OptLevel, _: usize, _: bool, _: Option<u64>, _: &Path) -> Result<(), String> {
    Err("native benchmarks need x86_64 and a POSIX system".into())
}

fn report(dir: &Path) -> Result<(), String> {
    for path in write_report(dir).map_err(|e| e.to_string())? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Classify { corpus_dir } => classify(&corpus_dir),
        Command::PatchDemo { fixture, level: l } => level(l, OptLevel::O2).and_then(|l| patch_demo(&fixture, l)),
        Command::Bench {
            scenario,
            level: l,
            reps,
            short,
            iterations,
            out,
        } => level(l, OptLevel::O0).and_then(|l| bench(scenario, l, reps, short, iterations, &out)),
        Command::Report { run_dir } => report(&run_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("icdbm: {e}");
            ExitCode::FAILURE
        }
    }
}
