//! Runs a scenario natively at levels 0 and 2 and compares wall time and,
//! when the host exposes them, hardware counters.
//!
//! `cargo run --release --example native_bench [scenario] [reps]`

#[cfg(all(target_arch = "x86_64", unix))]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    use ic_dbm::bench::report::{compare, Metric};
    use ic_dbm::dbm::OptLevel;
    use ic_dbm::native::{calibrate, run_benchmark, BenchConfig, Scenario};

    let mut args = std::env::args().skip(1);
    let scenario: Scenario = args.next().as_deref().unwrap_or("bishape").parse()?;
    let reps = args.next().map(|r| r.parse()).transpose()?.unwrap_or(10);

    let mut config = BenchConfig::short(reps);
    config.iterations = Some(calibrate(scenario, config.target)?);
    let o0 = run_benchmark(scenario, OptLevel::O0, &config)?;
    let o2 = run_benchmark(scenario, OptLevel::O2, &config)?;

    println!("{scenario}: {reps} reps of {} iterations", o0.iterations);
    for metric in Metric::ALL {
        match compare(&o2, &o0, metric) {
            Some(c) => {
                let p = c.welch.map(|w| format!("{:.3e}", w.p_value)).unwrap_or_else(|e| e.to_string());
                println!("  {:<13} O2/O0 {:.4}  p {p}", metric.name(), c.ratio);
            }
            None => println!("  {:<13} not available here", metric.name()),
        }
    }
    let last = o2.reps.last().unwrap();
    println!("  site levels at O2: {:?}", last.site_levels);
    println!("  rewrites per rep: {}", last.stats.modifications());
    Ok(())
}

#[cfg(not(all(target_arch = "x86_64", unix)))]
fn main() {
    eprintln!("native benchmarks need x86_64 and a POSIX system");
}
