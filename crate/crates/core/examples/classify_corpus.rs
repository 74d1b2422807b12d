//! Classifies the annotated fixture corpus and prints the histogram.
//!
//! `cargo run --example classify_corpus [dir]`

use std::path::PathBuf;

use ic_dbm::bench::corpus::classify_corpus;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus"));
    let report = classify_corpus(&dir)?;
    for e in &report.entries {
        let mark = if e.agrees() { ' ' } else { '!' };
        println!("{mark} {:<28} {}", e.fixture.name, e.verdict);
    }
    let h = report.histogram();
    println!("O0 {}  O1 {}  O2 {}", h.o0, h.o1, h.o2);
    for (reason, n) in report.reasons() {
        println!("  {reason}: {n}");
    }
    Ok(())
}
