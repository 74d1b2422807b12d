//! Welch's t-test on two small samples, as used for every benchmark
//! comparison against level 0.

use ic_dbm::bench::stats::{welch_t_test, SampleSet, ALPHA};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = SampleSet::new(
        "a",
        vec![27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4],
    )?;
    let b = SampleSet::new(
        "b",
        vec![
            27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 30.3, 23.8, 26.4, 27.5, 20.3,
            23.7,
        ],
    )?;
    println!("a: n {} mean {:.4} sd {:.4}", a.n(), a.mean(), a.stddev());
    println!("b: n {} mean {:.4} sd {:.4}", b.n(), b.mean(), b.stddev());
    let r = welch_t_test(&a, &b, ALPHA)?;
    println!(
        "t = {:.6}, df = {:.6}, p = {:.6e}, significant at {ALPHA}: {}",
        r.t_statistic, r.degrees_of_freedom, r.p_value, r.significant
    );
    Ok(())
}
