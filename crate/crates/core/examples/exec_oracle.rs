//! Runs the original and the patched hit path on the execution oracle over
//! random machine states: same results, one data read fewer.

use ic_dbm::dbm::{analyze_site, apply_patch, plan_site, OptLevel, PageGuard, RecordingBackend};
use ic_dbm::exec_oracle::{assert_equivalent, HitPathStates};
use ic_dbm::x86::{parse_hex, CodeBuffer, Reg};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let label = 0x1000;
    let ic = label + 7 + 0x101c;
    let original = CodeBuffer::new(label, parse_hex("48 8b 05 1c 10 00 00 48 8b 04 c7").unwrap());
    let site = analyze_site(&original, label, ic, None, 8)?;
    let states = HitPathStates {
        obj_reg: Reg::RDI,
        ic_offset_addr: ic,
        field_index: 3,
        record_words: 8,
        word_size: 8,
        fixed: vec![],
    };
    let mut rng = StdRng::seed_from_u64(1);

    for cap in [OptLevel::O1, OptLevel::O2] {
        let plan = plan_site(&site, 3, 8, cap)?;
        let mut patched = original.clone();
        let mut guard = PageGuard::new(4096, RecordingBackend::default());
        guard.ensure_writable(label, 11)?;
        apply_patch(&mut patched, &plan, &guard)?;
        let report = assert_equivalent(&original, &patched, label, 16, states.iter(&mut rng, 1000), &[])?;
        println!("{cap}: {report}");
    }
    Ok(())
}
