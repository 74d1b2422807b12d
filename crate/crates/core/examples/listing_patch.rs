//! The classic example: the offset load and the indexed property load fuse
//! into one `mov disp32(%rdi),%rax`, and a later shape change rewrites only
//! the four displacement bytes.

use ic_dbm::dbm::{analyze_site, apply_patch, build_patch, repatch_offset, PageGuard, RecordingBackend};
use ic_dbm::x86::{hex_string, parse_hex, CodeBuffer, CodeMemory};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let label = 0x1000;
    let mut code = CodeBuffer::new(label, parse_hex("48 8b 05 1c 10 00 00 48 8b 04 c7").unwrap());
    println!("original  {}", hex_string(code.code()));

    let site = analyze_site(&code, label, label + 7 + 0x101c, None, 8)?;
    let plan = build_patch(&site, 3, 8)?;
    let mut guard = PageGuard::new(4096, RecordingBackend::default());
    guard.ensure_writable(plan.span_addr, plan.span_len)?;

    apply_patch(&mut code, &plan, &guard)?;
    println!("patched   {}  ({}, {} bytes)", hex_string(code.code()), plan.level, plan.span_len);

    repatch_offset(&mut code, &plan, 4, &guard)?;
    println!("repatched {}", hex_string(code.code()));
    println!("pages unprotected: {}", guard.backend().calls.len());
    Ok(())
}
