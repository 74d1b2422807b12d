//! Decodes the instruction window that the analyzer scans from a hit-path
//! label, then classifies it.

use ic_dbm::dbm::{analyze_site, WINDOW_MAX};
use ic_dbm::x86::{decode_window, hex_string, parse_hex, CodeBuffer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let label = 0x1000;
    let ic = label + 7 + 0x101c;
    let samples = [
        ("listing", "48 8b 05 1c 10 00 00 48 8b 04 c7 48 89 45 c8 c3"),
        ("scheduled", "48 8d 77 08 48 8b 05 18 10 00 00 48 8b 04 c6 c3"),
        ("stack first", "48 89 45 c8 48 8b 05 1c 10 00 00 c3"),
        ("not rip", "48 8b 45 30 c3"),
    ];
    for (name, hex) in samples {
        let code = CodeBuffer::new(label, parse_hex(hex).ok_or("bad hex")?);
        println!("{name}:");
        for insn in decode_window(&code, label, WINDOW_MAX)? {
            println!("  {:#x}  {:<24} {insn}", insn.addr, hex_string(&insn.raw));
        }
        let verdict = format!("{:?}", analyze_site(&code, label, ic, None, 8)?);
        let short = match verdict.strip_prefix("Ineligible") {
            Some(rest) => format!("Ineligible{} }}", rest.split(',').next().unwrap_or("")),
            None => verdict.split_whitespace().next().unwrap_or("").to_string(),
        };
        println!("  => {short}");
    }
    Ok(())
}
