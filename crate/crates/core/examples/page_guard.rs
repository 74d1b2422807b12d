//! Each code page costs one protection change for the whole run, however
//! many patches land on it.

use ic_dbm::dbm::{PageGuard, RecordingBackend};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut guard = PageGuard::new(4096, RecordingBackend::default());
    let patches = [(0x1010, 11), (0x1100, 7), (0x1ffa, 11), (0x2400, 7), (0x1010, 11)];
    for (addr, len) in patches {
        guard.ensure_writable(addr, len)?;
        println!("patch {addr:#x}+{len:<2} -> backend calls so far {:x?}", guard.backend().calls);
    }
    println!("{} pages unprotected", guard.unprotect_count());
    Ok(())
}
