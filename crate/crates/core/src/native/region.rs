use std::cell::RefCell;
use std::collections::BTreeSet;
use std::io;
use std::rc::Rc;

use super::NativeError;
use crate::dbm::ProtectBackend;
use crate::x86::{CodeMemory, CodecError};

pub fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as usize
    } else {
        4096
    }
}

fn round_up(n: usize, page: usize) -> usize {
    n.max(1).div_ceil(page) * page
}

/// One anonymous mapping: code pages first, data pages after them, so
/// every data cell is within RIP-relative reach of every instruction.
#[derive(Debug)]
struct Mapping {
    ptr: *mut u8,
    len: usize,
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: ptr/len came from a successful mmap and are unmapped once.
        unsafe {
            libc::munmap(self.ptr as *mut libc::c_void, self.len);
        }
    }
}

fn os_err(what: &'static str) -> NativeError {
    NativeError::Os {
        what,
        source: io::Error::last_os_error(),
    }
}

/// Executable code pages. After [`ExecRegion::install`] the pages are
/// read+exec; each one becomes read+write+exec at most once, through the
/// [`RegionProtect`] backend of a page guard.
#[derive(Debug)]
pub struct ExecRegion {
    map: Rc<Mapping>,
    code_len: usize,
    used: usize,
    page_size: usize,
    writable: Rc<RefCell<BTreeSet<u64>>>,
}

/// Data pages of the same mapping, always read+write.
#[derive(Debug)]
pub struct DataArena {
    map: Rc<Mapping>,
    start: usize,
    len: usize,
    used: usize,
}

/// `mprotect` backend for one region.
#[derive(Debug)]
pub struct RegionProtect {
    base: u64,
    code_len: usize,
    writable: Rc<RefCell<BTreeSet<u64>>>,
    pub calls: usize,
}

impl ExecRegion {
    /// Maps `code_bytes` of code and `data_words` of data, both rounded up
    /// to whole pages.
    pub fn new(code_bytes: usize, data_words: usize) -> Result<(ExecRegion, DataArena, RegionProtect), NativeError> {
        let page = page_size();
        let code_len = round_up(code_bytes, page);
        let data_len = round_up(data_words * 8, page);
        let len = code_len + data_len;
        // SAFETY: anonymous private mapping with no address hint.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(os_err("mmap"));
        }
        let map = Rc::new(Mapping {
            ptr: ptr as *mut u8,
            len,
        });
        let writable = Rc::new(RefCell::new(BTreeSet::new()));
        let region = ExecRegion {
            map: map.clone(),
            code_len,
            used: 0,
            page_size: page,
            writable: writable.clone(),
        };
        let protect = RegionProtect {
            base: ptr as u64,
            code_len,
            writable,
            calls: 0,
        };
        let data = DataArena {
            map,
            start: code_len,
            len: data_len,
            used: 0,
        };
        Ok((region, data, protect))
    }

    pub fn base(&self) -> u64 {
        self.map.ptr as u64
    }

    pub fn capacity(&self) -> usize {
        self.code_len
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Copies emitted code to the start of the region and seals the code
    /// pages read+exec.
    pub fn install(&mut self, code: &[u8]) -> Result<(), NativeError> {
        if code.len() > self.code_len {
            return Err(NativeError::RegionExhausted {
                needed: code.len(),
                capacity: self.code_len,
            });
        }
        // SAFETY: the code pages are still read+write and code fits.
        unsafe {
            std::ptr::copy_nonoverlapping(code.as_ptr(), self.map.ptr, code.len());
        }
        self.used = code.len();
        // SAFETY: the range is the page-aligned code part of our mapping.
        let rc = unsafe {
            libc::mprotect(
                self.map.ptr as *mut libc::c_void,
                self.code_len,
                libc::PROT_READ | libc::PROT_EXEC,
            )
        };
        if rc != 0 {
            return Err(os_err("mprotect"));
        }
        self.writable.borrow_mut().clear();
        Ok(())
    }

    /// Pages currently read+write+exec.
    pub fn writable_pages(&self) -> BTreeSet<u64> {
        self.writable.borrow().clone()
    }
}

impl CodeMemory for ExecRegion {
    fn base_addr(&self) -> u64 {
        self.base()
    }

    fn code(&self) -> &[u8] {
        // SAFETY: the first `used` bytes were initialized by install and
        // the mapping lives as long as self.
        unsafe { std::slice::from_raw_parts(self.map.ptr, self.used) }
    }

    fn write_code(&mut self, addr: u64, bytes: &[u8]) -> Result<(), CodecError> {
        let base = self.base();
        let end = self.end_addr();
        if addr < base || addr.saturating_add(bytes.len() as u64) > end {
            return Err(CodecError::OutOfBounds { addr, base, end });
        }
        // A store to a read+exec page would fault; refuse instead.
        let mask = !(self.page_size as u64 - 1);
        let last = (addr + bytes.len().max(1) as u64 - 1) & mask;
        let writable = self.writable.borrow();
        let mut page = addr & mask;
        while page <= last {
            if !writable.contains(&page) {
                return Err(CodecError::NotWritable { addr: page });
            }
            page += self.page_size as u64;
        }
        // SAFETY: bounds and page permissions were checked above.
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), addr as *mut u8, bytes.len());
        }
        Ok(())
    }
}

impl ProtectBackend for RegionProtect {
    fn make_writable(&mut self, page_addr: u64, page_size: usize) -> io::Result<()> {
        if page_addr < self.base || page_addr + page_size as u64 > self.base + self.code_len as u64 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("page {page_addr:#x} is outside the code region"),
            ));
        }
        // SAFETY: page-aligned range inside our own code mapping.
        let rc = unsafe {
            libc::mprotect(
                page_addr as *mut libc::c_void,
                page_size,
                libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        self.calls += 1;
        self.writable.borrow_mut().insert(page_addr);
        Ok(())
    }
}

impl DataArena {
    fn addr_of(&self, offset: usize) -> u64 {
        self.map.ptr as u64 + (self.start + offset) as u64
    }

    /// Reserves `words` zeroed words and returns the address of the first.
    pub fn alloc(&mut self, words: usize) -> Result<u64, NativeError> {
        let bytes = words * 8;
        if self.used + bytes > self.len {
            return Err(NativeError::RegionExhausted {
                needed: self.used + bytes,
                capacity: self.len,
            });
        }
        let at = self.addr_of(self.used);
        self.used += bytes;
        Ok(at)
    }

    fn check(&self, addr: u64) {
        let lo = self.addr_of(0);
        assert!(
            addr >= lo && addr + 8 <= lo + self.used as u64 && addr.is_multiple_of(8),
            "{addr:#x} is not an allocated data word"
        );
    }

    pub fn write(&mut self, addr: u64, value: u64) {
        self.check(addr);
        // SAFETY: checked to be an aligned word inside the data pages.
        unsafe { std::ptr::write_volatile(addr as *mut u64, value) }
    }

    pub fn read(&self, addr: u64) -> u64 {
        self.check(addr);
        // SAFETY: as in write.
        unsafe { std::ptr::read_volatile(addr as *const u64) }
    }
}

/// Makes freshly written code visible to this thread's instruction fetch.
/// x86 keeps instruction caches coherent with stores; what remains is
/// discarding anything already prefetched, which a serializing
/// instruction does.
#[allow(unused_unsafe)]
pub fn flush_icache_barrier() {
    // SAFETY: cpuid is available on every x86_64 CPU.
    unsafe {
        std::hint::black_box(std::arch::x86_64::__cpuid(0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbm::PageGuard;

    #[test]
    fn sealed_code_rejects_writes_until_unprotected() {
        let (mut region, _data, protect) = ExecRegion::new(100, 10).unwrap();
        region.install(&[0xc3; 100]).unwrap();
        let base = region.base();
        assert_eq!(
            region.write_code(base, &[0x90]),
            Err(CodecError::NotWritable { addr: base })
        );
        let mut guard = PageGuard::new(region.page_size(), protect);
        guard.ensure_writable(base, 1).unwrap();
        guard.ensure_writable(base + 50, 1).unwrap();
        assert_eq!(guard.backend().calls, 1);
        region.write_code(base, &[0x90]).unwrap();
        assert_eq!(region.code()[0], 0x90);
    }

    #[test]
    fn data_words_round_trip() {
        let (_region, mut data, _) = ExecRegion::new(16, 4).unwrap();
        let a = data.alloc(2).unwrap();
        data.write(a + 8, 42);
        assert_eq!(data.read(a + 8), 42);
        assert_eq!(data.read(a), 0);
        assert!(data.alloc(10_000).is_err());
    }

    #[test]
    fn protect_refuses_foreign_pages() {
        let (_r, _d, mut protect) = ExecRegion::new(16, 4).unwrap();
        assert!(protect.make_writable(0x1000, 4096).is_err());
    }

    #[test]
    fn barrier_is_callable() {
        flush_icache_barrier();
    }
}
