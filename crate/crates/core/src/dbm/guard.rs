use std::collections::BTreeSet;
use std::io;

use super::DbmError;

/// Makes one code page writable (and still executable).
pub trait ProtectBackend {
    fn make_writable(&mut self, page_addr: u64, page_size: usize) -> io::Result<()>;
}

/// Backend that only records the calls it receives. `fail_on` makes the
/// call for that page fail, for exercising error paths.
#[derive(Debug, Default, Clone)]
pub struct RecordingBackend {
    pub calls: Vec<u64>,
    pub fail_on: Option<u64>,
}

impl ProtectBackend for RecordingBackend {
    fn make_writable(&mut self, page_addr: u64, _page_size: usize) -> io::Result<()> {
        if self.fail_on == Some(page_addr) {
            return Err(io::Error::new(io::ErrorKind::PermissionDenied, "injected failure"));
        }
        self.calls.push(page_addr);
        Ok(())
    }
}

/// Cache of pages already made writable, so each page costs at most one
/// protection change for the whole run.
#[derive(Debug)]
pub struct PageGuard<B> {
    page_size: usize,
    unprotected: BTreeSet<u64>,
    unprotect_count: usize,
    backend: B,
}

impl<B: ProtectBackend> PageGuard<B> {
    pub fn new(page_size: usize, backend: B) -> PageGuard<B> {
        assert!(page_size.is_power_of_two(), "page size must be a power of two");
        PageGuard {
            page_size,
            unprotected: BTreeSet::new(),
            unprotect_count: 0,
            backend,
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_of(&self, addr: u64) -> u64 {
        addr & !(self.page_size as u64 - 1)
    }

    /// Page base addresses overlapping `[addr, addr + len)`.
    pub fn pages(&self, addr: u64, len: usize) -> impl Iterator<Item = u64> {
        let first = self.page_of(addr);
        let last = if len == 0 {
            first
        } else {
            self.page_of(addr + len as u64 - 1)
        };
        let step = self.page_size;
        (first..=last).step_by(step)
    }

    pub fn is_writable(&self, page: u64) -> bool {
        self.unprotected.contains(&page)
    }

    pub fn span_writable(&self, addr: u64, len: usize) -> Result<(), DbmError> {
        match self.pages(addr, len).find(|p| !self.is_writable(*p)) {
            Some(page) => Err(DbmError::PermissionDenied { page }),
            None => Ok(()),
        }
    }

    pub fn ensure_writable(&mut self, addr: u64, len: usize) -> Result<(), DbmError> {
        let pages: Vec<u64> = self.pages(addr, len).collect();
        for page in pages {
            if self.unprotected.contains(&page) {
                continue;
            }
            self.backend
                .make_writable(page, self.page_size)
                .map_err(|e| DbmError::Protect {
                    page,
                    message: e.to_string(),
                })?;
            self.unprotected.insert(page);
            self.unprotect_count += 1;
        }
        Ok(())
    }

    pub fn unprotect_count(&self) -> usize {
        self.unprotect_count
    }

    pub fn unprotected(&self) -> &BTreeSet<u64> {
        &self.unprotected
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn guard() -> PageGuard<RecordingBackend> {
        PageGuard::new(4096, RecordingBackend::default())
    }

    #[test]
    fn one_call_per_page() {
        let mut g = guard();
        g.ensure_writable(0x1010, 11).unwrap();
        g.ensure_writable(0x1800, 11).unwrap();
        assert_eq!(g.backend().calls, vec![0x1000]);
        assert_eq!(g.unprotect_count(), 1);
    }

    #[test]
    fn straddling_span_touches_two_pages() {
        let mut g = guard();
        g.ensure_writable(0x1ffa, 11).unwrap();
        assert_eq!(g.backend().calls, vec![0x1000, 0x2000]);
    }

    #[test]
    fn failure_is_propagated_and_not_cached() {
        let mut g = PageGuard::new(
            4096,
            RecordingBackend {
                fail_on: Some(0x2000),
                ..Default::default()
            },
        );
        let err = g.ensure_writable(0x1ffa, 11).unwrap_err();
        assert!(matches!(err, DbmError::Protect { page: 0x2000, .. }));
        assert!(g.is_writable(0x1000));
        assert!(!g.is_writable(0x2000));
        assert_eq!(g.unprotect_count(), g.unprotected().len());
    }

    #[test]
    fn permission_check() {
        let mut g = guard();
        assert_eq!(
            g.span_writable(0x1000, 4),
            Err(DbmError::PermissionDenied { page: 0x1000 })
        );
        g.ensure_writable(0x1000, 4).unwrap();
        assert!(g.span_writable(0x1000, 4).is_ok());
    }
}
