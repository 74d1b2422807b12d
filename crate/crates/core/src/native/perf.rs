//! Hardware counters through `perf_event_open`, user space only.

use serde::{Deserialize, Serialize};

/// Which counters could be opened on this host.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterAvailability {
    pub instructions: bool,
    pub l1d_loads: bool,
    pub l1d_misses: bool,
}

impl CounterAvailability {
    pub fn any(&self) -> bool {
        self.instructions || self.l1d_loads || self.l1d_misses
    }
}

#[cfg(target_os = "linux")]
mod sys {
    use std::io;

    const PERF_TYPE_HARDWARE: u32 = 0;
    const PERF_TYPE_HW_CACHE: u32 = 3;
    const PERF_COUNT_HW_INSTRUCTIONS: u64 = 1;
    // cache L1D | op READ << 8 | result << 16
    const L1D_READ_ACCESS: u64 = 0;
    const L1D_READ_MISS: u64 = 1 << 16;

    const DISABLED: u64 = 1 << 0;
    const EXCLUDE_KERNEL: u64 = 1 << 5;
    const EXCLUDE_HV: u64 = 1 << 6;

    const IOC_ENABLE: libc::c_ulong = 0x2400;
    const IOC_DISABLE: libc::c_ulong = 0x2401;
    const IOC_RESET: libc::c_ulong = 0x2403;

    /// The first published layout of `perf_event_attr`; the kernel accepts
    /// it and zero-fills everything newer.
    #[repr(C)]
    #[derive(Default)]
    struct Attr {
        kind: u32,
        size: u32,
        config: u64,
        sample_period: u64,
        sample_type: u64,
        read_format: u64,
        flags: u64,
        wakeup_events: u32,
        bp_type: u32,
        config1: u64,
    }

    #[derive(Debug)]
    pub struct Counter {
        fd: libc::c_int,
    }

    impl Counter {
        fn open(kind: u32, config: u64) -> io::Result<Counter> {
            let attr = Attr {
                kind,
                size: std::mem::size_of::<Attr>() as u32,
                config,
                flags: DISABLED | EXCLUDE_KERNEL | EXCLUDE_HV,
                ..Default::default()
            };
            // SAFETY: attr is a valid, initialized perf_event_attr prefix
            // whose size field matches its length.
            let fd = unsafe {
                libc::syscall(
                    libc::SYS_perf_event_open,
                    &attr as *const Attr,
                    0 as libc::pid_t,
                    -1 as libc::c_int,
                    -1 as libc::c_int,
                    0 as libc::c_ulong,
                )
            };
            if fd < 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(Counter { fd: fd as libc::c_int })
        }

        pub fn instructions() -> io::Result<Counter> {
            Counter::open(PERF_TYPE_HARDWARE, PERF_COUNT_HW_INSTRUCTIONS)
        }

        pub fn l1d_loads() -> io::Result<Counter> {
            Counter::open(PERF_TYPE_HW_CACHE, L1D_READ_ACCESS)
        }

        pub fn l1d_misses() -> io::Result<Counter> {
            Counter::open(PERF_TYPE_HW_CACHE, L1D_READ_MISS)
        }

        fn ioctl(&self, request: libc::c_ulong) {
            // SAFETY: fd is an open perf event descriptor owned by self.
            unsafe {
                libc::ioctl(self.fd, request as _, 0);
            }
        }

        pub fn start(&self) {
            self.ioctl(IOC_RESET);
            self.ioctl(IOC_ENABLE);
        }

        pub fn stop(&self) {
            self.ioctl(IOC_DISABLE);
        }

        pub fn read(&self) -> Option<u64> {
            let mut value = 0u64;
            // SAFETY: reading 8 bytes into a u64 we own.
            let n = unsafe { libc::read(self.fd, &mut value as *mut u64 as *mut libc::c_void, 8) };
            (n == 8).then_some(value)
        }
    }

    impl Drop for Counter {
        fn drop(&mut self) {
            // SAFETY: fd is owned and closed exactly once.
            unsafe {
                libc::close(self.fd);
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod sys {
    use std::io;

    #[derive(Debug)]
    pub struct Counter;

    impl Counter {
        fn unsupported() -> io::Result<Counter> {
            Err(io::Error::new(io::ErrorKind::Unsupported, "perf_event_open is Linux only"))
        }

        pub fn instructions() -> io::Result<Counter> {
            Counter::unsupported()
        }

        pub fn l1d_loads() -> io::Result<Counter> {
            Counter::unsupported()
        }

        pub fn l1d_misses() -> io::Result<Counter> {
            Counter::unsupported()
        }

        pub fn start(&self) {}

        pub fn stop(&self) {}

        pub fn read(&self) -> Option<u64> {
            None
        }
    }
}

/// The three counters the benchmarks read, each present only if the host
/// let us open it.
#[derive(Debug, Default)]
pub struct CounterSet {
    instructions: Option<sys::Counter>,
    l1d_loads: Option<sys::Counter>,
    l1d_misses: Option<sys::Counter>,
    /// Why each missing counter is missing.
    pub errors: Vec<String>,
}

impl CounterSet {
    /// A set with no counters, for runs that only want wall time.
    pub fn none() -> CounterSet {
        CounterSet::default()
    }

    pub fn open() -> CounterSet {
        let mut set = CounterSet::default();
        let mut take = |name: &str, r: std::io::Result<sys::Counter>| match r {
            Ok(c) => Some(c),
            Err(e) => {
                set.errors.push(format!("{name}: {e}"));
                None
            }
        };
        let instructions = take("instructions", sys::Counter::instructions());
        let l1d_loads = take("L1-dcache-loads", sys::Counter::l1d_loads());
        let l1d_misses = take("L1-dcache-load-misses", sys::Counter::l1d_misses());
        set.instructions = instructions;
        set.l1d_loads = l1d_loads;
        set.l1d_misses = l1d_misses;
        set
    }

    pub fn availability(&self) -> CounterAvailability {
        CounterAvailability {
            instructions: self.instructions.is_some(),
            l1d_loads: self.l1d_loads.is_some(),
            l1d_misses: self.l1d_misses.is_some(),
        }
    }

    fn each(&self) -> impl Iterator<Item = &sys::Counter> {
        [&self.instructions, &self.l1d_loads, &self.l1d_misses]
            .into_iter()
            .flatten()
    }

    pub fn start(&self) {
        self.each().for_each(sys::Counter::start);
    }

    pub fn stop(&self) {
        self.each().for_each(sys::Counter::stop);
    }

    /// `(instructions, l1d_loads, l1d_misses)` since the last `start`.
    pub fn read(&self) -> (Option<u64>, Option<u64>, Option<u64>) {
        (
            self.instructions.as_ref().and_then(sys::Counter::read),
            self.l1d_loads.as_ref().and_then(sys::Counter::read),
            self.l1d_misses.as_ref().and_then(sys::Counter::read),
        )
    }
}
