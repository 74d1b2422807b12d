//! Real inline-cache machine code: emission, execution, live patching and
//! hardware counters.
//!
//! Emission ([`emit_ic_site`]) and the scenario definitions are portable and
//! can be exercised on any host through [`simulate`], which runs the emitted
//! bytes on the execution oracle. Executing natively ([`run_benchmark`])
//! needs an x86_64 POSIX host; counters additionally need Linux with access
//! to `perf_event_open`, and degrade to wall time when unavailable.
//!
//! Nothing in this module is thread-safe. Emitted code is executed, missed
//! and patched on the calling thread only.

mod emit;
mod perf;
mod sim;

#[cfg(all(target_arch = "x86_64", unix))]
mod region;
#[cfg(all(target_arch = "x86_64", unix))]
mod runner;

pub use emit::{emit_ic_site, Assembler, IcCells, ShapeVariant, SiteCode};
pub use perf::{CounterAvailability, CounterSet};
pub use sim::{simulate, SimResult};

#[cfg(all(target_arch = "x86_64", unix))]
pub use region::{flush_icache_barrier, page_size, DataArena, ExecRegion, RegionProtect};
#[cfg(all(target_arch = "x86_64", unix))]
pub use runner::{calibrate, run_benchmark, run_plan};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::time::Duration;

use crate::dbm::{DbmError, EngineStats, OptLevel, RewriteEvent};
use crate::object_model::{ObjectId, ObjectModelError, Realm};

/// True where [`run_benchmark`] exists.
pub const NATIVE_SUPPORTED: bool = cfg!(all(target_arch = "x86_64", unix));

#[derive(Debug, Error)]
pub enum NativeError {
    #[error("code region exhausted: {needed} bytes needed, {capacity} available")]
    RegionExhausted { needed: usize, capacity: usize },
    #[error("data cell {target:#x} is out of RIP-relative reach")]
    OutOfReach { target: u64 },
    #[error("{what} failed: {source}")]
    Os {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dbm(#[from] DbmError),
    #[error(transparent)]
    Object(#[from] ObjectModelError),
    #[error("emitted code misbehaved: {0}")]
    Execution(String),
}

/// Counter readings for one bracketed loop. Hardware counts are `None`
/// when the host does not provide them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfCounters {
    pub instructions: Option<u64>,
    pub l1d_loads: Option<u64>,
    pub l1d_misses: Option<u64>,
    pub wall_time_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub reps: usize,
    pub counters: bool,
    /// Fixed iteration count; calibrated against `target` when absent.
    pub iterations: Option<u64>,
    pub target: Duration,
}

impl BenchConfig {
    /// Runs of at least two seconds.
    pub fn full(reps: usize) -> BenchConfig {
        BenchConfig {
            reps,
            counters: true,
            iterations: None,
            target: Duration::from_secs(2),
        }
    }

    /// Runs of about 50 ms, for overhead probes and quick checks.
    pub fn short(reps: usize) -> BenchConfig {
        BenchConfig {
            target: Duration::from_millis(50),
            ..BenchConfig::full(reps)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub counters: PerfCounters,
    /// Wrapping sum of every property value read.
    pub checksum: u64,
    pub misses: u64,
    pub stats: EngineStats,
    /// Offsets are from the start of the measured loop.
    pub events: Vec<RewriteEvent>,
    pub site_levels: Vec<OptLevel>,
    pub unprotect_calls: usize,
    /// Distinct code pages holding a patched span.
    pub patched_pages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: Scenario,
    pub level: OptLevel,
    pub iterations: u64,
    pub availability: CounterAvailability,
    pub counter_errors: Vec<String>,
    pub reps: Vec<RepResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// One site, one shape: a single patch during warmup.
    Mono,
    /// The two shapes of the classic `{a, prop}` / `{b, c, prop}` example,
    /// alternating in blocks, over one site of each variant.
    Bishape,
    /// Six shapes in rotation, so sites are repatched all along.
    Kshape,
    /// Array summation, no property access at all.
    Array,
}

/// Everything a run needs to know about a scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioPlan {
    pub sites: Vec<ShapeVariant>,
    /// Property names of each shape, in insertion order; every shape ends
    /// with `prop`, the property the sites read.
    pub shapes: Vec<Vec<String>>,
    pub objects_per_shape: usize,
    /// Consecutive iterations that see the same shape.
    pub block: u64,
    pub array_words: usize,
}

pub const PROPERTY: &str = "prop";

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Mono, Scenario::Bishape, Scenario::Kshape, Scenario::Array];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Mono => "mono",
            Scenario::Bishape => "bishape",
            Scenario::Kshape => "kshape",
            Scenario::Array => "array",
        }
    }

    pub fn plan(self) -> ScenarioPlan {
        let shape = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match self {
            Scenario::Mono => ScenarioPlan {
                sites: vec![ShapeVariant::Canonical],
                shapes: vec![shape(&["a", PROPERTY])],
                objects_per_shape: 64,
                block: 1,
                array_words: 0,
            },
            Scenario::Bishape => ScenarioPlan {
                sites: ShapeVariant::ALL.to_vec(),
                shapes: vec![shape(&["a", PROPERTY]), shape(&["b", "c", PROPERTY])],
                objects_per_shape: 64,
                block: 512,
                array_words: 0,
            },
            Scenario::Kshape => ScenarioPlan {
                sites: vec![ShapeVariant::Canonical, ShapeVariant::Scheduled],
                shapes: (0..6)
                    .map(|k| {
                        let mut names: Vec<String> = (0..k).map(|i| format!("f{i}")).collect();
                        names.push(PROPERTY.to_string());
                        names
                    })
                    .collect(),
                objects_per_shape: 16,
                block: 64,
                array_words: 0,
            },
            Scenario::Array => ScenarioPlan {
                sites: vec![],
                shapes: vec![],
                objects_per_shape: 0,
                block: 1,
                array_words: 4096,
            },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                format!("unknown scenario {s:?} (expected one of {})", names.join(", "))
            })
    }
}

/// The objects of a scenario, built identically for every run.
#[derive(Debug)]
pub struct Population {
    pub realm: Realm,
    /// `objects[shape][i]`
    pub objects: Vec<Vec<ObjectId>>,
}

impl ScenarioPlan {
    pub fn populate(&self) -> Result<Population, NativeError> {
        let mut realm = Realm::default();
        let mut objects = Vec::with_capacity(self.shapes.len());
        for (s, names) in self.shapes.iter().enumerate() {
            let mut row = Vec::with_capacity(self.objects_per_shape);
            for i in 0..self.objects_per_shape {
                let o = realm.new_object(None)?;
                for (p, name) in names.iter().enumerate() {
                    let v = (s as u64 + 1) * 1_000_003 + i as u64 * 7919 + p as u64;
                    realm.set_named(o, name, v)?;
                }
                row.push(o);
            }
            objects.push(row);
        }
        Ok(Population { realm, objects })
    }

    /// Object read by every site at iteration `i`.
    pub fn object_at(&self, objects: &[Vec<ObjectId>], i: u64) -> ObjectId {
        let shape = (i / self.block) as usize % self.shapes.len();
        let row = &objects[shape];
        row[i as usize % row.len()]
    }

    /// Values of the array scenario.
    pub fn array_values(&self) -> impl Iterator<Item = u64> {
        (0..self.array_words as u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40)
    }
}

/// What level a site effectively ran at, for the classification histogram.
pub fn effective_level(memo: &crate::ic_runtime::AnalysisMemo, cap: OptLevel) -> OptLevel {
    match memo.level() {
        Some(level) if cap.allows(level) => level.into(),
        _ => OptLevel::O0,
    }
}
