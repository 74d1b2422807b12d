use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use super::{
    effective_level, emit_ic_site, flush_icache_barrier, Assembler, BenchConfig, BenchResult, CounterSet, DataArena,
    ExecRegion, IcCells, NativeError, PerfCounters, Population, RepResult, Scenario, ScenarioPlan, PROPERTY,
};
use crate::dbm::{DbmEngine, OptLevel, PageGuard};
use crate::ic_runtime::{cache_miss, AnalysisMemo, InlineCache};

#[repr(C)]
struct SiteOutput {
    value: u64,
    miss: u64,
}

type SiteFn = unsafe extern "sysv64" fn(*const u64) -> SiteOutput;

const CODE_BYTES: usize = 4096;

struct Prepared {
    engine: DbmEngine<ExecRegion, super::RegionProtect>,
    data: DataArena,
    population: Population,
    records: Vec<u64>,
    cells: Vec<IcCells>,
    fns: Vec<SiteFn>,
    ics: Vec<InlineCache>,
    array: Option<(u64, usize)>,
}

fn prepare(plan: &ScenarioPlan, level: OptLevel) -> Result<Prepared, NativeError> {
    let mut population = plan.populate()?;
    let all: Vec<_> = population.objects.iter().flatten().copied().collect();
    let record_words: usize = all
        .iter()
        .map(|&o| population.realm.native_record(o, 0).len())
        .sum();
    let data_words = 2 * plan.sites.len() + record_words + plan.array_words;
    let (mut region, mut data, protect) = ExecRegion::new(CODE_BYTES, data_words)?;

    let mut asm = Assembler::new(region.base(), region.capacity());
    let mut sites = Vec::new();
    let mut cells = Vec::new();
    for &variant in &plan.sites {
        let c = IcCells {
            class_addr: data.alloc(1)?,
            offset_addr: data.alloc(1)?,
        };
        sites.push(emit_ic_site(&mut asm, variant, c)?);
        cells.push(c);
    }
    region.install(asm.bytes())?;

    let mut records = vec![0; population.realm.object_count()];
    for &o in &all {
        let words = population.realm.native_record(o, 0);
        let at = data.alloc(words.len())?;
        for (i, w) in words.iter().enumerate() {
            data.write(at + 8 * i as u64, *w);
        }
        records[o.index()] = at;
    }
    let array = if plan.array_words > 0 {
        let at = data.alloc(plan.array_words)?;
        for (i, v) in plan.array_values().enumerate() {
            data.write(at + 8 * i as u64, v);
        }
        Some((at, plan.array_words))
    } else {
        None
    };

    let prop = population.realm.intern(PROPERTY)?;
    let ics = sites
        .iter()
        .enumerate()
        .map(|(i, s)| InlineCache::new(i as u32, prop, s.addrs()))
        .collect();
    let fns = sites
        .iter()
        // SAFETY: entry is the first byte of a complete function emitted
        // for this calling convention, living in this region.
        .map(|s| unsafe { std::mem::transmute::<usize, SiteFn>(s.entry as usize) })
        .collect();
    let page = region.page_size();
    let engine = DbmEngine::new(region, PageGuard::new(page, protect), level, 8);
    Ok(Prepared {
        engine,
        data,
        population,
        records,
        cells,
        fns,
        ics,
        array,
    })
}

fn run_rep(plan: &ScenarioPlan, level: OptLevel, iterations: u64, counters: &CounterSet) -> Result<RepResult, NativeError> {
    let mut p = prepare(plan, level)?;
    let mut checksum = 0u64;
    let mut misses = 0u64;

    p.engine.reset_epoch();
    counters.start();
    let t0 = Instant::now();
    if let Some((at, len)) = p.array {
        // SAFETY: the array was allocated and initialized in the data pages,
        // and nothing writes it during the loop.
        let values = unsafe { std::slice::from_raw_parts(at as *const u64, len) };
        for _ in 0..iterations {
            for v in std::hint::black_box(values) {
                checksum = checksum.wrapping_add(*v);
            }
        }
    } else {
        for i in 0..iterations {
            let obj = plan.object_at(&p.population.objects, i);
            let record = p.records[obj.index()] as *const u64;
            for k in 0..p.fns.len() {
                // SAFETY: record points at a complete native record.
                let out = unsafe { (p.fns[k])(record) };
                let value = if out.miss == 0 {
                    out.value
                } else {
                    misses += 1;
                    let before = p.engine.stats().modifications();
                    let ic = &mut p.ics[k];
                    let v = cache_miss(ic, &p.population.realm, obj, &mut p.engine);
                    let class = ic.cached_class().map_or(0, |c| c.as_word());
                    let field = p.population.realm.layout().field_index(ic.cached_offset());
                    p.data.write(p.cells[k].class_addr, class);
                    p.data.write(p.cells[k].offset_addr, field);
                    if p.engine.stats().modifications() != before {
                        flush_icache_barrier();
                    }
                    v
                };
                checksum = checksum.wrapping_add(value);
            }
        }
    }
    let wall = t0.elapsed();
    counters.stop();
    let (instructions, l1d_loads, l1d_misses) = counters.read();

    let page = p.engine.guard().page_size() as u64;
    let patched_pages: BTreeSet<u64> = p
        .ics
        .iter()
        .filter_map(|ic| match ic.memo() {
            AnalysisMemo::Recognized { level: l, plan } if level.allows(*l) => Some(plan),
            _ => None,
        })
        .flat_map(|plan| {
            let first = plan.span_addr & !(page - 1);
            let last = (plan.span_end() - 1) & !(page - 1);
            (first..=last).step_by(page as usize)
        })
        .collect();

    Ok(RepResult {
        counters: PerfCounters {
            instructions,
            l1d_loads,
            l1d_misses,
            wall_time_ns: u64::try_from(wall.as_nanos()).unwrap_or(u64::MAX),
        },
        checksum,
        misses,
        stats: p.engine.stats(),
        events: p.engine.events().to_vec(),
        site_levels: p.ics.iter().map(|ic| effective_level(ic.memo(), level)).collect(),
        unprotect_calls: p.engine.guard().backend().calls,
        patched_pages: patched_pages.len(),
    })
}

/// Iterations for one rep of `scenario` to take about `target`, measured
/// at level 0 so that all levels run the same work.
pub fn calibrate(scenario: Scenario, target: Duration) -> Result<u64, NativeError> {
    let plan = scenario.plan();
    let none = CounterSet::none();
    let mut n: u64 = 64;
    loop {
        let wall = run_rep(&plan, OptLevel::O0, n, &none)?.counters.wall_time_ns.max(1);
        if u128::from(wall) * 8 >= target.as_nanos() || n >= 1 << 36 {
            let scaled = u128::from(n) * target.as_nanos() / u128::from(wall);
            return Ok(u64::try_from(scaled).unwrap_or(u64::MAX).max(1));
        }
        n *= 4;
    }
}

/// Runs `config.reps` reps of a scenario at one level, each in a freshly
/// emitted region so every rep includes its own warmup.
pub fn run_benchmark(scenario: Scenario, level: OptLevel, config: &BenchConfig) -> Result<BenchResult, NativeError> {
    let iterations = match config.iterations {
        Some(n) => n,
        None => calibrate(scenario, config.target)?,
    };
    let mut result = run_plan(&scenario.plan(), level, iterations, config)?;
    result.scenario = scenario;
    Ok(result)
}

/// [`run_benchmark`] for an arbitrary plan and a fixed iteration count.
/// The result is labelled with the scenario whose plan matches, or `Mono`.
pub fn run_plan(plan: &ScenarioPlan, level: OptLevel, iterations: u64, config: &BenchConfig) -> Result<BenchResult, NativeError> {
    let scenario = Scenario::ALL
        .into_iter()
        .find(|s| s.plan() == *plan)
        .unwrap_or(Scenario::Mono);
    let counters = if config.counters {
        CounterSet::open()
    } else {
        CounterSet::none()
    };
    let reps = (0..config.reps)
        .map(|_| run_rep(plan, level, iterations, &counters))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchResult {
        scenario,
        level,
        iterations,
        availability: counters.availability(),
        counter_errors: counters.errors.clone(),
        reps,
    })
}
