use std::collections::HashMap;

use super::{
    effective_level, emit_ic_site, Assembler, IcCells, NativeError, Population, Scenario, SiteCode, PROPERTY,
};
use crate::dbm::{DbmEngine, EngineStats, OptLevel, PageGuard, RecordingBackend};
use crate::exec_oracle::{run_sequence, Halt, MachineState};
use crate::ic_runtime::{cache_miss, InlineCache};
use crate::object_model::ObjectId;
use crate::x86::{CodeBuffer, CodeMemory, Reg};

const CODE_BASE: u64 = 0x10_0000;
const DATA_BASE: u64 = 0x20_0000;
const STACK_TOP: u64 = 0x7f_0000;
const RETURN_SENTINEL: u64 = 0xdead_0000;

/// A scenario run on the execution oracle instead of the CPU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimResult {
    pub checksum: u64,
    pub stats: EngineStats,
    pub insns: u64,
    pub data_reads: u64,
    pub misses: u64,
    pub site_levels: Vec<OptLevel>,
    /// Code bytes at the end of the run.
    pub final_code: CodeBuffer,
    pub sites: Vec<SiteCode>,
}

/// Runs `iterations` iterations of a scenario through emitted code, the DBM
/// engine and the oracle. Every modelled data read is counted, including the
/// stack read of each `ret`.
pub fn simulate(scenario: Scenario, level: OptLevel, iterations: u64) -> Result<SimResult, NativeError> {
    let plan = scenario.plan();
    let Population { mut realm, objects } = plan.populate()?;
    let mut state = MachineState::default();
    let mut next_data = DATA_BASE;
    let mut alloc = |words: usize| {
        let at = next_data;
        next_data += 8 * words as u64;
        at
    };

    let mut asm = Assembler::new(CODE_BASE, 64 * 1024);
    let mut sites = Vec::new();
    for &variant in &plan.sites {
        let cells = IcCells {
            class_addr: alloc(1),
            offset_addr: alloc(1),
        };
        state.write(cells.class_addr, 0);
        state.write(cells.offset_addr, 0);
        sites.push(emit_ic_site(&mut asm, variant, cells)?);
    }
    let mut records: HashMap<ObjectId, u64> = HashMap::new();
    for &o in objects.iter().flatten() {
        let words = realm.native_record(o, 0);
        let at = alloc(words.len());
        for (i, w) in words.iter().enumerate() {
            state.write(at + 8 * i as u64, *w);
        }
        records.insert(o, at);
    }

    let prop = realm.intern(PROPERTY)?;
    let mut engine = DbmEngine::new(
        CodeBuffer::new(CODE_BASE, asm.into_bytes()),
        PageGuard::new(4096, RecordingBackend::default()),
        level,
        8,
    );
    let mut ics: Vec<InlineCache> = sites
        .iter()
        .enumerate()
        .map(|(i, s)| InlineCache::new(i as u32, prop, s.addrs()))
        .collect();

    let mut result = SimResult {
        checksum: 0,
        stats: EngineStats::default(),
        insns: 0,
        data_reads: 0,
        misses: 0,
        site_levels: Vec::new(),
        final_code: CodeBuffer::new(CODE_BASE, Vec::new()),
        sites: sites.clone(),
    };

    if sites.is_empty() {
        let values: Vec<u64> = plan.array_values().collect();
        for _ in 0..iterations {
            for v in &values {
                result.checksum = result.checksum.wrapping_add(*v);
            }
            result.data_reads += values.len() as u64;
        }
    } else {
        for i in 0..iterations {
            let obj = plan.object_at(&objects, i);
            for (site, ic) in sites.iter().zip(ics.iter_mut()) {
                state.set_reg(Reg::RDI, records[&obj]);
                state.set_reg(Reg::RSP, STACK_TOP);
                state.write(STACK_TOP, RETURN_SENTINEL);
                let (out, trace) = run_sequence(engine.code(), site.entry, 64, state)
                    .map_err(|e| NativeError::Execution(e.to_string()))?;
                if trace.halt != Halt::LeftBuffer || out.rip != RETURN_SENTINEL {
                    return Err(NativeError::Execution(format!(
                        "site at {:#x} did not return",
                        site.entry
                    )));
                }
                state = out;
                result.insns += trace.insns_executed;
                result.data_reads += trace.data_reads;
                let value = if state.reg(Reg::RDX) != 0 {
                    result.misses += 1;
                    let v = cache_miss(ic, &realm, obj, &mut engine);
                    let class = ic.cached_class().map_or(0, |c| c.as_word());
                    let field = realm.layout().field_index(ic.cached_offset());
                    state.write(site.cells.class_addr, class);
                    state.write(site.cells.offset_addr, field);
                    v
                } else {
                    state.reg(Reg::RAX)
                };
                result.checksum = result.checksum.wrapping_add(value);
            }
        }
    }

    result.stats = engine.stats();
    result.site_levels = ics.iter().map(|ic| effective_level(ic.memo(), level)).collect();
    let code = engine.code();
    result.final_code = CodeBuffer::new(code.base_addr(), code.code().to_vec());
    Ok(result)
}
