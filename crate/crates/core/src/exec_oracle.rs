//! A small interpreter for the decoded instruction subset.
//!
//! It runs a code span over a synthetic machine state and counts what the
//! hardware counters would count: instructions, data reads and writes. Two
//! spans are equivalent when every generated state ends the same way in both.
//!
//! Memory is word-granular: each address holds one 64-bit word and accesses
//! never overlap partially, which is all the hit-path grammar needs. Reading
//! a word that was never written is an error, so a wild patch shows up as a
//! failure rather than as a silently different value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::x86::{decode_one, AluOp, Base, CodeMemory, CodecError, Cond, InsnKind, MemOperand, Reg};

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MachineState {
    pub regs: [u64; 16],
    pub mem: BTreeMap<u64, u64>,
    pub rip: u64,
    /// Zero flag, the only flag the subset consumes.
    pub zf: bool,
}

impl MachineState {
    pub fn reg(&self, r: Reg) -> u64 {
        self.regs[r.num() as usize]
    }

    pub fn set_reg(&mut self, r: Reg, value: u64) {
        self.regs[r.num() as usize] = value;
    }

    pub fn write(&mut self, addr: u64, value: u64) {
        self.mem.insert(addr, value);
    }

    pub fn read(&self, addr: u64) -> Option<u64> {
        self.mem.get(&addr).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Halt {
    /// `rip` moved outside the buffer: the sequence fell off its end, jumped
    /// away or returned.
    LeftBuffer,
    StepLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecTrace {
    pub insns_executed: u64,
    pub data_reads: u64,
    pub data_writes: u64,
    pub nops_executed: u64,
    pub halt: Halt,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error(transparent)]
    Decode(#[from] CodecError),
    #[error("unknown instruction at {addr:#x}")]
    UnknownInstruction { addr: u64 },
    #[error("read of unwritten memory at {addr:#x} (instruction at {rip:#x})")]
    UnwrittenMemory { addr: u64, rip: u64 },
    #[error("condition {cond} at {addr:#x} depends on flags the model does not track")]
    UnsupportedCondition { addr: u64, cond: &'static str },
    #[error("indirect branch at {addr:#x}")]
    IndirectBranch { addr: u64 },
}

fn effective_addr(state: &MachineState, mem: &MemOperand, next_rip: u64) -> u64 {
    let base = match mem.base {
        Base::Reg(r) => state.reg(r),
        Base::Rip => next_rip,
        Base::None => 0,
    };
    let index = mem
        .index
        .map_or(0, |(r, scale)| state.reg(r).wrapping_mul(scale as u64));
    base.wrapping_add(index).wrapping_add(mem.disp as i64 as u64)
}

fn alu(op: AluOp, a: u64, b: u64) -> u64 {
    match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Or => a | b,
        AluOp::And => a & b,
        AluOp::Sub | AluOp::Cmp => a.wrapping_sub(b),
        AluOp::Xor => a ^ b,
    }
}

struct Machine {
    state: MachineState,
    trace: ExecTrace,
    rip_now: u64,
}

impl Machine {
    fn load(&mut self, addr: u64) -> Result<u64, ExecError> {
        self.trace.data_reads += 1;
        self.state.read(addr).ok_or(ExecError::UnwrittenMemory {
            addr,
            rip: self.rip_now,
        })
    }

    fn store(&mut self, addr: u64, value: u64) {
        self.trace.data_writes += 1;
        self.state.write(addr, value);
    }

    fn push(&mut self, value: u64) {
        let rsp = self.state.reg(Reg::RSP).wrapping_sub(8);
        self.state.set_reg(Reg::RSP, rsp);
        self.store(rsp, value);
    }

    fn pop(&mut self) -> Result<u64, ExecError> {
        let rsp = self.state.reg(Reg::RSP);
        let value = self.load(rsp)?;
        self.state.set_reg(Reg::RSP, rsp.wrapping_add(8));
        Ok(value)
    }
}

/// Executes from `start` until `rip` leaves the buffer or `max_insns`
/// instructions have run.
pub fn run_sequence<M: CodeMemory + ?Sized>(
    buf: &M,
    start: u64,
    max_insns: u64,
    state: MachineState,
) -> Result<(MachineState, ExecTrace), ExecError> {
    let mut m = Machine {
        state,
        trace: ExecTrace {
            insns_executed: 0,
            data_reads: 0,
            data_writes: 0,
            nops_executed: 0,
            halt: Halt::LeftBuffer,
        },
        rip_now: start,
    };
    m.state.rip = start;
    loop {
        let rip = m.state.rip;
        if !buf.contains(rip) {
            m.trace.halt = Halt::LeftBuffer;
            break;
        }
        if m.trace.insns_executed >= max_insns {
            m.trace.halt = Halt::StepLimit;
            break;
        }
        let insn = decode_one(buf, rip)?;
        let next = insn.end();
        m.rip_now = rip;
        m.trace.insns_executed += 1;
        let mut target = next;
        match insn.kind {
            InsnKind::Nop => m.trace.nops_executed += 1,
            InsnKind::MovRegFromRipMem { dest, target: addr, .. } => {
                let v = m.load(addr)?;
                m.state.set_reg(dest, v);
            }
            InsnKind::MovRegFromBaseIndexScaleDisp {
                dest,
                base,
                index,
                scale,
                disp,
            } => {
                let mem = MemOperand {
                    base: Base::Reg(base),
                    index: Some((index, scale)),
                    disp,
                };
                let addr = effective_addr(&m.state, &mem, next);
                let v = m.load(addr)?;
                m.state.set_reg(dest, v);
            }
            InsnKind::MovRegFromBaseDisp { dest, base, disp } => {
                let addr = m.state.reg(base).wrapping_add(disp as i64 as u64);
                let v = m.load(addr)?;
                m.state.set_reg(dest, v);
            }
            InsnKind::MovRegImm32 {
                dest,
                imm,
                sign_extend,
            } => {
                let v = if sign_extend {
                    imm as i64 as u64
                } else {
                    imm as u32 as u64
                };
                m.state.set_reg(dest, v);
            }
            InsnKind::MovRegToMem { src, mem } => {
                let addr = effective_addr(&m.state, &mem, next);
                let v = m.state.reg(src);
                m.store(addr, v);
            }
            InsnKind::MovRegReg { dest, src } => {
                let v = m.state.reg(src);
                m.state.set_reg(dest, v);
            }
            InsnKind::Lea { dest, mem } => {
                let addr = effective_addr(&m.state, &mem, next);
                m.state.set_reg(dest, addr);
            }
            InsnKind::AluRegReg { op, dest, src } => {
                let v = alu(op, m.state.reg(dest), m.state.reg(src));
                m.state.zf = v == 0;
                if op != AluOp::Cmp {
                    m.state.set_reg(dest, v);
                }
            }
            InsnKind::AluRegFromMem { op, dest, mem } => {
                let addr = effective_addr(&m.state, &mem, next);
                let src = m.load(addr)?;
                let v = alu(op, m.state.reg(dest), src);
                m.state.zf = v == 0;
                if op != AluOp::Cmp {
                    m.state.set_reg(dest, v);
                }
            }
            InsnKind::CmpRegReg { lhs, rhs } => {
                m.state.zf = m.state.reg(lhs) == m.state.reg(rhs);
            }
            InsnKind::CondJump { cond, target: t } => {
                let taken = match cond {
                    Cond::E => m.state.zf,
                    Cond::NE => !m.state.zf,
                    other => {
                        return Err(ExecError::UnsupportedCondition {
                            addr: rip,
                            cond: other.mnemonic(),
                        })
                    }
                };
                if taken {
                    target = t;
                }
            }
            InsnKind::Jmp { target: t } => {
                target = t.ok_or(ExecError::IndirectBranch { addr: rip })?;
            }
            InsnKind::Call { target: t } => {
                let t = t.ok_or(ExecError::IndirectBranch { addr: rip })?;
                m.push(next);
                target = t;
            }
            InsnKind::Ret => target = m.pop()?,
            InsnKind::Push { reg } => {
                let v = m.state.reg(reg);
                m.push(v);
            }
            InsnKind::Pop { reg } => {
                let v = m.pop()?;
                m.state.set_reg(reg, v);
            }
            InsnKind::Unknown => return Err(ExecError::UnknownInstruction { addr: rip }),
        }
        m.state.rip = target;
    }
    Ok((m.state, m.trace))
}

/// Outcome of comparing two spans over a family of states.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub states: u64,
    /// `after.data_reads - before.data_reads` → number of states.
    pub read_delta: BTreeMap<i64, u64>,
    /// Same for executed instructions.
    pub insn_delta: BTreeMap<i64, u64>,
}

impl EquivalenceReport {
    pub fn merge(&mut self, other: &EquivalenceReport) {
        self.states += other.states;
        for (k, v) in &other.read_delta {
            *self.read_delta.entry(*k).or_default() += v;
        }
        for (k, v) in &other.insn_delta {
            *self.insn_delta.entry(*k).or_default() += v;
        }
    }

    /// The read delta, if it was the same for every state.
    pub fn constant_read_delta(&self) -> Option<i64> {
        match self.read_delta.keys().collect::<Vec<_>>().as_slice() {
            [only] => Some(**only),
            _ => None,
        }
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} states equivalent; data-read delta", self.states)?;
        for (d, n) in &self.read_delta {
            write!(f, " {d:+}×{n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EquivalenceError {
    #[error("original span failed: {0}")]
    Before(ExecError),
    #[error("patched span failed: {0}")]
    After(ExecError),
    #[error("spans diverge on {what}")]
    Divergence {
        what: String,
        witness: Box<MachineState>,
        before: Box<MachineState>,
        after: Box<MachineState>,
    },
}

fn first_difference(a: &MachineState, b: &MachineState, scratch: &[Reg]) -> Option<String> {
    for r in Reg::ALL {
        if !scratch.contains(&r) && a.reg(r) != b.reg(r) {
            return Some(format!("{r}: {:#x} vs {:#x}", a.reg(r), b.reg(r)));
        }
    }
    if a.zf != b.zf {
        return Some("zero flag".to_string());
    }
    if a.mem != b.mem {
        let keys: BTreeSet<u64> = a.mem.keys().chain(b.mem.keys()).copied().collect();
        let addr = keys.into_iter().find(|k| a.mem.get(k) != b.mem.get(k))?;
        return Some(format!("memory at {addr:#x}"));
    }
    None
}

/// Runs both spans from `start` for each state and requires identical final
/// states, apart from registers in `scratch` and the final `rip` (which
/// lies past the end of either buffer).
pub fn assert_equivalent<M1, M2, I>(
    before: &M1,
    after: &M2,
    start: u64,
    max_insns: u64,
    states: I,
    scratch: &[Reg],
) -> Result<EquivalenceReport, EquivalenceError>
where
    M1: CodeMemory + ?Sized,
    M2: CodeMemory + ?Sized,
    I: IntoIterator<Item = MachineState>,
{
    let mut report = EquivalenceReport::default();
    for state in states {
        let (sb, tb) =
            run_sequence(before, start, max_insns, state.clone()).map_err(EquivalenceError::Before)?;
        let (sa, ta) =
            run_sequence(after, start, max_insns, state.clone()).map_err(EquivalenceError::After)?;
        if let Some(what) = first_difference(&sb, &sa, scratch) {
            return Err(EquivalenceError::Divergence {
                what,
                witness: Box::new(state),
                before: Box::new(sb),
                after: Box::new(sa),
            });
        }
        report.states += 1;
        let rd = ta.data_reads as i64 - tb.data_reads as i64;
        let id = ta.insns_executed as i64 - tb.insns_executed as i64;
        *report.read_delta.entry(rd).or_default() += 1;
        *report.insn_delta.entry(id).or_default() += 1;
    }
    Ok(report)
}

/// Random states on which an IC hit path runs to completion: an object
/// record behind `obj_reg` with its first `record_words` words and word
/// `field_index` present, the IC offset word holding `field_index`, random
/// values everywhere else.
#[derive(Clone, Debug)]
pub struct HitPathStates {
    pub obj_reg: Reg,
    pub ic_offset_addr: u64,
    pub field_index: u64,
    pub record_words: u64,
    pub word_size: u8,
    /// Fixed memory cells every state gets, e.g. the IC's class word.
    pub fixed: Vec<(u64, u64)>,
}

impl HitPathStates {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> MachineState {
        let mut s = MachineState::default();
        for r in Reg::ALL {
            s.set_reg(r, rng.random());
        }
        let w = self.word_size as u64;
        // Keep the record clear of the sign bit so displacements never wrap.
        let obj = rng.random_range(0x1_0000..0x4000_0000_0000u64) & !(w - 1);
        s.set_reg(self.obj_reg, obj);
        s.set_reg(Reg::RSP, 0x7fff_0000_0000 - 8 * rng.random_range(0..1024u64));
        // Sparse: the leading words and the field itself, so large field
        // indices stay cheap.
        for i in (0..self.record_words).chain([self.field_index]) {
            s.write(obj + i * w, rng.random());
        }
        for &(addr, value) in &self.fixed {
            s.write(addr, value);
        }
        s.write(self.ic_offset_addr, self.field_index);
        s
    }

    pub fn iter<'a, R: Rng + ?Sized>(&'a self, rng: &'a mut R, count: usize) -> impl Iterator<Item = MachineState> + 'a {
        (0..count).map(move |_| self.generate(rng))
    }
}
