//! A bounded x86_64 decoder and encoder.
//!
//! Only the instruction shapes that appear around inline-cache hit paths are
//! understood: 64-bit register loads and stores, immediate moves, `lea`,
//! register ALU ops, `cmp`, branches, `push`/`pop`/`ret` and the multi-byte
//! NOP family. Anything else decodes as [`InsnKind::Unknown`] and ends a scan.

mod decode;
pub(crate) mod encode;

pub use decode::{decode_one, decode_window};
pub use encode::{
    encode_cmp_reg_reg, encode_jcc_rel32, encode_lea, encode_mov_reg_base_disp,
    encode_mov_reg_imm32, encode_mov_reg_indexed, encode_mov_reg_reg, encode_mov_reg_rip,
    encode_mov_reg_to_mem, encode_nop, encode_pop, encode_push, encode_ret,
};

use std::fmt;

use thiserror::Error;

/// Maximum encoded length of one x86 instruction.
pub const MAX_INSN_LEN: usize = 15;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("address {addr:#x} outside code buffer [{base:#x}, {end:#x})")]
    OutOfBounds { addr: u64, base: u64, end: u64 },
    #[error("nop length {0} not in 1..=15")]
    BadNopLength(usize),
    #[error("code memory at {addr:#x} is not writable")]
    NotWritable { addr: u64 },
}

/// A general purpose 64-bit register, numbered as in the ModRM encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const RAX: Reg = Reg(0);
    pub const RCX: Reg = Reg(1);
    pub const RDX: Reg = Reg(2);
    pub const RBX: Reg = Reg(3);
    pub const RSP: Reg = Reg(4);
    pub const RBP: Reg = Reg(5);
    pub const RSI: Reg = Reg(6);
    pub const RDI: Reg = Reg(7);
    pub const R8: Reg = Reg(8);
    pub const R9: Reg = Reg(9);
    pub const R10: Reg = Reg(10);
    pub const R11: Reg = Reg(11);
    pub const R12: Reg = Reg(12);
    pub const R13: Reg = Reg(13);
    pub const R14: Reg = Reg(14);
    pub const R15: Reg = Reg(15);

    pub const ALL: [Reg; 16] = [
        Reg(0),
        Reg(1),
        Reg(2),
        Reg(3),
        Reg(4),
        Reg(5),
        Reg(6),
        Reg(7),
        Reg(8),
        Reg(9),
        Reg(10),
        Reg(11),
        Reg(12),
        Reg(13),
        Reg(14),
        Reg(15),
    ];

    pub fn new(num: u8) -> Option<Reg> {
        (num < 16).then_some(Reg(num))
    }

    pub fn num(self) -> u8 {
        self.0
    }

    /// Low three bits, as placed in ModRM/SIB fields.
    pub(crate) fn low3(self) -> u8 {
        self.0 & 7
    }

    /// Whether encoding this register needs a REX extension bit.
    pub(crate) fn is_extended(self) -> bool {
        self.0 >= 8
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11",
            "r12", "r13", "r14", "r15",
        ];
        NAMES[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<Reg> {
        let name = name.trim_start_matches('%');
        Reg::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.name())
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    Reg(Reg),
    /// RIP-relative; the absolute target is resolved once the length is known.
    Rip,
    /// `[index*scale + disp32]` or absolute `[disp32]`.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemOperand {
    pub base: Base,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.disp != 0 || self.base == Base::None {
            if self.disp < 0 {
                write!(f, "-{:#x}", (self.disp as i64).unsigned_abs())?;
            } else {
                write!(f, "{:#x}", self.disp)?;
            }
        }
        f.write_str("(")?;
        match self.base {
            Base::Reg(r) => write!(f, "{r}")?,
            Base::Rip => f.write_str("%rip")?,
            Base::None => {}
        }
        if let Some((index, scale)) = self.index {
            write!(f, ",{index},{scale}")?;
        }
        f.write_str(")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Or,
    And,
    Sub,
    Xor,
    Cmp,
}

impl AluOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Sub => "sub",
            AluOp::Xor => "xor",
            AluOp::Cmp => "cmp",
        }
    }
}

/// Condition code nibble of a `jcc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cond(pub u8);

impl Cond {
    pub const E: Cond = Cond(0x4);
    pub const NE: Cond = Cond(0x5);

    pub fn mnemonic(self) -> &'static str {
        const NAMES: [&str; 16] = [
            "jo", "jno", "jb", "jae", "je", "jne", "jbe", "ja", "js", "jns", "jp", "jnp", "jl",
            "jge", "jle", "jg",
        ];
        NAMES[(self.0 & 0xf) as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsnKind {
    /// `mov disp(%rip), %dest`
    MovRegFromRipMem { dest: Reg, disp: i32, target: u64 },
    /// `mov disp(%base,%index,scale), %dest`
    MovRegFromBaseIndexScaleDisp {
        dest: Reg,
        base: Reg,
        index: Reg,
        scale: u8,
        disp: i32,
    },
    /// `mov disp(%base), %dest`
    MovRegFromBaseDisp { dest: Reg, base: Reg, disp: i32 },
    /// `mov $imm, %dest`. The 32-bit form zero-extends, the REX.W form sign-extends.
    MovRegImm32 { dest: Reg, imm: i32, sign_extend: bool },
    /// `mov %src, mem`
    MovRegToMem { src: Reg, mem: MemOperand },
    /// `mov %src, %dest`
    MovRegReg { dest: Reg, src: Reg },
    /// `lea mem, %dest`
    Lea { dest: Reg, mem: MemOperand },
    /// Register-to-register ALU op other than `cmp`.
    AluRegReg { op: AluOp, dest: Reg, src: Reg },
    /// ALU op with a memory source, e.g. `add 0x10(%rip), %rax`.
    AluRegFromMem { op: AluOp, dest: Reg, mem: MemOperand },
    /// Flags from `lhs - rhs`.
    CmpRegReg { lhs: Reg, rhs: Reg },
    CondJump { cond: Cond, target: u64 },
    /// Direct calls carry a target, indirect ones do not.
    Call { target: Option<u64> },
    Jmp { target: Option<u64> },
    Ret,
    Push { reg: Reg },
    Pop { reg: Reg },
    Nop,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedInsn {
    pub addr: u64,
    pub length: u8,
    pub kind: InsnKind,
    pub raw: Vec<u8>,
}

impl DecodedInsn {
    pub fn end(&self) -> u64 {
        self.addr + self.length as u64
    }

    pub fn is_branch(&self) -> bool {
        matches!(
            self.kind,
            InsnKind::CondJump { .. } | InsnKind::Call { .. } | InsnKind::Jmp { .. } | InsnKind::Ret
        )
    }

    /// Register written by a load-shaped `mov`, if any.
    pub fn load_dest(&self) -> Option<Reg> {
        match self.kind {
            InsnKind::MovRegFromRipMem { dest, .. }
            | InsnKind::MovRegFromBaseIndexScaleDisp { dest, .. }
            | InsnKind::MovRegFromBaseDisp { dest, .. } => Some(dest),
            _ => None,
        }
    }

    /// Number of data-memory words this instruction reads.
    pub fn data_reads(&self) -> u32 {
        match self.kind {
            InsnKind::MovRegFromRipMem { .. }
            | InsnKind::MovRegFromBaseIndexScaleDisp { .. }
            | InsnKind::MovRegFromBaseDisp { .. }
            | InsnKind::AluRegFromMem { .. }
            | InsnKind::Pop { .. }
            | InsnKind::Ret => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for DecodedInsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            InsnKind::MovRegFromRipMem { dest, disp, target } => {
                write!(f, "mov {disp:#x}(%rip),{dest}  # {target:#x}")
            }
            InsnKind::MovRegFromBaseIndexScaleDisp {
                dest,
                base,
                index,
                scale,
                disp,
            } => {
                let mem = MemOperand {
                    base: Base::Reg(*base),
                    index: Some((*index, *scale)),
                    disp: *disp,
                };
                write!(f, "mov {mem},{dest}")
            }
            InsnKind::MovRegFromBaseDisp { dest, base, disp } => {
                let mem = MemOperand {
                    base: Base::Reg(*base),
                    index: None,
                    disp: *disp,
                };
                write!(f, "mov {mem},{dest}")
            }
            InsnKind::MovRegImm32 { dest, imm, .. } => write!(f, "mov ${imm:#x},{dest}"),
            InsnKind::MovRegToMem { src, mem } => write!(f, "mov {src},{mem}"),
            InsnKind::MovRegReg { dest, src } => write!(f, "mov {src},{dest}"),
            InsnKind::Lea { dest, mem } => write!(f, "lea {mem},{dest}"),
            InsnKind::AluRegReg { op, dest, src } => write!(f, "{} {src},{dest}", op.mnemonic()),
            InsnKind::AluRegFromMem { op, dest, mem } => {
                write!(f, "{} {mem},{dest}", op.mnemonic())
            }
            InsnKind::CmpRegReg { lhs, rhs } => write!(f, "cmp {rhs},{lhs}"),
            InsnKind::CondJump { cond, target } => write!(f, "{} {target:#x}", cond.mnemonic()),
            InsnKind::Call { target: Some(t) } => write!(f, "call {t:#x}"),
            InsnKind::Call { target: None } => f.write_str("call *"),
            InsnKind::Jmp { target: Some(t) } => write!(f, "jmp {t:#x}"),
            InsnKind::Jmp { target: None } => f.write_str("jmp *"),
            InsnKind::Ret => f.write_str("ret"),
            InsnKind::Push { reg } => write!(f, "push {reg}"),
            InsnKind::Pop { reg } => write!(f, "pop {reg}"),
            InsnKind::Nop => write!(f, "nop ({} bytes)", self.length),
            InsnKind::Unknown => write!(f, "(unknown {:02x})", self.raw[0]),
        }
    }
}

/// Byte-addressable code that can be decoded and patched.
pub trait CodeMemory {
    fn base_addr(&self) -> u64;

    fn code(&self) -> &[u8];

    /// Raw byte store. Callers are responsible for page permissions.
    fn write_code(&mut self, addr: u64, bytes: &[u8]) -> Result<(), CodecError>;

    fn end_addr(&self) -> u64 {
        self.base_addr() + self.code().len() as u64
    }

    fn contains(&self, addr: u64) -> bool {
        addr >= self.base_addr() && addr < self.end_addr()
    }

    fn read_code(&self, addr: u64, len: usize) -> Result<&[u8], CodecError> {
        let base = self.base_addr();
        let end = self.end_addr();
        if addr < base || addr.saturating_add(len as u64) > end {
            return Err(CodecError::OutOfBounds { addr, base, end });
        }
        let start = (addr - base) as usize;
        Ok(&self.code()[start..start + len])
    }
}

/// An in-memory code buffer at a nominal base address. Nothing here is
/// executable; it is what the analyzer, patcher and oracle operate on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeBuffer {
    base_addr: u64,
    bytes: Vec<u8>,
}

impl CodeBuffer {
    pub fn new(base_addr: u64, bytes: Vec<u8>) -> CodeBuffer {
        CodeBuffer { base_addr, bytes }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl CodeMemory for CodeBuffer {
    fn base_addr(&self) -> u64 {
        self.base_addr
    }

    fn code(&self) -> &[u8] {
        &self.bytes
    }

    fn write_code(&mut self, addr: u64, bytes: &[u8]) -> Result<(), CodecError> {
        let base = self.base_addr;
        let end = self.end_addr();
        if addr < base || addr.saturating_add(bytes.len() as u64) > end {
            return Err(CodecError::OutOfBounds { addr, base, end });
        }
        let start = (addr - base) as usize;
        self.bytes[start..start + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }
}

/// Lowercase space separated hex, as `objdump` prints byte columns.
pub fn hex_string(bytes: &[u8]) -> String {
    bytes
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses whitespace separated hex byte pairs.
pub fn parse_hex(text: &str) -> Option<Vec<u8>> {
    text.split_whitespace()
        .map(|tok| {
            if tok.len() == 2 {
                u8::from_str_radix(tok, 16).ok()
            } else {
                None
            }
        })
        .collect()
}
