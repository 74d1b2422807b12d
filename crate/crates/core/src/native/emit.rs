use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NativeError;
use crate::ic_runtime::SiteAddrs;
use crate::x86::{
    encode_cmp_reg_reg, encode_jcc_rel32, encode_lea, encode_mov_reg_base_disp, encode_mov_reg_imm32,
    encode_mov_reg_indexed, encode_mov_reg_reg, encode_mov_reg_rip, encode_ret, Cond, Reg,
};

/// Position-dependent byte emitter with a fixed capacity.
#[derive(Debug, Clone)]
pub struct Assembler {
    base: u64,
    bytes: Vec<u8>,
    capacity: usize,
}

impl Assembler {
    pub fn new(base: u64, capacity: usize) -> Assembler {
        Assembler {
            base,
            bytes: Vec::new(),
            capacity,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    /// Address of the next emitted byte.
    pub fn pos(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn emit(&mut self, bytes: &[u8]) -> Result<u64, NativeError> {
        let needed = self.bytes.len() + bytes.len();
        if needed > self.capacity {
            return Err(NativeError::RegionExhausted {
                needed,
                capacity: self.capacity,
            });
        }
        let at = self.pos();
        self.bytes.extend_from_slice(bytes);
        Ok(at)
    }

    /// Emits an instruction whose last four bytes are a displacement
    /// relative to its end, pointing at `target`.
    fn emit_rip_relative(&mut self, target: u64, encode: impl Fn(i32) -> Vec<u8>) -> Result<u64, NativeError> {
        let len = encode(0).len() as u64;
        let disp = target.wrapping_sub(self.pos() + len) as i64;
        let disp = i32::try_from(disp).map_err(|_| NativeError::OutOfReach { target })?;
        self.emit(&encode(disp))
    }

    fn patch_rel32(&mut self, field_addr: u64, target: u64) {
        let at = (field_addr - self.base) as usize;
        let rel = (target as i64 - (field_addr as i64 + 4)) as i32;
        self.bytes[at..at + 4].copy_from_slice(&rel.to_le_bytes());
    }
}

/// Shapes of emitted hit paths. All variants compute the same value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeVariant {
    /// Offset load followed directly by the indexed property load.
    Canonical,
    /// The property load writes a different register, which rules out fusion.
    SwappedDest,
    /// The offset is read through a pointer register instead of RIP-relative.
    NonRip,
    /// A register move is scheduled before the offset load.
    Scheduled,
}

impl ShapeVariant {
    pub const ALL: [ShapeVariant; 4] = [
        ShapeVariant::Canonical,
        ShapeVariant::SwappedDest,
        ShapeVariant::NonRip,
        ShapeVariant::Scheduled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeVariant::Canonical => "canonical",
            ShapeVariant::SwappedDest => "swapped-dest",
            ShapeVariant::NonRip => "non-rip",
            ShapeVariant::Scheduled => "scheduled",
        }
    }
}

impl fmt::Display for ShapeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown shape variant {s:?}"))
    }
}

/// The two data words of a site's IC structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IcCells {
    pub class_addr: u64,
    pub offset_addr: u64,
}

/// Where an emitted site lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteCode {
    pub variant: ShapeVariant,
    pub entry: u64,
    pub label_addr: u64,
    pub end: u64,
    pub cells: IcCells,
    pub obj_reg: Reg,
}

impl SiteCode {
    pub fn addrs(&self) -> SiteAddrs {
        SiteAddrs {
            label_addr: self.label_addr,
            ic_offset_addr: self.cells.offset_addr,
            obj_reg_hint: Some(self.obj_reg),
        }
    }
}

/// Emits one site as a function `(obj: *const u64) -> (value, miss)` under
/// the System V convention: the object record pointer arrives in `%rdi`, the
/// value leaves in `%rax` and the miss flag in `%rdx`.
///
/// ```text
///     mov  $0, %edx
///     mov  class(%rip), %rcx        ; cached class
///     mov  0(%rdi), %rax            ; object class
///     cmp  %rcx, %rax
///     jne  slow
/// label:
///     mov  offset(%rip), %rax       ; cached field index
///     mov  (%rdi,%rax,8), %rax      ; property
///     ret
/// slow:
///     mov  $1, %edx
///     ret
/// ```
pub fn emit_ic_site(asm: &mut Assembler, variant: ShapeVariant, cells: IcCells) -> Result<SiteCode, NativeError> {
    let entry = asm.emit(&encode_mov_reg_imm32(Reg::RDX, 0))?;
    if variant == ShapeVariant::NonRip {
        asm.emit_rip_relative(cells.offset_addr, |d| encode_lea(Reg::RSI, None, d))?;
    }
    asm.emit_rip_relative(cells.class_addr, |d| encode_mov_reg_rip(Reg::RCX, d))?;
    asm.emit(&encode_mov_reg_base_disp(Reg::RAX, Reg::RDI, 0))?;
    asm.emit(&encode_cmp_reg_reg(Reg::RAX, Reg::RCX))?;
    let jne = asm.emit(&encode_jcc_rel32(Cond::NE, 0))?;
    let label_addr = asm.pos();

    let obj_reg = match variant {
        ShapeVariant::Canonical => {
            asm.emit_rip_relative(cells.offset_addr, |d| encode_mov_reg_rip(Reg::RAX, d))?;
            asm.emit(&encode_mov_reg_indexed(Reg::RAX, Reg::RDI, Reg::RAX, 8, 0))?;
            Reg::RDI
        }
        ShapeVariant::SwappedDest => {
            asm.emit_rip_relative(cells.offset_addr, |d| encode_mov_reg_rip(Reg::RAX, d))?;
            asm.emit(&encode_mov_reg_indexed(Reg::RCX, Reg::RDI, Reg::RAX, 8, 0))?;
            asm.emit(&encode_mov_reg_reg(Reg::RAX, Reg::RCX))?;
            Reg::RDI
        }
        ShapeVariant::NonRip => {
            asm.emit(&encode_mov_reg_base_disp(Reg::RAX, Reg::RSI, 0))?;
            asm.emit(&encode_mov_reg_indexed(Reg::RAX, Reg::RDI, Reg::RAX, 8, 0))?;
            Reg::RDI
        }
        ShapeVariant::Scheduled => {
            asm.emit(&encode_mov_reg_reg(Reg::RSI, Reg::RDI))?;
            asm.emit_rip_relative(cells.offset_addr, |d| encode_mov_reg_rip(Reg::RAX, d))?;
            asm.emit(&encode_mov_reg_indexed(Reg::RAX, Reg::RSI, Reg::RAX, 8, 0))?;
            Reg::RSI
        }
    };
    asm.emit(&encode_ret())?;
    let slow = asm.emit(&encode_mov_reg_imm32(Reg::RDX, 1))?;
    asm.emit(&encode_ret())?;
    asm.patch_rel32(jne + 2, slow);
    Ok(SiteCode {
        variant,
        entry,
        label_addr,
        end: asm.pos(),
        cells,
        obj_reg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbm::{analyze_site, Classification, FailReason, PatchLevel};
    use crate::exec_oracle::{run_sequence, MachineState};
    use crate::x86::{decode_window, hex_string, CodeBuffer, CodeMemory, InsnKind};

    const BASE: u64 = 0x40_0000;
    const CELLS: IcCells = IcCells {
        class_addr: 0x40_2000,
        offset_addr: 0x40_2008,
    };

    fn site(variant: ShapeVariant) -> (CodeBuffer, SiteCode) {
        let mut asm = Assembler::new(BASE, 4096);
        let site = emit_ic_site(&mut asm, variant, CELLS).unwrap();
        (CodeBuffer::new(BASE, asm.into_bytes()), site)
    }

    fn classify(variant: ShapeVariant) -> Classification {
        let (buf, s) = site(variant);
        let a = s.addrs();
        analyze_site(&buf, a.label_addr, a.ic_offset_addr, a.obj_reg_hint, 8).unwrap()
    }

    #[test]
    fn canonical_hit_path_matches_listing_shape() {
        let (buf, s) = site(ShapeVariant::Canonical);
        let hit = buf.read_code(s.label_addr, 11).unwrap();
        assert_eq!(&hit[..3], &[0x48, 0x8b, 0x05]);
        assert_eq!(hex_string(&hit[7..]), "48 8b 04 c7");
    }

    #[test]
    fn variants_classify_as_intended() {
        assert_eq!(classify(ShapeVariant::Canonical).level(), Some(PatchLevel::O2));
        assert_eq!(classify(ShapeVariant::SwappedDest).level(), Some(PatchLevel::O1));
        assert_eq!(classify(ShapeVariant::Scheduled).level(), Some(PatchLevel::O2));
        assert_eq!(
            classify(ShapeVariant::NonRip).fail_reason(),
            Some(FailReason::NotRipRelative)
        );
    }

    #[test]
    fn every_variant_decodes_without_unknowns() {
        for v in ShapeVariant::ALL {
            let (buf, s) = site(v);
            let mut addr = s.entry;
            while addr < s.end {
                let w = decode_window(&buf, addr, 64).unwrap();
                assert!(w.iter().all(|i| i.kind != InsnKind::Unknown), "{v}");
                addr = w.last().unwrap().end();
            }
        }
    }

    #[test]
    fn emitted_code_computes_hit_and_miss() {
        for v in ShapeVariant::ALL {
            let (buf, s) = site(v);
            let mut st = MachineState::default();
            let obj = 0x9000;
            st.set_reg(Reg::RDI, obj);
            st.set_reg(Reg::RSP, 0x7000);
            st.write(0x7000, 0xdead_0000);
            st.write(obj, 5);
            st.write(obj + 8, 0);
            st.write(obj + 24, 1234);
            st.write(CELLS.class_addr, 5);
            st.write(CELLS.offset_addr, 3);
            let (out, _) = run_sequence(&buf, s.entry, 100, st.clone()).unwrap();
            assert_eq!((out.reg(Reg::RAX), out.reg(Reg::RDX)), (1234, 0), "{v}");
            assert_eq!(out.rip, 0xdead_0000);

            st.write(CELLS.class_addr, 6);
            let (out, _) = run_sequence(&buf, s.entry, 100, st).unwrap();
            assert_eq!(out.reg(Reg::RDX), 1, "{v}");
        }
    }

    #[test]
    fn exhaustion_is_reported() {
        let mut asm = Assembler::new(BASE, 16);
        assert!(matches!(
            emit_ic_site(&mut asm, ShapeVariant::Canonical, CELLS),
            Err(NativeError::RegionExhausted { .. })
        ));
    }
}
