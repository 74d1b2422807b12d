use super::{Classification, DbmError, OptLevel, PageGuard, PatchLevel, ProtectBackend};
use crate::x86::encode::nop_fill;
use crate::x86::{encode_mov_reg_base_disp, encode_mov_reg_imm32, CodeMemory, InsnKind};

/// Replacement bytes for one IC hit path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPlan {
    pub level: PatchLevel,
    pub span_addr: u64,
    pub span_len: usize,
    /// Same length as the span, NOP padded.
    pub replacement: Vec<u8>,
    /// The analyzed bytes the replacement overwrites.
    pub original: Vec<u8>,
    /// Start of the four-byte field holding the immediate or displacement.
    pub disp_field_addr: u64,
    pub word_size: u8,
    /// Constant displacement of the fused load, folded into the `O2` field.
    pub base_disp: i32,
}

impl PatchPlan {
    /// Value of the four-byte field for a given field index.
    pub fn field_value(&self, field_index: u64) -> Result<i32, DbmError> {
        field_value(self.level, field_index, self.word_size, self.base_disp)
    }

    pub fn span_end(&self) -> u64 {
        self.span_addr + self.span_len as u64
    }
}

fn field_value(level: PatchLevel, field_index: u64, word_size: u8, base_disp: i32) -> Result<i32, DbmError> {
    let value = match level {
        PatchLevel::O1 => field_index as i128,
        PatchLevel::O2 => field_index as i128 * word_size as i128 + base_disp as i128,
    };
    // O1 writes a zero-extending 32-bit move, so the value must also be
    // non-negative for the 64-bit register to see the same number.
    let fits = match level {
        PatchLevel::O1 => (0..=i32::MAX as i128).contains(&value),
        PatchLevel::O2 => i32::try_from(value).is_ok(),
    };
    if fits {
        Ok(value as i32)
    } else {
        Err(DbmError::ImmediateTooWide { value })
    }
}

fn padded(mut head: Vec<u8>, span: usize) -> Result<Vec<u8>, DbmError> {
    if head.len() > span {
        return Err(DbmError::PaddingImpossible {
            replacement: head.len(),
            span,
        });
    }
    let pad = span - head.len();
    head.extend(nop_fill(pad));
    Ok(head)
}

/// Builds the rewrite for a classified site. `field_index` is the word
/// index of the property within the object record (what the IC's offset
/// cell holds).
pub fn build_patch(c: &Classification, field_index: u64, word_size: u8) -> Result<PatchPlan, DbmError> {
    match c {
        Classification::EligibleO2 {
            offset_insn,
            fused_insn,
        } => {
            let InsnKind::MovRegFromBaseIndexScaleDisp { dest, base, disp, .. } = fused_insn.kind
            else {
                unreachable!("EligibleO2 always carries an indexed load");
            };
            let value = field_value(PatchLevel::O2, field_index, word_size, disp)?;
            let head = encode_mov_reg_base_disp(dest, base, value);
            let head_len = head.len();
            let span_len = offset_insn.length as usize + fused_insn.length as usize;
            let mut original = offset_insn.raw.clone();
            original.extend_from_slice(&fused_insn.raw);
            Ok(PatchPlan {
                level: PatchLevel::O2,
                span_addr: offset_insn.addr,
                span_len,
                replacement: padded(head, span_len)?,
                original,
                disp_field_addr: offset_insn.addr + head_len as u64 - 4,
                word_size,
                base_disp: disp,
            })
        }
        Classification::EligibleO1 { offset_insn } => {
            let dest = offset_insn.load_dest().expect("offset load writes a register");
            let value = field_value(PatchLevel::O1, field_index, word_size, 0)?;
            let head = encode_mov_reg_imm32(dest, value);
            let head_len = head.len();
            let span_len = offset_insn.length as usize;
            Ok(PatchPlan {
                level: PatchLevel::O1,
                span_addr: offset_insn.addr,
                span_len,
                replacement: padded(head, span_len)?,
                original: offset_insn.raw.clone(),
                disp_field_addr: offset_insn.addr + head_len as u64 - 4,
                word_size,
                base_disp: 0,
            })
        }
        Classification::Ineligible { reason, .. } => Err(DbmError::NotEligible(*reason)),
    }
}

/// [`build_patch`] with the level capped at `cap`, falling back from `O2`
/// to `O1` when the fused displacement does not fit but the bare field
/// index does. `cap` of `O0` still plans, so callers can report what would
/// have been applied.
pub fn plan_site(c: &Classification, field_index: u64, word_size: u8, cap: OptLevel) -> Result<PatchPlan, DbmError> {
    let c = if cap == OptLevel::O1 { c.downgrade() } else { c.clone() };
    match build_patch(&c, field_index, word_size) {
        Err(DbmError::ImmediateTooWide { .. }) if c.level() == Some(PatchLevel::O2) => {
            build_patch(&c.downgrade(), field_index, word_size)
        }
        other => other,
    }
}

/// Two-step store: everything after the first byte, then the first byte.
fn write_two_step<M: CodeMemory + ?Sized>(buf: &mut M, addr: u64, bytes: &[u8]) -> Result<(), DbmError> {
    if bytes.len() > 1 {
        buf.write_code(addr + 1, &bytes[1..])?;
    }
    if let Some(first) = bytes.first() {
        buf.write_code(addr, std::slice::from_ref(first))?;
    }
    Ok(())
}

/// Writes the replacement over the span. The span must still hold the
/// analyzed bytes and every page it touches must be writable in `guard`.
pub fn apply_patch<M: CodeMemory + ?Sized, B: ProtectBackend>(
    buf: &mut M,
    plan: &PatchPlan,
    guard: &PageGuard<B>,
) -> Result<(), DbmError> {
    guard.span_writable(plan.span_addr, plan.span_len)?;
    if buf.read_code(plan.span_addr, plan.span_len)? != plan.original.as_slice() {
        return Err(DbmError::SpanMismatch {
            addr: plan.span_addr,
        });
    }
    write_two_step(buf, plan.span_addr, &plan.replacement)
}

/// Rewrites only the four-byte field of an applied plan.
pub fn repatch_offset<M: CodeMemory + ?Sized, B: ProtectBackend>(
    buf: &mut M,
    plan: &PatchPlan,
    field_index: u64,
    guard: &PageGuard<B>,
) -> Result<(), DbmError> {
    let value = plan.field_value(field_index)?;
    guard.span_writable(plan.disp_field_addr, 4)?;
    buf.write_code(plan.disp_field_addr, &value.to_le_bytes())?;
    Ok(())
}

/// Puts the analyzed bytes back, undoing [`apply_patch`].
pub fn restore_original<M: CodeMemory + ?Sized, B: ProtectBackend>(
    buf: &mut M,
    plan: &PatchPlan,
    guard: &PageGuard<B>,
) -> Result<(), DbmError> {
    guard.span_writable(plan.span_addr, plan.span_len)?;
    write_two_step(buf, plan.span_addr, &plan.original)
}
