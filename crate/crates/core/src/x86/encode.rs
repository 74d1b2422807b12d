use super::{CodecError, Cond, Reg};

fn rex(w: bool, r: Reg, index: Option<Reg>, b: Reg) -> u8 {
    0x40 | (w as u8) << 3
        | (r.is_extended() as u8) << 2
        | (index.is_some_and(Reg::is_extended) as u8) << 1
        | b.is_extended() as u8
}

fn modrm(md: u8, reg: u8, rm: u8) -> u8 {
    md << 6 | (reg & 7) << 3 | (rm & 7)
}

/// `mov $imm, %dest32`, the `c7 /0` form. Writing the 32-bit register
/// zero-extends into the full 64-bit register, so callers only pass
/// non-negative values when a 64-bit result is expected. The immediate is
/// always the trailing four bytes.
pub fn encode_mov_reg_imm32(dest: Reg, imm: i32) -> Vec<u8> {
    let mut out = Vec::with_capacity(7);
    if dest.is_extended() {
        out.push(0x41);
    }
    out.push(0xc7);
    out.push(modrm(3, 0, dest.low3()));
    out.extend_from_slice(&imm.to_le_bytes());
    out
}

/// `mov disp32(%base), %dest`. Always the disp32 ModRM form so the
/// displacement sits in the trailing four bytes.
pub fn encode_mov_reg_base_disp(dest: Reg, base: Reg, disp: i32) -> Vec<u8> {
    let mut out = vec![rex(true, dest, None, base), 0x8b, modrm(2, dest.low3(), base.low3())];
    if base.low3() == 4 {
        // rsp/r12 as a base needs a SIB byte with no index
        out.push(0x24);
    }
    out.extend_from_slice(&disp.to_le_bytes());
    out
}

/// `mov disp32(%rip), %dest`
pub fn encode_mov_reg_rip(dest: Reg, disp: i32) -> Vec<u8> {
    let mut out = vec![rex(true, dest, None, Reg::RAX), 0x8b, modrm(0, dest.low3(), 5)];
    out.extend_from_slice(&disp.to_le_bytes());
    out
}

fn sib_operand(out: &mut Vec<u8>, reg: Reg, base: Reg, index: Reg, scale: u8, disp: i32) {
    let ss = match scale {
        1 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        _ => panic!("invalid scale {scale}"),
    };
    assert!(index != Reg::RSP, "rsp cannot be an index register");
    let md = if disp == 0 && base.low3() != 5 {
        0
    } else if i8::try_from(disp).is_ok() {
        1
    } else {
        2
    };
    out.push(modrm(md, reg.low3(), 4));
    out.push(ss << 6 | index.low3() << 3 | base.low3());
    match md {
        1 => out.push(disp as i8 as u8),
        2 => out.extend_from_slice(&disp.to_le_bytes()),
        _ => {}
    }
}

/// `mov disp(%base,%index,scale), %dest` with the shortest displacement.
pub fn encode_mov_reg_indexed(dest: Reg, base: Reg, index: Reg, scale: u8, disp: i32) -> Vec<u8> {
    let mut out = vec![rex(true, dest, Some(index), base), 0x8b];
    sib_operand(&mut out, dest, base, index, scale, disp);
    out
}

fn base_disp_operand(out: &mut Vec<u8>, reg: Reg, base: Reg, disp: i32) {
    let md = if disp == 0 && base.low3() != 5 {
        0
    } else if i8::try_from(disp).is_ok() {
        1
    } else {
        2
    };
    out.push(modrm(md, reg.low3(), base.low3()));
    if base.low3() == 4 {
        out.push(0x24);
    }
    match md {
        1 => out.push(disp as i8 as u8),
        2 => out.extend_from_slice(&disp.to_le_bytes()),
        _ => {}
    }
}

/// `mov %src, disp(%base)` with the shortest displacement.
pub fn encode_mov_reg_to_mem(src: Reg, base: Reg, disp: i32) -> Vec<u8> {
    let mut out = vec![rex(true, src, None, base), 0x89];
    base_disp_operand(&mut out, src, base, disp);
    out
}

/// `lea disp(%base), %dest`, or `lea disp(%rip), %dest` when `base` is `None`.
pub fn encode_lea(dest: Reg, base: Option<Reg>, disp: i32) -> Vec<u8> {
    match base {
        Some(base) => {
            let mut out = vec![rex(true, dest, None, base), 0x8d];
            base_disp_operand(&mut out, dest, base, disp);
            out
        }
        None => {
            let mut out = vec![rex(true, dest, None, Reg::RAX), 0x8d, modrm(0, dest.low3(), 5)];
            out.extend_from_slice(&disp.to_le_bytes());
            out
        }
    }
}

/// `mov %src, %dest` (the `89 /r` form).
pub fn encode_mov_reg_reg(dest: Reg, src: Reg) -> Vec<u8> {
    vec![rex(true, src, None, dest), 0x89, modrm(3, src.low3(), dest.low3())]
}

/// `cmp %rhs, %lhs`, setting flags from `lhs - rhs`.
pub fn encode_cmp_reg_reg(lhs: Reg, rhs: Reg) -> Vec<u8> {
    vec![rex(true, rhs, None, lhs), 0x39, modrm(3, rhs.low3(), lhs.low3())]
}

pub fn encode_jcc_rel32(cond: Cond, rel: i32) -> Vec<u8> {
    let mut out = vec![0x0f, 0x80 | (cond.0 & 0xf)];
    out.extend_from_slice(&rel.to_le_bytes());
    out
}

pub fn encode_push(reg: Reg) -> Vec<u8> {
    let mut out = Vec::with_capacity(2);
    if reg.is_extended() {
        out.push(0x41);
    }
    out.push(0x50 + reg.low3());
    out
}

pub fn encode_pop(reg: Reg) -> Vec<u8> {
    let mut out = Vec::with_capacity(2);
    if reg.is_extended() {
        out.push(0x41);
    }
    out.push(0x58 + reg.low3());
    out
}

pub fn encode_ret() -> Vec<u8> {
    vec![0xc3]
}

/// One multi-byte NOP of exactly `len` bytes.
///
/// Lengths 1 to 9 are the recommended forms from the Intel manual; longer
/// ones prepend redundant `66` prefixes to the 8-byte form.
pub fn encode_nop(len: usize) -> Result<Vec<u8>, CodecError> {
    const FORMS: [&[u8]; 9] = [
        &[0x90],
        &[0x66, 0x90],
        &[0x0f, 0x1f, 0x00],
        &[0x0f, 0x1f, 0x40, 0x00],
        &[0x0f, 0x1f, 0x44, 0x00, 0x00],
        &[0x66, 0x0f, 0x1f, 0x44, 0x00, 0x00],
        &[0x0f, 0x1f, 0x80, 0x00, 0x00, 0x00, 0x00],
        &[0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
        &[0x66, 0x0f, 0x1f, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00],
    ];
    match len {
        1..=9 => Ok(FORMS[len - 1].to_vec()),
        10..=15 => {
            let mut out = vec![0x66; len - 8];
            out.extend_from_slice(FORMS[7]);
            Ok(out)
        }
        _ => Err(CodecError::BadNopLength(len)),
    }
}

/// Fills `len` bytes with as few NOPs as possible.
pub(crate) fn nop_fill(len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut left = len;
    while left > 0 {
        let chunk = left.min(15);
        out.extend(encode_nop(chunk).expect("chunk is within 1..=15"));
        left -= chunk;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::x86::{decode_one, CodeBuffer, InsnKind};

    fn decode(bytes: Vec<u8>) -> crate::x86::DecodedInsn {
        let len = bytes.len();
        let insn = decode_one(&CodeBuffer::new(0x4000, bytes), 0x4000).unwrap();
        assert_eq!(insn.length as usize, len, "{insn}");
        insn
    }

    #[test]
    fn fused_load_matches_listing() {
        assert_eq!(
            encode_mov_reg_base_disp(Reg::RAX, Reg::RDI, 0x18),
            [0x48, 0x8b, 0x87, 0x18, 0x00, 0x00, 0x00]
        );
        assert_eq!(
            encode_mov_reg_base_disp(Reg::RAX, Reg::RDI, 0x20)[3..],
            [0x20, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn imm32_canonical_form() {
        assert_eq!(
            encode_mov_reg_imm32(Reg::RAX, 3),
            [0xc7, 0xc0, 0x03, 0x00, 0x00, 0x00]
        );
        assert_eq!(
            decode(encode_mov_reg_imm32(Reg::RAX, 0)).kind,
            InsnKind::MovRegImm32 {
                dest: Reg::RAX,
                imm: 0,
                sign_extend: false
            }
        );
        assert_eq!(encode_mov_reg_imm32(Reg::R9, 1)[..3], [0x41, 0xc7, 0xc1]);
    }

    #[test]
    fn every_nop_length_decodes() {
        for len in 1..=15 {
            let bytes = encode_nop(len).unwrap();
            assert_eq!(bytes.len(), len);
            assert_eq!(decode(bytes).kind, InsnKind::Nop);
        }
        assert_eq!(encode_nop(4).unwrap(), [0x0f, 0x1f, 0x40, 0x00]);
        assert_eq!(encode_nop(1).unwrap(), [0x90]);
        assert_eq!(encode_nop(0), Err(CodecError::BadNopLength(0)));
        assert_eq!(encode_nop(16), Err(CodecError::BadNopLength(16)));
    }

    #[test]
    fn rsp_and_r12_bases_take_a_sib() {
        let b = encode_mov_reg_base_disp(Reg::RCX, Reg::RSP, 8);
        assert_eq!(b.len(), 8);
        assert_eq!(
            decode(b).kind,
            InsnKind::MovRegFromBaseDisp {
                dest: Reg::RCX,
                base: Reg::RSP,
                disp: 8
            }
        );
        let b = encode_mov_reg_base_disp(Reg::R15, Reg::R12, -8);
        assert_eq!(
            decode(b).kind,
            InsnKind::MovRegFromBaseDisp {
                dest: Reg::R15,
                base: Reg::R12,
                disp: -8
            }
        );
    }

    #[test]
    fn nop_fill_lengths() {
        for len in 0..40 {
            assert_eq!(nop_fill(len).len(), len);
        }
    }
}
