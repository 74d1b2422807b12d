use super::{
    AluOp, Base, CodeMemory, CodecError, Cond, DecodedInsn, InsnKind, MemOperand, Reg,
    MAX_INSN_LEN,
};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u8(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn i8(&mut self) -> Option<i32> {
        self.u8().map(|b| b as i8 as i32)
    }

    fn i32(&mut self) -> Option<i32> {
        let s = self.bytes.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(i32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

#[derive(Clone, Copy)]
struct Rex(u8);

impl Rex {
    fn w(self) -> bool {
        self.0 & 8 != 0
    }
    fn r(self) -> u8 {
        (self.0 >> 2 & 1) << 3
    }
    fn x(self) -> u8 {
        (self.0 >> 1 & 1) << 3
    }
    fn b(self) -> u8 {
        (self.0 & 1) << 3
    }
}

enum Operand {
    Reg(Reg),
    Mem(MemOperand),
}

struct ModRm {
    /// The ModRM.reg field extended by REX.R. Opcode extensions use the low three bits.
    reg: u8,
    operand: Operand,
}

fn reg(num: u8) -> Reg {
    Reg::new(num).expect("register numbers are masked to four bits")
}

fn modrm(cur: &mut Cursor<'_>, rex: Rex) -> Option<ModRm> {
    let m = cur.u8()?;
    let md = m >> 6;
    let reg_field = (m >> 3 & 7) | rex.r();
    let rm = m & 7;
    if md == 3 {
        return Some(ModRm {
            reg: reg_field,
            operand: Operand::Reg(reg(rm | rex.b())),
        });
    }
    let mut index = None;
    let base = if rm == 4 {
        let sib = cur.u8()?;
        let scale = 1u8 << (sib >> 6);
        let idx = (sib >> 3 & 7) | rex.x();
        if idx != 4 {
            index = Some((reg(idx), scale));
        }
        let base_low = sib & 7;
        if base_low == 5 && md == 0 {
            Base::None
        } else {
            Base::Reg(reg(base_low | rex.b()))
        }
    } else if rm == 5 && md == 0 {
        Base::Rip
    } else {
        Base::Reg(reg(rm | rex.b()))
    };
    let disp = match md {
        1 => cur.i8()?,
        2 => cur.i32()?,
        _ if matches!(base, Base::Rip | Base::None) => cur.i32()?,
        _ => 0,
    };
    Some(ModRm {
        reg: reg_field,
        operand: Operand::Mem(MemOperand { base, index, disp }),
    })
}

fn alu_op(opcode: u8) -> AluOp {
    match opcode >> 3 {
        0 => AluOp::Add,
        1 => AluOp::Or,
        4 => AluOp::And,
        5 => AluOp::Sub,
        6 => AluOp::Xor,
        _ => AluOp::Cmp,
    }
}

fn rel_target(addr: u64, len: usize, rel: i32) -> u64 {
    addr.wrapping_add(len as u64).wrapping_add(rel as i64 as u64)
}

/// Decodes the instruction body. `None` means the bytes are outside the
/// supported grammar or truncated; the caller turns that into `Unknown`.
fn decode_body(cur: &mut Cursor<'_>, addr: u64) -> Option<InsnKind> {
    let mut legacy_prefix = false;
    while let Some(0x66 | 0x2e) = cur.peek() {
        legacy_prefix = true;
        cur.pos += 1;
    }
    let rex = match cur.peek()? {
        b @ 0x40..=0x4f => {
            cur.pos += 1;
            Rex(b)
        }
        _ => Rex(0),
    };
    let op = cur.u8()?;

    // Operand-size and segment prefixes are only accepted on NOPs.
    if legacy_prefix && !matches!(op, 0x90 | 0x0f) {
        return None;
    }

    let kind = match op {
        0x90 if rex.b() == 0 => InsnKind::Nop,
        0x0f => match cur.u8()? {
            0x1f => {
                let m = modrm(cur, rex)?;
                if m.reg & 7 != 0 {
                    return None;
                }
                InsnKind::Nop
            }
            cc @ 0x80..=0x8f if !legacy_prefix => {
                let rel = cur.i32()?;
                InsnKind::CondJump {
                    cond: Cond(cc & 0xf),
                    target: rel_target(addr, cur.pos, rel),
                }
            }
            _ => return None,
        },
        cc @ 0x70..=0x7f => {
            let rel = cur.i8()?;
            InsnKind::CondJump {
                cond: Cond(cc & 0xf),
                target: rel_target(addr, cur.pos, rel),
            }
        }
        0xe8 => {
            let rel = cur.i32()?;
            InsnKind::Call {
                target: Some(rel_target(addr, cur.pos, rel)),
            }
        }
        0xe9 => {
            let rel = cur.i32()?;
            InsnKind::Jmp {
                target: Some(rel_target(addr, cur.pos, rel)),
            }
        }
        0xeb => {
            let rel = cur.i8()?;
            InsnKind::Jmp {
                target: Some(rel_target(addr, cur.pos, rel)),
            }
        }
        0xc3 => InsnKind::Ret,
        0x50..=0x57 => InsnKind::Push {
            reg: reg((op - 0x50) | rex.b()),
        },
        0x58..=0x5f => InsnKind::Pop {
            reg: reg((op - 0x58) | rex.b()),
        },
        0xb8..=0xbf if !rex.w() => InsnKind::MovRegImm32 {
            dest: reg((op - 0xb8) | rex.b()),
            imm: cur.i32()?,
            sign_extend: false,
        },
        0xc7 => {
            let m = modrm(cur, rex)?;
            match m.operand {
                Operand::Reg(dest) if m.reg & 7 == 0 => InsnKind::MovRegImm32 {
                    dest,
                    imm: cur.i32()?,
                    sign_extend: rex.w(),
                },
                _ => return None,
            }
        }
        0x8b if rex.w() => {
            let m = modrm(cur, rex)?;
            let dest = reg(m.reg);
            match m.operand {
                Operand::Reg(src) => InsnKind::MovRegReg { dest, src },
                Operand::Mem(mem) => match (mem.base, mem.index) {
                    // The RIP target needs the final length; patched below.
                    (Base::Rip, _) => InsnKind::MovRegFromRipMem {
                        dest,
                        disp: mem.disp,
                        target: 0,
                    },
                    (Base::Reg(base), Some((index, scale))) => {
                        InsnKind::MovRegFromBaseIndexScaleDisp {
                            dest,
                            base,
                            index,
                            scale,
                            disp: mem.disp,
                        }
                    }
                    (Base::Reg(base), None) => InsnKind::MovRegFromBaseDisp {
                        dest,
                        base,
                        disp: mem.disp,
                    },
                    (Base::None, _) => return None,
                },
            }
        }
        0x89 if rex.w() => {
            let m = modrm(cur, rex)?;
            let src = reg(m.reg);
            match m.operand {
                Operand::Reg(dest) => InsnKind::MovRegReg { dest, src },
                Operand::Mem(mem) => InsnKind::MovRegToMem { src, mem },
            }
        }
        0x8d if rex.w() => {
            let m = modrm(cur, rex)?;
            match m.operand {
                Operand::Mem(mem) => InsnKind::Lea {
                    dest: reg(m.reg),
                    mem,
                },
                Operand::Reg(_) => return None,
            }
        }
        // op r/m64, r64
        0x01 | 0x09 | 0x21 | 0x29 | 0x31 | 0x39 if rex.w() => {
            let m = modrm(cur, rex)?;
            let src = reg(m.reg);
            match (m.operand, alu_op(op)) {
                (Operand::Reg(dest), AluOp::Cmp) => InsnKind::CmpRegReg {
                    lhs: dest,
                    rhs: src,
                },
                (Operand::Reg(dest), op) => InsnKind::AluRegReg { op, dest, src },
                (Operand::Mem(_), _) => return None,
            }
        }
        // op r64, r/m64
        0x03 | 0x0b | 0x23 | 0x2b | 0x33 | 0x3b if rex.w() => {
            let m = modrm(cur, rex)?;
            let dest = reg(m.reg);
            match (m.operand, alu_op(op)) {
                (Operand::Reg(src), AluOp::Cmp) => InsnKind::CmpRegReg {
                    lhs: dest,
                    rhs: src,
                },
                (Operand::Reg(src), op) => InsnKind::AluRegReg { op, dest, src },
                (Operand::Mem(mem), op) => InsnKind::AluRegFromMem { op, dest, mem },
            }
        }
        0xff => {
            let m = modrm(cur, rex)?;
            match m.reg & 7 {
                2 => InsnKind::Call { target: None },
                4 => InsnKind::Jmp { target: None },
                _ => return None,
            }
        }
        _ => return None,
    };
    Some(kind)
}

/// Decodes one instruction at `addr`.
///
/// Bytes outside the supported grammar, or an encoding truncated by the end
/// of the buffer, yield `Unknown` with length 1 so the result never extends
/// past the buffer.
pub fn decode_one<M: CodeMemory + ?Sized>(buf: &M, addr: u64) -> Result<DecodedInsn, CodecError> {
    if !buf.contains(addr) {
        return Err(CodecError::OutOfBounds {
            addr,
            base: buf.base_addr(),
            end: buf.end_addr(),
        });
    }
    let start = (addr - buf.base_addr()) as usize;
    let code = buf.code();
    let avail = &code[start..code.len().min(start + MAX_INSN_LEN)];
    let mut cur = Cursor {
        bytes: avail,
        pos: 0,
    };
    let (kind, length) = match decode_body(&mut cur, addr) {
        Some(mut kind) => {
            let len = cur.pos;
            if let InsnKind::MovRegFromRipMem { disp, target, .. } = &mut kind {
                *target = rel_target(addr, len, *disp);
            }
            (kind, len)
        }
        None => (InsnKind::Unknown, 1),
    };
    Ok(DecodedInsn {
        addr,
        length: length as u8,
        kind,
        raw: avail[..length].to_vec(),
    })
}

/// Decodes sequentially from `addr` until `max_insns` instructions, the end
/// of the buffer, or a stop instruction. Branches and `Unknown` stop the scan
/// and are included as the last element.
pub fn decode_window<M: CodeMemory + ?Sized>(
    buf: &M,
    addr: u64,
    max_insns: usize,
) -> Result<Vec<DecodedInsn>, CodecError> {
    if addr != buf.end_addr() && !buf.contains(addr) {
        return Err(CodecError::OutOfBounds {
            addr,
            base: buf.base_addr(),
            end: buf.end_addr(),
        });
    }
    let mut out = Vec::new();
    let mut at = addr;
    while out.len() < max_insns && at < buf.end_addr() {
        let insn = decode_one(buf, at)?;
        at = insn.end();
        let stop = insn.is_branch() || insn.kind == InsnKind::Unknown;
        out.push(insn);
        if stop {
            break;
        }
    }
    Ok(out)
}
