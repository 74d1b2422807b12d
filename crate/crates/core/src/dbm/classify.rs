use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DbmError, PatchLevel};
use crate::x86::{decode_one, decode_window, CodeMemory, DecodedInsn, InsnKind, Reg};

/// Instructions examined from the site label before giving up.
pub const WINDOW_MAX: usize = 8;

/// Why a site was not rewritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailReason {
    UnrecognizedSequence,
    BranchEncountered,
    NotRipRelative,
    NotMov,
    DestNotRegister,
    WrongIcStruct,
    ImmediateTooWide,
    WindowExhausted,
}

impl FailReason {
    pub const ALL: [FailReason; 8] = [
        FailReason::UnrecognizedSequence,
        FailReason::BranchEncountered,
        FailReason::NotRipRelative,
        FailReason::NotMov,
        FailReason::DestNotRegister,
        FailReason::WrongIcStruct,
        FailReason::ImmediateTooWide,
        FailReason::WindowExhausted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailReason::UnrecognizedSequence => "UnrecognizedSequence",
            FailReason::BranchEncountered => "BranchEncountered",
            FailReason::NotRipRelative => "NotRipRelative",
            FailReason::NotMov => "NotMov",
            FailReason::DestNotRegister => "DestNotRegister",
            FailReason::WrongIcStruct => "WrongIcStruct",
            FailReason::ImmediateTooWide => "ImmediateTooWide",
            FailReason::WindowExhausted => "WindowExhausted",
        }
    }
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FailReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FailReason::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown failure reason {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Classification {
    EligibleO2 {
        offset_insn: DecodedInsn,
        fused_insn: DecodedInsn,
    },
    EligibleO1 {
        offset_insn: DecodedInsn,
    },
    Ineligible {
        reason: FailReason,
        stopped_at: u64,
    },
}

impl Classification {
    pub fn level(&self) -> Option<PatchLevel> {
        match self {
            Classification::EligibleO2 { .. } => Some(PatchLevel::O2),
            Classification::EligibleO1 { .. } => Some(PatchLevel::O1),
            Classification::Ineligible { .. } => None,
        }
    }

    pub fn fail_reason(&self) -> Option<FailReason> {
        match self {
            Classification::Ineligible { reason, .. } => Some(*reason),
            _ => None,
        }
    }

    /// The same site restricted to `O1`. Every `O2` match is also an `O1` match.
    pub fn downgrade(&self) -> Classification {
        match self {
            Classification::EligibleO2 { offset_insn, .. } => Classification::EligibleO1 {
                offset_insn: offset_insn.clone(),
            },
            other => other.clone(),
        }
    }
}

/// What a memory-touching instruction that is not the offset load says about
/// the site. `stop` is set for instructions the scan may not move past.
fn near_miss(insn: &DecodedInsn) -> Option<(FailReason, bool)> {
    match insn.kind {
        InsnKind::MovRegFromRipMem { .. } => Some((FailReason::WrongIcStruct, false)),
        InsnKind::MovRegFromBaseDisp { .. } | InsnKind::MovRegFromBaseIndexScaleDisp { .. } => {
            Some((FailReason::NotRipRelative, false))
        }
        InsnKind::AluRegFromMem { .. } => Some((FailReason::NotMov, false)),
        // A store could alias the IC structure; nothing past it is trusted.
        InsnKind::MovRegToMem { .. } => Some((FailReason::DestNotRegister, true)),
        _ => None,
    }
}

fn fuses_with(offset_dest: Reg, next: &DecodedInsn, word_size: u8, obj_reg_hint: Option<Reg>) -> bool {
    match next.kind {
        InsnKind::MovRegFromBaseIndexScaleDisp {
            dest,
            base,
            index,
            scale,
            ..
        } => {
            index == offset_dest
                && scale == word_size
                && dest == offset_dest
                && base != offset_dest
                && obj_reg_hint.is_none_or(|hint| hint == base)
        }
        _ => false,
    }
}

/// Classifies the hit path starting at `label_addr`.
///
/// The scan walks at most [`WINDOW_MAX`] instructions. Register-only
/// instructions are stepped over. The first `mov disp(%rip), %reg` whose
/// target is `ic_offset_addr` is the offset load; other memory reads are
/// remembered as near misses and skipped. Stores, branches and unknown bytes
/// end the scan. When nothing matches, the first near miss is reported,
/// otherwise whatever ended the scan.
///
/// `obj_reg_hint`, when given, must equal the base register of the fused
/// load for `O2`.
pub fn analyze_site<M: CodeMemory + ?Sized>(
    buf: &M,
    label_addr: u64,
    ic_offset_addr: u64,
    obj_reg_hint: Option<Reg>,
    word_size: u8,
) -> Result<Classification, DbmError> {
    let window = decode_window(buf, label_addr, WINDOW_MAX)?;
    let mut first_miss: Option<(FailReason, u64)> = None;
    let ineligible = |first_miss: Option<(FailReason, u64)>, reason, at| {
        let (reason, stopped_at) = first_miss.unwrap_or((reason, at));
        Ok(Classification::Ineligible { reason, stopped_at })
    };

    for insn in &window {
        if insn.kind == InsnKind::Unknown {
            return ineligible(first_miss, FailReason::UnrecognizedSequence, insn.addr);
        }
        if insn.is_branch() {
            return ineligible(first_miss, FailReason::BranchEncountered, insn.addr);
        }
        if let InsnKind::MovRegFromRipMem { dest, target, .. } = insn.kind {
            if target == ic_offset_addr {
                let next = if buf.contains(insn.end()) {
                    Some(decode_one(buf, insn.end())?)
                } else {
                    None
                };
                return Ok(match next {
                    Some(next) if fuses_with(dest, &next, word_size, obj_reg_hint) => {
                        Classification::EligibleO2 {
                            offset_insn: insn.clone(),
                            fused_insn: next,
                        }
                    }
                    _ => Classification::EligibleO1 {
                        offset_insn: insn.clone(),
                    },
                });
            }
        }
        if let Some((reason, stop)) = near_miss(insn) {
            first_miss.get_or_insert((reason, insn.addr));
            if stop {
                return ineligible(first_miss, reason, insn.addr);
            }
        }
    }
    let end = window.last().map_or(label_addr, DecodedInsn::end);
    ineligible(first_miss, FailReason::WindowExhausted, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::x86::{parse_hex, CodeBuffer};

    const LABEL: u64 = 0x1000;
    const IC: u64 = LABEL + 7 + 0x101c;

    fn classify(hex: &str) -> Classification {
        let buf = CodeBuffer::new(LABEL, parse_hex(hex).unwrap());
        analyze_site(&buf, LABEL, IC, None, 8).unwrap()
    }

    fn reason(c: Classification) -> FailReason {
        c.fail_reason().expect("expected an ineligible site")
    }

    #[test]
    fn listing_sequence_is_o2() {
        let c = classify("48 8b 05 1c 10 00 00 48 8b 04 c7 48 89 45 c8");
        assert_eq!(c.level(), Some(PatchLevel::O2));
    }

    #[test]
    fn different_destination_is_o1() {
        // mov (%rdi,%rax,8),%rbx
        let c = classify("48 8b 05 1c 10 00 00 48 8b 1c c7");
        assert_eq!(c.level(), Some(PatchLevel::O1));
    }

    #[test]
    fn scale_must_match_word_size() {
        // mov (%rdi,%rax,4),%rax
        let c = classify("48 8b 05 1c 10 00 00 48 8b 04 87");
        assert_eq!(c.level(), Some(PatchLevel::O1));
    }

    #[test]
    fn base_equal_to_offset_register_is_o1() {
        // mov (%rax,%rax,8),%rax
        let c = classify("48 8b 05 1c 10 00 00 48 8b 04 c0");
        assert_eq!(c.level(), Some(PatchLevel::O1));
    }

    #[test]
    fn hint_must_match_base() {
        let buf = CodeBuffer::new(LABEL, parse_hex("48 8b 05 1c 10 00 00 48 8b 04 c7").unwrap());
        let with_rdi = analyze_site(&buf, LABEL, IC, Some(Reg::RDI), 8).unwrap();
        let with_rsi = analyze_site(&buf, LABEL, IC, Some(Reg::RSI), 8).unwrap();
        assert_eq!(with_rdi.level(), Some(PatchLevel::O2));
        assert_eq!(with_rsi.level(), Some(PatchLevel::O1));
    }

    #[test]
    fn base_relative_offset_load_is_not_rip_relative() {
        // mov 0x30(%rbp),%rax ; ret
        assert_eq!(reason(classify("48 8b 45 30 c3")), FailReason::NotRipRelative);
    }

    #[test]
    fn call_first_is_a_branch() {
        assert_eq!(
            reason(classify("e8 00 00 00 00 48 8b 05 1c 10 00 00")),
            FailReason::BranchEncountered
        );
    }

    #[test]
    fn wrong_ic_target() {
        assert_eq!(
            reason(classify("48 8b 05 00 00 00 00 c3")),
            FailReason::WrongIcStruct
        );
    }

    #[test]
    fn store_stops_the_scan() {
        // mov %rax,-0x38(%rbp) then the real load
        assert_eq!(
            reason(classify("48 89 45 c8 48 8b 05 18 10 00 00")),
            FailReason::DestNotRegister
        );
    }

    #[test]
    fn alu_memory_source_is_not_mov() {
        // add 0x101c(%rip),%rax ; ret
        assert_eq!(reason(classify("48 03 05 1c 10 00 00 c3")), FailReason::NotMov);
    }

    #[test]
    fn unknown_bytes_and_exhaustion() {
        assert_eq!(reason(classify("0f 0b")), FailReason::UnrecognizedSequence);
        assert_eq!(reason(classify(&"90 ".repeat(9))), FailReason::WindowExhausted);
        assert_eq!(reason(classify("90 90")), FailReason::WindowExhausted);
    }

    #[test]
    fn scheduled_register_instruction_is_skipped() {
        // lea 0x10(%rdi),%rcx ; offset load ; property load
        let buf = CodeBuffer::new(
            LABEL,
            parse_hex("48 8d 4f 10 48 8b 05 18 10 00 00 48 8b 04 c7").unwrap(),
        );
        let c = analyze_site(&buf, LABEL, LABEL + 4 + 7 + 0x1018, None, 8).unwrap();
        assert_eq!(c.level(), Some(PatchLevel::O2));
    }

    #[test]
    fn label_outside_buffer() {
        let buf = CodeBuffer::new(LABEL, vec![0x90]);
        assert!(analyze_site(&buf, LABEL + 10, IC, None, 8).is_err());
    }

    #[test]
    fn reason_names_parse() {
        for r in FailReason::ALL {
            assert_eq!(r.name().parse::<FailReason>(), Ok(r));
        }
    }
}
