//! Dynamic binary modification of inline-cache hit paths.
//!
//! Starting at the address recorded for an IC site, [`analyze_site`] looks
//! for the RIP-relative load of the cached offset and, right after it, the
//! indexed property load that consumes it. [`build_patch`] turns a match into
//! replacement bytes of the same length:
//!
//! * `O1` replaces the offset load with an immediate move;
//! * `O2` folds both loads into one `mov disp32(%obj), %dest`.
//!
//! Either way one data read disappears from every subsequent hit. Later cache
//! misses only rewrite the four displacement bytes ([`repatch_offset`]).

mod classify;
mod engine;
mod guard;
mod patch;

pub use classify::{analyze_site, Classification, FailReason, WINDOW_MAX};
pub use engine::{DbmEngine, EngineStats, RewriteEvent};
pub use guard::{PageGuard, ProtectBackend, RecordingBackend};
pub use patch::{apply_patch, build_patch, plan_site, repatch_offset, restore_original, PatchPlan};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::x86::CodecError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DbmError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("value {value:#x} does not fit a signed 32-bit field")]
    ImmediateTooWide { value: i128 },
    #[error("replacement of {replacement} bytes does not fit a {span}-byte span")]
    PaddingImpossible { replacement: usize, span: usize },
    #[error("site is not eligible for patching ({0})")]
    NotEligible(FailReason),
    #[error("page {page:#x} has not been made writable")]
    PermissionDenied { page: u64 },
    #[error("bytes at {addr:#x} differ from the analyzed instructions")]
    SpanMismatch { addr: u64 },
    #[error("unprotecting page {page:#x} failed: {message}")]
    Protect { page: u64, message: String },
}

impl DbmError {
    /// The analysis outcome this error amounts to, if it is one.
    pub fn fail_reason(&self) -> Option<FailReason> {
        match self {
            DbmError::ImmediateTooWide { .. } => Some(FailReason::ImmediateTooWide),
            DbmError::NotEligible(r) => Some(*r),
            _ => None,
        }
    }
}

/// Level of an applied patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatchLevel {
    O1,
    O2,
}

/// Cap on what the engine may apply. `O0` analyzes but never writes code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
}

/// Name of the environment variable selecting the level.
pub const LEVEL_ENV_VAR: &str = "IC_DBM_LEVEL";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("optimization level must be exactly one of the characters 0, 1 or 2, got {0:?}")]
pub struct BadLevel(pub String);

impl OptLevel {
    pub fn as_digit(self) -> char {
        match self {
            OptLevel::O0 => '0',
            OptLevel::O1 => '1',
            OptLevel::O2 => '2',
        }
    }

    /// Reads `IC_DBM_LEVEL`. The value is a single character so that the
    /// environment block has the same size for every level.
    pub fn from_env() -> Result<Option<OptLevel>, BadLevel> {
        match std::env::var(LEVEL_ENV_VAR) {
            Ok(v) => v.parse().map(Some),
            Err(std::env::VarError::NotPresent) => Ok(None),
            Err(std::env::VarError::NotUnicode(v)) => Err(BadLevel(format!("{v:?}"))),
        }
    }

    pub fn allows(self, level: PatchLevel) -> bool {
        match self {
            OptLevel::O0 => false,
            OptLevel::O1 => level == PatchLevel::O1,
            OptLevel::O2 => true,
        }
    }
}

impl FromStr for OptLevel {
    type Err = BadLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "0" => Ok(OptLevel::O0),
            "1" => Ok(OptLevel::O1),
            "2" => Ok(OptLevel::O2),
            _ => Err(BadLevel(s.to_string())),
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}", self.as_digit())
    }
}

impl fmt::Display for PatchLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchLevel::O1 => f.write_str("O1"),
            PatchLevel::O2 => f.write_str("O2"),
        }
    }
}

impl From<PatchLevel> for OptLevel {
    fn from(level: PatchLevel) -> OptLevel {
        match level {
            PatchLevel::O1 => OptLevel::O1,
            PatchLevel::O2 => OptLevel::O2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_parsing_is_single_character() {
        assert_eq!("2".parse::<OptLevel>(), Ok(OptLevel::O2));
        assert!("02".parse::<OptLevel>().is_err());
        assert!("".parse::<OptLevel>().is_err());
        assert!("3".parse::<OptLevel>().is_err());
    }

    #[test]
    fn caps() {
        assert!(!OptLevel::O0.allows(PatchLevel::O1));
        assert!(OptLevel::O1.allows(PatchLevel::O1));
        assert!(!OptLevel::O1.allows(PatchLevel::O2));
        assert!(OptLevel::O2.allows(PatchLevel::O2));
    }
}
