//! Annotated hit-path fixtures and their classification.
//!
//! A fixture is a small text file:
//!
//! ```text
//! # comment
//! site: listing
//! base: 0x1000          # address of the first code byte
//! ic: 0x2037            # address of the IC offset word
//! field: 3              # field index the IC holds
//! word: 8               # optional, default 8
//! obj-reg: rdi          # optional
//! expect: O2            # O2, O1 or `ineligible <Reason>`
//! 48 8b 1d 00 10 00 00  # hex bytes, any grouping
//! label
//! 48 8b 05 1c 10 00 00
//! 48 8b 04 c7
//! ```
//!
//! The `label` line marks the first instruction of the hit path.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbm::{
    analyze_site, apply_patch, plan_site, DbmError, FailReason, OptLevel, PageGuard, PatchLevel, PatchPlan,
    RecordingBackend,
};
use crate::x86::{decode_window, hex_string, CodeBuffer, CodeMemory, Reg};

/// File extension of fixtures in a corpus directory.
pub const FIXTURE_EXT: &str = "site";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Analysis {
        file: String,
        #[source]
        source: DbmError,
    },
}

/// What happened, or should happen, to one site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    O1,
    O2,
    Ineligible(FailReason),
}

impl Verdict {
    pub fn level(self) -> OptLevel {
        match self {
            Verdict::O1 => OptLevel::O1,
            Verdict::O2 => OptLevel::O2,
            Verdict::Ineligible(_) => OptLevel::O0,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::O1 => f.write_str("O1"),
            Verdict::O2 => f.write_str("O2"),
            Verdict::Ineligible(r) => write!(f, "ineligible {r}"),
        }
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut words = s.split_whitespace();
        match (words.next(), words.next(), words.next()) {
            (Some("O1"), None, _) => Ok(Verdict::O1),
            (Some("O2"), None, _) => Ok(Verdict::O2),
            (Some("ineligible"), Some(reason), None) => reason.parse().map(Verdict::Ineligible),
            _ => Err(format!("expected `O1`, `O2` or `ineligible <Reason>`, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fixture {
    pub name: String,
    pub file: String,
    pub code: CodeBuffer,
    pub label_addr: u64,
    pub ic_offset_addr: u64,
    pub field_index: u64,
    pub word_size: u8,
    pub obj_reg: Option<Reg>,
    pub expect: Verdict,
}

fn parse_int(text: &str) -> Result<u64, String> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => t.replace('_', "").parse(),
    };
    parsed.map_err(|_| format!("bad number {t:?}"))
}

/// Parses one fixture. `file` is only used in messages.
pub fn parse_fixture(text: &str, file: &str) -> Result<Fixture, CorpusError> {
    let err = |line: usize, message: String| CorpusError::Parse {
        file: file.to_string(),
        line,
        message,
    };
    let mut keys: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut bytes = Vec::new();
    let mut label: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line == "label" {
            if label.replace(bytes.len()).is_some() {
                return Err(err(n, "second `label` marker".into()));
            }
            continue;
        }
        if let Some((key, value)) = line.split_once(':') {
            let key = key.trim();
            if !matches!(key, "site" | "base" | "ic" | "field" | "word" | "obj-reg" | "expect") {
                return Err(err(n, format!("unknown key {key:?}")));
            }
            if keys.insert(key, (n, value.trim())).is_some() {
                return Err(err(n, format!("duplicate key {key:?}")));
            }
            continue;
        }
        for tok in line.split_whitespace() {
            let b = (tok.len() == 2)
                .then(|| u8::from_str_radix(tok, 16).ok())
                .flatten()
                .ok_or_else(|| err(n, format!("bad hex byte {tok:?}")))?;
            bytes.push(b);
        }
    }

    let end = text.lines().count().max(1);
    let get = |key: &str| keys.get(key).copied().ok_or_else(|| err(end, format!("missing `{key}:`")));
    let num = |key: &str| -> Result<u64, CorpusError> {
        let (n, v) = get(key)?;
        parse_int(v).map_err(|m| err(n, m))
    };

    let name = get("site")?.1.to_string();
    let base = num("base")?;
    let ic_offset_addr = num("ic")?;
    let field_index = num("field")?;
    let word_size = match keys.get("word") {
        Some(&(n, v)) => match parse_int(v) {
            Ok(w @ (1 | 2 | 4 | 8)) => w as u8,
            _ => return Err(err(n, format!("word size must be 1, 2, 4 or 8, got {v:?}"))),
        },
        None => 8,
    };
    let obj_reg = match keys.get("obj-reg") {
        Some(&(n, v)) => Some(Reg::from_name(v.trim_start_matches('%')).ok_or_else(|| err(n, format!("unknown register {v:?}")))?),
        None => None,
    };
    let (n, v) = get("expect")?;
    let expect = v.parse().map_err(|m| err(n, m))?;
    let label = label.ok_or_else(|| err(end, "missing `label` marker".into()))?;

    Ok(Fixture {
        name,
        file: file.to_string(),
        label_addr: base + label as u64,
        code: CodeBuffer::new(base, bytes),
        ic_offset_addr,
        field_index,
        word_size,
        obj_reg,
        expect,
    })
}

pub fn load_fixture(path: &Path) -> Result<Fixture, CorpusError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        file: file.clone(),
        source,
    })?;
    parse_fixture(&text, &file)
}

/// Fixture files of a directory, sorted by name.
pub fn fixture_paths(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let io = |source| CorpusError::Io {
        file: dir.display().to_string(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == FIXTURE_EXT) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Analysis plus planning, as the engine does it at full level.
pub fn classify_fixture(f: &Fixture) -> Result<(Verdict, Option<PatchPlan>), DbmError> {
    let c = analyze_site(&f.code, f.label_addr, f.ic_offset_addr, f.obj_reg, f.word_size)?;
    if let Some(reason) = c.fail_reason() {
        return Ok((Verdict::Ineligible(reason), None));
    }
    match plan_site(&c, f.field_index, f.word_size, OptLevel::O2) {
        Ok(plan) => {
            let v = match plan.level {
                PatchLevel::O1 => Verdict::O1,
                PatchLevel::O2 => Verdict::O2,
            };
            Ok((v, Some(plan)))
        }
        Err(e) => match e.fail_reason() {
            Some(reason) => Ok((Verdict::Ineligible(reason), None)),
            None => Err(e),
        },
    }
}

/// Applies a plan to a copy of the fixture code with every page writable.
pub fn patched_copy(f: &Fixture, plan: &PatchPlan) -> Result<CodeBuffer, DbmError> {
    let mut code = f.code.clone();
    let mut guard = PageGuard::new(4096, RecordingBackend::default());
    guard.ensure_writable(code.base_addr(), code.len())?;
    apply_patch(&mut code, plan, &guard)?;
    Ok(code)
}

/// Site counts per effectively applied level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub o0: u64,
    pub o1: u64,
    pub o2: u64,
}

impl Histogram {
    pub fn add(&mut self, level: OptLevel) {
        match level {
            OptLevel::O0 => self.o0 += 1,
            OptLevel::O1 => self.o1 += 1,
            OptLevel::O2 => self.o2 += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.o0 + self.o1 + self.o2
    }
}

impl FromIterator<OptLevel> for Histogram {
    fn from_iter<I: IntoIterator<Item = OptLevel>>(iter: I) -> Histogram {
        let mut h = Histogram::default();
        iter.into_iter().for_each(|l| h.add(l));
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub fixture: Fixture,
    pub verdict: Verdict,
    pub plan: Option<PatchPlan>,
}

impl CorpusEntry {
    pub fn agrees(&self) -> bool {
        self.verdict == self.fixture.expect
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusReport {
    pub entries: Vec<CorpusEntry>,
}

impl CorpusReport {
    pub fn histogram(&self) -> Histogram {
        self.entries.iter().map(|e| e.verdict.level()).collect()
    }

    /// The histogram the annotations predict.
    pub fn expected_histogram(&self) -> Histogram {
        self.entries.iter().map(|e| e.fixture.expect.level()).collect()
    }

    pub fn disagreements(&self) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(|e| !e.agrees())
    }

    pub fn reasons(&self) -> BTreeMap<FailReason, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if let Verdict::Ineligible(r) = e.verdict {
                *out.entry(r).or_default() += 1;
            }
        }
        out
    }
}

pub fn classify_fixtures(fixtures: Vec<Fixture>) -> Result<CorpusReport, CorpusError> {
    let entries = fixtures
        .into_iter()
        .map(|fixture| {
            let (verdict, plan) = classify_fixture(&fixture).map_err(|source| CorpusError::Analysis {
                file: fixture.file.clone(),
                source,
            })?;
            Ok(CorpusEntry { fixture, verdict, plan })
        })
        .collect::<Result<_, CorpusError>>()?;
    Ok(CorpusReport { entries })
}

/// Loads and classifies every fixture in `dir`.
pub fn classify_corpus(dir: &Path) -> Result<CorpusReport, CorpusError> {
    let fixtures = fixture_paths(dir)?
        .iter()
        .map(|p| load_fixture(p))
        .collect::<Result<Vec<_>, _>>()?;
    classify_fixtures(fixtures)
}

fn listing(code: &CodeBuffer, from: u64, to: u64) -> String {
    let mut out = String::new();
    let mut addr = from;
    while addr < to {
        let Ok(window) = decode_window(code, addr, 16) else { break };
        let Some(last) = window.last() else { break };
        for insn in window.iter().take_while(|i| i.addr < to) {
            out.push_str(&format!("  {:#8x}:  {:<32} {}\n", insn.addr, hex_string(&insn.raw), insn));
        }
        addr = last.end();
    }
    out
}

/// Before/after listing of a fixture's hit path with patches capped at
/// `cap`. At level 0 only the analysis is shown.
pub fn render_patch(f: &Fixture, cap: OptLevel) -> Result<String, DbmError> {
    let (verdict, plan) = classify_fixture(f)?;
    let mut out = format!("{}: {verdict}\n", f.name);
    let plan = match plan {
        Some(_) if cap == OptLevel::O0 => {
            out.push_str("level 0: analysis only, no bytes written\n");
            None
        }
        Some(p) if !cap.allows(p.level) => {
            let c = analyze_site(&f.code, f.label_addr, f.ic_offset_addr, f.obj_reg, f.word_size)?;
            Some(plan_site(&c, f.field_index, f.word_size, cap)?)
        }
        other => other,
    };
    let Some(plan) = plan else {
        out.push_str(&listing(&f.code, f.label_addr, f.code.end_addr()));
        return Ok(out);
    };
    let after = patched_copy(f, &plan)?;
    out.push_str(&format!("applied {} over {} bytes at {:#x}\n", plan.level, plan.span_len, plan.span_addr));
    out.push_str("before:\n");
    out.push_str(&listing(&f.code, f.label_addr, plan.span_end()));
    out.push_str("after:\n");
    out.push_str(&listing(&after, f.label_addr, plan.span_end()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LISTING: &str = "\
# the classic shape
site: listing
base: 0x1000
ic: 0x2037
field: 3
expect: O2
48 8b 1d 00 10 00 00   # mov 0x1000(%rip),%rbx
48 8b 45 30 48 39 d8 0f 85 00 00 00 00
label
48 8b 05 1c 10 00 00
48 8b 04 c7
";

    #[test]
    fn parses_and_classifies() {
        let f = parse_fixture(LISTING, "t.site").unwrap();
        assert_eq!(f.label_addr, 0x1014);
        assert_eq!(f.code.len(), 31);
        let (v, plan) = classify_fixture(&f).unwrap();
        assert_eq!(v, Verdict::O2);
        assert_eq!(plan.unwrap().span_len, 11);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = LISTING.replace("48 8b 04 c7", "48 8b 04 c");
        match parse_fixture(&bad, "t.site") {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("{other:?}"),
        }
        let bad = LISTING.replace("field: 3", "flied: 3");
        assert!(matches!(parse_fixture(&bad, "t.site"), Err(CorpusError::Parse { line: 5, .. })));
        let bad = LISTING.replace("label\n", "");
        assert!(matches!(parse_fixture(&bad, "t.site"), Err(CorpusError::Parse { .. })));
        let bad = LISTING.replace("expect: O2", "expect: O3");
        assert!(matches!(parse_fixture(&bad, "t.site"), Err(CorpusError::Parse { line: 6, .. })));
    }

    #[test]
    fn verdicts_round_trip() {
        for v in [Verdict::O1, Verdict::O2, Verdict::Ineligible(FailReason::NotMov)] {
            assert_eq!(v.to_string().parse::<Verdict>(), Ok(v));
        }
    }

    #[test]
    fn empty_directory_gives_zero_histogram() {
        let dir = std::env::temp_dir().join(format!("icdbm-empty-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let r = classify_corpus(&dir).unwrap();
        assert_eq!(r.histogram(), Histogram::default());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn render_shows_both_sides() {
        let f = parse_fixture(LISTING, "t.site").unwrap();
        let text = render_patch(&f, OptLevel::O2).unwrap();
        assert!(text.contains("48 8b 87 18 00 00 00"));
        assert!(text.contains("48 8b 04 c7"));
        let o1 = render_patch(&f, OptLevel::O1).unwrap();
        assert!(o1.contains("applied O1"));
        let o0 = render_patch(&f, OptLevel::O0).unwrap();
        assert!(!o0.contains("after:"));
    }
}
