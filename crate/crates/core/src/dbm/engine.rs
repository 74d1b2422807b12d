use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    analyze_site, apply_patch, plan_site, repatch_offset, restore_original, Classification, DbmError, FailReason,
    OptLevel, PageGuard, PatchPlan, ProtectBackend,
};
use crate::ic_runtime::{AnalysisMemo, CodeHooks, InlineCache};
use crate::x86::CodeMemory;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub analyze_calls: u64,
    pub patches_applied: u64,
    pub repatches: u64,
    pub reverts: u64,
}

impl EngineStats {
    /// Every write of code bytes, full patches and repatches alike.
    pub fn modifications(&self) -> u64 {
        self.patches_applied + self.repatches + self.reverts
    }
}

/// One code modification: when it happened and how many there were so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteEvent {
    pub at_ns: u64,
    pub cumulative: u64,
}

/// Analyzes and patches IC sites in one code memory.
///
/// Patching is capped by `level`: at `O0` sites are analyzed and plans are
/// kept, but no byte is written; at `O1` eligible `O2` sites are downgraded.
pub struct DbmEngine<M, B> {
    code: M,
    guard: PageGuard<B>,
    level: OptLevel,
    word_size: u8,
    stats: EngineStats,
    events: Vec<RewriteEvent>,
    epoch: Instant,
}

impl<M: CodeMemory, B: ProtectBackend> DbmEngine<M, B> {
    pub fn new(code: M, guard: PageGuard<B>, level: OptLevel, word_size: u8) -> Self {
        DbmEngine {
            code,
            guard,
            level,
            word_size,
            stats: EngineStats::default(),
            events: Vec::new(),
            epoch: Instant::now(),
        }
    }

    pub fn code(&self) -> &M {
        &self.code
    }

    pub fn code_mut(&mut self) -> &mut M {
        &mut self.code
    }

    pub fn guard(&self) -> &PageGuard<B> {
        &self.guard
    }

    pub fn level(&self) -> OptLevel {
        self.level
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn events(&self) -> &[RewriteEvent] {
        &self.events
    }

    /// Restarts the clock the rewrite timeline is measured against.
    pub fn reset_epoch(&mut self) {
        self.epoch = Instant::now();
        self.events.clear();
    }

    fn record_event(&mut self) {
        let at = Instant::now().saturating_duration_since(self.epoch);
        self.events.push(RewriteEvent {
            at_ns: u64::try_from(at.as_nanos()).unwrap_or(u64::MAX),
            cumulative: self.stats.modifications(),
        });
    }

    /// Runs the analysis for one site, without touching code.
    pub fn classify(&self, ic: &InlineCache) -> Result<Classification, DbmError> {
        let addrs = ic.addrs();
        analyze_site(
            &self.code,
            addrs.label_addr,
            addrs.ic_offset_addr,
            addrs.obj_reg_hint,
            self.word_size,
        )
    }

    fn analyze_and_patch(&mut self, ic: &InlineCache, field_index: u64) -> Result<AnalysisMemo, DbmError> {
        let c = self.classify(ic)?;
        if let Some(reason) = c.fail_reason() {
            return Ok(AnalysisMemo::Failed { reason });
        }
        let plan = match plan_site(&c, field_index, self.word_size, self.level) {
            Ok(plan) => plan,
            Err(e) => match e.fail_reason() {
                Some(reason) => return Ok(AnalysisMemo::Failed { reason }),
                None => return Err(e),
            },
        };
        if self.level.allows(plan.level) {
            self.guard.ensure_writable(plan.span_addr, plan.span_len)?;
            apply_patch(&mut self.code, &plan, &self.guard)?;
            self.stats.patches_applied += 1;
            self.record_event();
        }
        Ok(AnalysisMemo::Recognized {
            level: plan.level,
            plan,
        })
    }
}

impl<M: CodeMemory, B: ProtectBackend> CodeHooks for DbmEngine<M, B> {
    fn analyze_site(&mut self, ic: &InlineCache, field_index: u64) -> AnalysisMemo {
        self.stats.analyze_calls += 1;
        // Errors other than a classification (bounds, protection) leave the
        // code as it was; the site is simply never optimized.
        self.analyze_and_patch(ic, field_index)
            .unwrap_or(AnalysisMemo::Failed {
                reason: FailReason::UnrecognizedSequence,
            })
    }

    fn repatch(&mut self, _ic: &InlineCache, plan: &PatchPlan, field_index: u64) -> Result<(), DbmError> {
        if !self.level.allows(plan.level) {
            return Ok(());
        }
        match repatch_offset(&mut self.code, plan, field_index, &self.guard) {
            Ok(()) => {
                self.stats.repatches += 1;
                self.record_event();
                Ok(())
            }
            Err(e) => {
                restore_original(&mut self.code, plan, &self.guard)?;
                self.stats.reverts += 1;
                self.record_event();
                Err(e)
            }
        }
    }
}

impl<M, B> std::fmt::Debug for DbmEngine<M, B> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DbmEngine")
            .field("level", &self.level)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}
