//! Monomorphic inline caches for property reads.
//!
//! A hit compares the object's class with the cached one and reads the
//! cached slot directly. A miss does the full prototype-chain lookup and,
//! when the property is an own property, refills the cache and drives the
//! code hooks: the first such miss asks for an analysis of the site, later
//! ones only repatch the offset. The analysis outcome is memoized, including
//! failures, so each site is analyzed at most once.

use crate::dbm::{DbmError, FailReason, PatchLevel, PatchPlan};
use crate::object_model::{ClassId, ObjectId, PropertyName, Realm};
use crate::x86::Reg;

/// Value of a property that is absent along the whole chain.
pub const UNDEFINED: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum AnalysisMemo {
    #[default]
    Unanalyzed,
    Recognized {
        level: PatchLevel,
        plan: PatchPlan,
    },
    Failed {
        reason: FailReason,
    },
}

impl AnalysisMemo {
    pub fn is_failed(&self) -> bool {
        matches!(self, AnalysisMemo::Failed { .. })
    }

    pub fn level(&self) -> Option<PatchLevel> {
        match self {
            AnalysisMemo::Recognized { level, .. } => Some(*level),
            _ => None,
        }
    }
}

/// Where a site's code lives, as recorded when it was emitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteAddrs {
    /// First instruction of the hit path, right after the class check.
    pub label_addr: u64,
    /// Address of the offset word of this site's IC structure.
    pub ic_offset_addr: u64,
    /// Register known to hold the object, if the emitter knows it.
    pub obj_reg_hint: Option<Reg>,
}

#[derive(Clone, Debug)]
pub struct InlineCache {
    site_id: u32,
    name: PropertyName,
    cached_class: Option<ClassId>,
    cached_offset: usize,
    addrs: SiteAddrs,
    memo: AnalysisMemo,
    analyze_calls: u32,
    misses: u64,
}

/// What a cache miss may ask of the code. Implemented by the DBM engine;
/// [`NoCode`] stands in when there is no machine code behind the sites.
pub trait CodeHooks {
    /// Called once per site, on its first own-property miss.
    fn analyze_site(&mut self, ic: &InlineCache, field_index: u64) -> AnalysisMemo;

    /// Called on later own-property misses of a recognized site.
    fn repatch(&mut self, ic: &InlineCache, plan: &PatchPlan, field_index: u64) -> Result<(), DbmError>;
}

/// Hooks for caches without code: every analysis fails.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoCode;

impl CodeHooks for NoCode {
    fn analyze_site(&mut self, _ic: &InlineCache, _field_index: u64) -> AnalysisMemo {
        AnalysisMemo::Failed {
            reason: FailReason::UnrecognizedSequence,
        }
    }

    fn repatch(&mut self, _ic: &InlineCache, _plan: &PatchPlan, _field_index: u64) -> Result<(), DbmError> {
        Ok(())
    }
}

impl InlineCache {
    pub fn new(site_id: u32, name: PropertyName, addrs: SiteAddrs) -> InlineCache {
        InlineCache {
            site_id,
            name,
            cached_class: None,
            cached_offset: 0,
            addrs,
            memo: AnalysisMemo::Unanalyzed,
            analyze_calls: 0,
            misses: 0,
        }
    }

    pub fn site_id(&self) -> u32 {
        self.site_id
    }

    pub fn name(&self) -> PropertyName {
        self.name
    }

    pub fn cached_class(&self) -> Option<ClassId> {
        self.cached_class
    }

    /// Slot index of the cached property; meaningless while the cache is empty.
    pub fn cached_offset(&self) -> usize {
        self.cached_offset
    }

    pub fn addrs(&self) -> SiteAddrs {
        self.addrs
    }

    pub fn memo(&self) -> &AnalysisMemo {
        &self.memo
    }

    pub fn analyze_calls(&self) -> u32 {
        self.analyze_calls
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }
}

/// Reads `ic.name()` from `obj` through the cache.
pub fn ic_read<H: CodeHooks + ?Sized>(ic: &mut InlineCache, realm: &Realm, obj: ObjectId, hooks: &mut H) -> u64 {
    let object = realm.object(obj);
    if ic.cached_class == Some(object.class()) {
        return object.slots()[ic.cached_offset];
    }
    cache_miss(ic, realm, obj, hooks)
}

/// The slow path: chain lookup, cache refill, and the code hooks.
pub fn cache_miss<H: CodeHooks + ?Sized>(ic: &mut InlineCache, realm: &Realm, obj: ObjectId, hooks: &mut H) -> u64 {
    ic.misses += 1;
    let found = realm
        .lookup_chain(obj, ic.name)
        .expect("prototype chains are acyclic by construction");
    let Some((holder, slot)) = found else {
        return UNDEFINED;
    };
    let value = realm.read_slot(holder, slot);
    if holder != obj {
        // Only own properties are cached.
        return value;
    }

    ic.cached_class = Some(realm.object(obj).class());
    ic.cached_offset = slot;
    let field_index = realm.layout().field_index(slot);
    match &ic.memo {
        AnalysisMemo::Unanalyzed => {
            ic.analyze_calls += 1;
            ic.memo = hooks.analyze_site(ic, field_index);
        }
        AnalysisMemo::Recognized { plan, .. } => {
            if let Err(e) = hooks.repatch(ic, plan, field_index) {
                // The hooks restored the original code; the site goes back
                // to reading the offset from memory for good.
                ic.memo = AnalysisMemo::Failed {
                    reason: e.fail_reason().unwrap_or(FailReason::UnrecognizedSequence),
                };
            }
        }
        AnalysisMemo::Failed { .. } => {}
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbm::{PatchLevel, PatchPlan};

    /// Hooks that count calls and pretend every site is recognized.
    #[derive(Default)]
    struct Counting {
        analyzed: Vec<(u32, u64)>,
        repatched: Vec<(u32, u64)>,
        fail: bool,
    }

    fn dummy_plan() -> PatchPlan {
        PatchPlan {
            level: PatchLevel::O2,
            span_addr: 0,
            span_len: 0,
            replacement: vec![],
            original: vec![],
            disp_field_addr: 0,
            word_size: 8,
            base_disp: 0,
        }
    }

    impl CodeHooks for Counting {
        fn analyze_site(&mut self, ic: &InlineCache, field_index: u64) -> AnalysisMemo {
            self.analyzed.push((ic.site_id(), field_index));
            if self.fail {
                AnalysisMemo::Failed {
                    reason: FailReason::NotRipRelative,
                }
            } else {
                AnalysisMemo::Recognized {
                    level: PatchLevel::O2,
                    plan: dummy_plan(),
                }
            }
        }

        fn repatch(&mut self, ic: &InlineCache, _plan: &PatchPlan, field_index: u64) -> Result<(), DbmError> {
            self.repatched.push((ic.site_id(), field_index));
            Ok(())
        }
    }

    fn addrs() -> SiteAddrs {
        SiteAddrs {
            label_addr: 0,
            ic_offset_addr: 0,
            obj_reg_hint: None,
        }
    }

    fn listing8(realm: &mut Realm) -> [ObjectId; 3] {
        let mut make = |props: &[(&str, u64)]| {
            let o = realm.new_object(None).unwrap();
            for (n, v) in props {
                realm.set_named(o, n, *v).unwrap();
            }
            o
        };
        [
            make(&[("a", 13), ("prop", 12)]),
            make(&[("a", 13), ("prop", 37)]),
            make(&[("b", 98), ("c", 42), ("prop", 2)]),
        ]
    }

    #[test]
    fn listing_walkthrough() {
        let mut realm = Realm::default();
        let objs = listing8(&mut realm);
        let prop = realm.intern("prop").unwrap();
        let mut ic = InlineCache::new(399, prop, addrs());
        let mut hooks = Counting::default();

        assert_eq!(ic_read(&mut ic, &realm, objs[0], &mut hooks), 12);
        assert_eq!(hooks.analyzed, vec![(399, 3)]);
        assert_eq!(ic.cached_offset(), 1);

        // same class: a hit, no hook activity
        assert_eq!(ic_read(&mut ic, &realm, objs[1], &mut hooks), 37);
        assert_eq!(ic.misses(), 1);

        assert_eq!(ic_read(&mut ic, &realm, objs[2], &mut hooks), 2);
        assert_eq!(hooks.repatched, vec![(399, 4)]);
        assert_eq!(ic.analyze_calls(), 1);
    }

    #[test]
    fn hit_reads_cached_slot() {
        let mut realm = Realm::default();
        let objs = listing8(&mut realm);
        let prop = realm.intern("prop").unwrap();
        let mut ic = InlineCache::new(1, prop, addrs());
        ic.cached_class = Some(realm.object(objs[0]).class());
        ic.cached_offset = 1;
        assert_eq!(ic_read(&mut ic, &realm, objs[0], &mut NoCode), 12);
        assert_eq!(ic.misses(), 0);
    }

    #[test]
    fn prototype_property_is_not_cached() {
        let mut realm = Realm::default();
        let proto = realm.new_object(None).unwrap();
        realm.set_named(proto, "prop", 5).unwrap();
        let obj = realm.new_object(Some(proto)).unwrap();
        realm.set_named(obj, "x", 1).unwrap();
        let prop = realm.intern("prop").unwrap();
        let mut ic = InlineCache::new(1, prop, addrs());
        let mut hooks = Counting::default();
        assert_eq!(ic_read(&mut ic, &realm, obj, &mut hooks), 5);
        assert_eq!(ic.cached_class(), None);
        assert_eq!(ic.memo(), &AnalysisMemo::Unanalyzed);
        assert!(hooks.analyzed.is_empty());
    }

    #[test]
    fn absent_property_is_undefined() {
        let mut realm = Realm::default();
        let obj = realm.new_object(None).unwrap();
        let missing = realm.intern("missing").unwrap();
        let mut ic = InlineCache::new(1, missing, addrs());
        assert_eq!(ic_read(&mut ic, &realm, obj, &mut NoCode), UNDEFINED);
        assert_eq!(ic.cached_class(), None);
    }

    #[test]
    fn failed_sites_stay_failed() {
        let mut realm = Realm::default();
        let objs = listing8(&mut realm);
        let prop = realm.intern("prop").unwrap();
        let mut ic = InlineCache::new(7, prop, addrs());
        let mut hooks = Counting {
            fail: true,
            ..Default::default()
        };
        for _ in 0..5 {
            for &o in &objs {
                ic_read(&mut ic, &realm, o, &mut hooks);
            }
        }
        assert_eq!(hooks.analyzed.len(), 1);
        assert!(hooks.repatched.is_empty());
        assert!(ic.memo().is_failed());
    }
}
