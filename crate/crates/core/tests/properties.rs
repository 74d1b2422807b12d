use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

use ic_dbm::bench::stats::{welch_t_test, SampleSet, ALPHA};
use ic_dbm::dbm::{analyze_site, apply_patch, plan_site, repatch_offset, OptLevel, PageGuard, RecordingBackend};
use ic_dbm::exec_oracle::{assert_equivalent, HitPathStates};
use ic_dbm::ic_runtime::{ic_read, InlineCache, NoCode, SiteAddrs, UNDEFINED};
use ic_dbm::object_model::{ObjectId, Realm};
use ic_dbm::x86::{
    decode_one, encode_mov_reg_base_disp, encode_mov_reg_imm32, encode_mov_reg_indexed, encode_mov_reg_rip,
    encode_nop, parse_hex, CodeBuffer, InsnKind, Reg,
};

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..16).prop_map(|n| Reg::new(n).unwrap())
}

fn decode(bytes: Vec<u8>) -> ic_dbm::x86::DecodedInsn {
    let len = bytes.len();
    let buf = CodeBuffer::new(0x40_0000, bytes);
    let insn = decode_one(&buf, 0x40_0000).unwrap();
    assert_eq!(insn.length as usize, len, "decoded length");
    insn
}

proptest! {
    #[test]
    fn rip_load_round_trips(dest in reg(), disp in any::<i32>()) {
        let insn = decode(encode_mov_reg_rip(dest, disp));
        let target = (0x40_0007i64 + disp as i64) as u64;
        prop_assert_eq!(insn.kind, InsnKind::MovRegFromRipMem { dest, disp, target });
    }

    #[test]
    fn indexed_load_round_trips(
        dest in reg(),
        base in reg(),
        index in reg().prop_filter("rsp cannot index", |r| *r != Reg::RSP),
        scale in prop::sample::select(vec![1u8, 2, 4, 8]),
        disp in any::<i32>(),
    ) {
        let insn = decode(encode_mov_reg_indexed(dest, base, index, scale, disp));
        prop_assert_eq!(insn.kind, InsnKind::MovRegFromBaseIndexScaleDisp { dest, base, index, scale, disp });
    }

    #[test]
    fn base_load_round_trips(dest in reg(), base in reg(), disp in any::<i32>()) {
        let bytes = encode_mov_reg_base_disp(dest, base, disp);
        // the displacement is always the trailing four bytes
        prop_assert_eq!(&bytes[bytes.len() - 4..], &disp.to_le_bytes()[..]);
        let insn = decode(bytes);
        prop_assert_eq!(insn.kind, InsnKind::MovRegFromBaseDisp { dest, base, disp });
    }

    #[test]
    fn immediate_move_round_trips(dest in reg(), imm in any::<i32>()) {
        let insn = decode(encode_mov_reg_imm32(dest, imm));
        prop_assert_eq!(insn.kind, InsnKind::MovRegImm32 { dest, imm, sign_extend: false });
    }

    #[test]
    fn nops_of_every_length(len in 1usize..=15) {
        let insn = decode(encode_nop(len).unwrap());
        prop_assert_eq!(insn.kind, InsnKind::Nop);
    }

    #[test]
    fn page_guard_calls_once_per_page(
        spans in prop::collection::vec((0u64..0x10_0000, 1usize..9000), 1..40),
        page_shift in 12u32..14,
    ) {
        let page = 1usize << page_shift;
        let mut guard = PageGuard::new(page, RecordingBackend::default());
        let mut expected = BTreeSet::new();
        for &(addr, len) in &spans {
            guard.ensure_writable(addr, len).unwrap();
            let mask = !(page as u64 - 1);
            let mut p = addr & mask;
            while p < addr + len as u64 {
                expected.insert(p);
                p += page as u64;
            }
        }
        let calls = &guard.backend().calls;
        prop_assert_eq!(calls.len(), expected.len());
        prop_assert_eq!(calls.iter().copied().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn welch_is_antisymmetric_and_scale_free(
        a in prop::collection::vec(-1e3f64..1e3, 2..30),
        b in prop::collection::vec(-1e3f64..1e3, 2..30),
        k in 1e-3f64..1e3,
    ) {
        let set = |v: &[f64]| SampleSet::new("s", v.to_vec()).unwrap();
        let (Ok(ab), Ok(ba)) = (welch_t_test(&set(&a), &set(&b), ALPHA), welch_t_test(&set(&b), &set(&a), ALPHA)) else {
            return Err(TestCaseError::fail("welch failed"));
        };
        prop_assume!(!ab.degenerate);
        prop_assert_eq!(ab.t_statistic, -ba.t_statistic);
        prop_assert_eq!(ab.degrees_of_freedom, ba.degrees_of_freedom);
        prop_assert_eq!(ab.p_value, ba.p_value);
        let scaled = |v: &[f64]| set(&v.iter().map(|x| x * k).collect::<Vec<_>>());
        let s = welch_t_test(&scaled(&a), &scaled(&b), ALPHA).unwrap();
        let close = |x: f64, y: f64, tol: f64| (x - y).abs() <= tol * (1.0 + y.abs());
        prop_assert!(close(s.t_statistic, ab.t_statistic, 1e-9));
        prop_assert!(close(s.degrees_of_freedom, ab.degrees_of_freedom, 1e-9));
        prop_assert!(close(s.p_value, ab.p_value, 1e-9));
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
        prop_assert_eq!(ab.significant, ab.p_value < ALPHA);
    }
}

/// Objects as association lists with explicit prototypes.
#[derive(Default)]
struct Naive {
    props: Vec<Vec<(String, u64)>>,
    proto: Vec<Option<usize>>,
}

impl Naive {
    fn lookup(&self, mut obj: usize, name: &str) -> Option<u64> {
        loop {
            if let Some((_, v)) = self.props[obj].iter().find(|(n, _)| n == name) {
                return Some(*v);
            }
            obj = self.proto[obj]?;
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    New(Option<usize>),
    Set(usize, usize, u64),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            (prop::option::of(any::<usize>())).prop_map(Op::New),
            (any::<usize>(), 0usize..6, any::<u64>()).prop_map(|(o, n, v)| Op::Set(o, n, v)),
        ],
        1..120,
    )
}

const NAMES: [&str; 6] = ["a", "b", "c", "prop", "x", "y"];

fn build(ops: &[Op]) -> (Realm, Naive, Vec<ObjectId>) {
    let mut realm = Realm::default();
    let mut naive = Naive::default();
    let mut ids = Vec::new();
    for op in ops {
        match *op {
            Op::New(proto) => {
                let proto = proto.filter(|_| !ids.is_empty()).map(|p| p % ids.len());
                ids.push(realm.new_object(proto.map(|p| ids[p])).unwrap());
                naive.props.push(Vec::new());
                naive.proto.push(proto);
            }
            Op::Set(o, n, v) if !ids.is_empty() => {
                let o = o % ids.len();
                realm.set_named(ids[o], NAMES[n], v).unwrap();
                let props = &mut naive.props[o];
                match props.iter_mut().find(|(name, _)| name == NAMES[n]) {
                    Some(slot) => slot.1 = v,
                    None => props.push((NAMES[n].to_string(), v)),
                }
            }
            Op::Set(..) => {}
        }
    }
    (realm, naive, ids)
}

proptest! {
    #[test]
    fn lookup_matches_naive_chain(ops in ops()) {
        let (mut realm, naive, ids) = build(&ops);
        for (i, &id) in ids.iter().enumerate() {
            for name in NAMES {
                let n = realm.intern(name).unwrap();
                let got = realm.lookup_chain(id, n).unwrap().map(|(h, s)| realm.read_slot(h, s));
                prop_assert_eq!(got, naive.lookup(i, name));
            }
        }
    }

    #[test]
    fn same_insertion_order_shares_class(ops in ops()) {
        let (realm, naive, ids) = build(&ops);
        let mut seen: HashMap<(Option<usize>, Vec<String>), _> = HashMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let key = (naive.proto[i], naive.props[i].iter().map(|(n, _)| n.clone()).collect());
            let class = realm.class_of(id).id();
            prop_assert_eq!(*seen.entry(key).or_insert(class), class);
        }
    }
}

#[test]
fn ic_reads_match_chain_oracle() {
    use rand::Rng;
    let mut rng = StdRng::seed_from_u64(17);
    let ops: Vec<Op> = (0..400)
        .map(|_| {
            if rng.random_bool(0.3) {
                Op::New(rng.random_bool(0.5).then(|| rng.random_range(0..usize::MAX)))
            } else {
                Op::Set(rng.random_range(0..usize::MAX), rng.random_range(0..6), rng.random())
            }
        })
        .collect();
    let (mut realm, naive, ids) = build(&ops);
    let names: Vec<_> = NAMES.iter().map(|n| realm.intern(n).unwrap()).collect();
    let addrs = SiteAddrs {
        label_addr: 0,
        ic_offset_addr: 0,
        obj_reg_hint: None,
    };
    let mut ics: Vec<InlineCache> = (0..8)
        .map(|i| InlineCache::new(i, names[i as usize % names.len()], addrs))
        .collect();
    for _ in 0..10_000 {
        let k = rng.random_range(0..ics.len());
        let o = rng.random_range(0..ids.len());
        let got = ic_read(&mut ics[k], &realm, ids[o], &mut NoCode);
        let want = naive.lookup(o, NAMES[k % NAMES.len()]).unwrap_or(UNDEFINED);
        assert_eq!(got, want);
    }
    assert!(ics.iter().all(|ic| ic.analyze_calls() <= 1));
}

#[test]
fn random_repatches_decode_and_execute() {
    use rand::Rng;
    const LABEL: u64 = 0x1000;
    const IC: u64 = LABEL + 7 + 0x101c;
    let original = CodeBuffer::new(LABEL, parse_hex("48 8b 05 1c 10 00 00 48 8b 04 c7").unwrap());
    let c = analyze_site(&original, LABEL, IC, None, 8).unwrap();
    let mut rng = StdRng::seed_from_u64(100);
    for cap in [OptLevel::O1, OptLevel::O2] {
        let plan = plan_site(&c, 3, 8, cap).unwrap();
        let mut code = original.clone();
        let mut guard = PageGuard::new(4096, RecordingBackend::default());
        guard.ensure_writable(LABEL, code.len()).unwrap();
        apply_patch(&mut code, &plan, &guard).unwrap();
        for _ in 0..100 {
            let field = rng.random_range(0..1u64 << 24);
            repatch_offset(&mut code, &plan, field, &guard).unwrap();
            let insn = decode_one(&code, LABEL).unwrap();
            match insn.kind {
                InsnKind::MovRegFromBaseDisp { disp, .. } => assert_eq!(disp as u64, field * 8),
                InsnKind::MovRegImm32 { imm, .. } => assert_eq!(imm as u64, field),
                other => panic!("{other:?}"),
            }
            let states = HitPathStates {
                obj_reg: Reg::RDI,
                ic_offset_addr: IC,
                field_index: field,
                record_words: 4,
                word_size: 8,
                fixed: vec![],
            };
            let report = assert_equivalent(&original, &code, LABEL, 16, states.iter(&mut rng, 10), &[]).unwrap();
            assert_eq!(report.constant_read_delta(), Some(-1));
        }
        assert_eq!(guard.backend().calls.len(), 1);
    }
}
