//! A monomorphic inline cache: hits while the shape stays the same, misses
//! and refills when it changes. Without machine code behind the site the
//! analysis hook simply reports failure.

use ic_dbm::ic_runtime::{ic_read, InlineCache, NoCode, SiteAddrs};
use ic_dbm::object_model::Realm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut realm = Realm::default();
    let mut objects = Vec::new();
    for i in 0..4 {
        let o = realm.new_object(None)?;
        if i == 3 {
            realm.set_named(o, "b", 0)?;
        }
        realm.set_named(o, "prop", 100 + i)?;
        objects.push(o);
    }
    let prop = realm.intern("prop")?;
    let addrs = SiteAddrs {
        label_addr: 0,
        ic_offset_addr: 0,
        obj_reg_hint: None,
    };
    let mut ic = InlineCache::new(0, prop, addrs);

    for round in 0..3 {
        for &o in &objects {
            let before = ic.misses();
            let v = ic_read(&mut ic, &realm, o, &mut NoCode);
            let hit = if ic.misses() == before { "hit " } else { "miss" };
            println!("round {round} {hit} -> {v} (cached slot {})", ic.cached_offset());
        }
    }
    println!("misses {}, analyses {}, memo {:?}", ic.misses(), ic.analyze_calls(), ic.memo());
    Ok(())
}
