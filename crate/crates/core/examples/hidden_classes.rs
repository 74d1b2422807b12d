//! Objects built in the same property order share one hidden class, and a
//! property's slot determines its offset in the native record.

use ic_dbm::object_model::Realm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut realm = Realm::default();

    let p = realm.new_object(None)?;
    realm.set_named(p, "a", 1)?;
    realm.set_named(p, "prop", 2)?;

    let q = realm.new_object(None)?;
    realm.set_named(q, "a", 10)?;
    realm.set_named(q, "prop", 20)?;

    let r = realm.new_object(None)?;
    realm.set_named(r, "b", 100)?;
    realm.set_named(r, "c", 200)?;
    realm.set_named(r, "prop", 300)?;

    let prop = realm.intern("prop")?;
    for (label, obj) in [("p", p), ("q", q), ("r", r)] {
        let class = realm.class_of(obj);
        let slot = class.slot_of(prop).unwrap();
        println!(
            "{label}: class {:?}, prop in slot {slot}, byte offset {:#x}, record {:x?}",
            class.id(),
            realm.layout().byte_offset(slot),
            realm.native_record(obj, 0)
        );
    }
    assert_eq!(realm.class_of(p).id(), realm.class_of(q).id());
    assert_ne!(realm.class_of(p).id(), realm.class_of(r).id());

    // lookups fall back along the prototype chain
    let child = realm.new_object(Some(r))?;
    let (holder, slot) = realm.lookup_chain(child, prop)?.unwrap();
    println!("child reads prop = {} from its prototype", realm.read_slot(holder, slot));
    println!("{} classes for {} objects", realm.class_count(), realm.object_count());
    Ok(())
}
