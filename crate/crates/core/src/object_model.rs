//! Objects with hidden classes and prototype chains.
//!
//! A [`Realm`] owns every name, class and object. Classes form a transition
//! tree per prototype: adding a property to an object moves it to the child
//! class for that name, creating the child on first use. Two objects built by
//! the same sequence of additions therefore share a class.

use std::collections::HashMap;

use thiserror::Error;

/// Default machine word size in bytes.
pub const WORD_SIZE: usize = 8;

/// Words in front of the property slots in a native object record:
/// the class id, then the prototype.
pub const HEADER_WORDS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ObjectModelError {
    #[error("property names must not be empty")]
    EmptyName,
    #[error("unknown object {0:?}")]
    UnknownObject(ObjectId),
    #[error("property deletion is not supported")]
    DeleteUnsupported,
    #[error("prototype cycle through {0:?}")]
    PrototypeCycle(ObjectId),
}

/// Interned property name. Equal text means equal name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PropertyName(u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(u32);

impl ClassId {
    /// Nonzero, so that zero can stand for an empty cache in native code.
    pub fn as_word(self) -> u64 {
        self.0 as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(u32);

impl ObjectId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// How property slots map onto machine words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectLayout {
    pub word_size: usize,
    pub header_words: usize,
}

impl Default for ObjectLayout {
    fn default() -> Self {
        ObjectLayout {
            word_size: WORD_SIZE,
            header_words: HEADER_WORDS,
        }
    }
}

impl ObjectLayout {
    /// Word index of a slot within the object record.
    pub fn field_index(&self, slot: usize) -> u64 {
        (self.header_words + slot) as u64
    }

    pub fn byte_offset(&self, slot: usize) -> u64 {
        self.field_index(slot) * self.word_size as u64
    }
}

#[derive(Debug)]
pub struct HiddenClass {
    id: ClassId,
    properties: Vec<PropertyName>,
    index: HashMap<PropertyName, usize>,
    prototype: Option<ObjectId>,
    transitions: HashMap<PropertyName, ClassId>,
}

impl HiddenClass {
    pub fn id(&self) -> ClassId {
        self.id
    }

    pub fn prototype(&self) -> Option<ObjectId> {
        self.prototype
    }

    pub fn len(&self) -> usize {
        self.properties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.properties.is_empty()
    }

    pub fn slot_of(&self, name: PropertyName) -> Option<usize> {
        self.index.get(&name).copied()
    }

    /// Property names in slot order.
    pub fn properties(&self) -> &[PropertyName] {
        &self.properties
    }

    pub fn transition(&self, name: PropertyName) -> Option<ClassId> {
        self.transitions.get(&name).copied()
    }
}

#[derive(Debug, Clone)]
pub struct HeapObject {
    class: ClassId,
    slots: Vec<u64>,
}

impl HeapObject {
    pub fn class(&self) -> ClassId {
        self.class
    }

    pub fn slots(&self) -> &[u64] {
        &self.slots
    }
}

#[derive(Debug, Default)]
struct Interner {
    ids: HashMap<Box<str>, PropertyName>,
    names: Vec<Box<str>>,
}

#[derive(Debug)]
pub struct Realm {
    names: Interner,
    classes: Vec<HiddenClass>,
    roots: HashMap<Option<ObjectId>, ClassId>,
    objects: Vec<HeapObject>,
    layout: ObjectLayout,
}

impl Default for Realm {
    fn default() -> Self {
        Realm::new(ObjectLayout::default())
    }
}

impl Realm {
    pub fn new(layout: ObjectLayout) -> Realm {
        Realm {
            names: Interner::default(),
            classes: Vec::new(),
            roots: HashMap::new(),
            objects: Vec::new(),
            layout,
        }
    }

    pub fn layout(&self) -> ObjectLayout {
        self.layout
    }

    pub fn intern(&mut self, text: &str) -> Result<PropertyName, ObjectModelError> {
        if text.is_empty() {
            return Err(ObjectModelError::EmptyName);
        }
        if let Some(&id) = self.names.ids.get(text) {
            return Ok(id);
        }
        let id = PropertyName(self.names.names.len() as u32);
        self.names.names.push(text.into());
        self.names.ids.insert(text.into(), id);
        Ok(id)
    }

    pub fn name_text(&self, name: PropertyName) -> &str {
        &self.names.names[name.0 as usize]
    }

    pub fn class(&self, id: ClassId) -> &HiddenClass {
        &self.classes[id.0 as usize - 1]
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn object(&self, id: ObjectId) -> &HeapObject {
        &self.objects[id.index()]
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn class_of(&self, obj: ObjectId) -> &HiddenClass {
        self.class(self.object(obj).class)
    }

    fn push_class(
        &mut self,
        properties: Vec<PropertyName>,
        prototype: Option<ObjectId>,
    ) -> ClassId {
        let id = ClassId(self.classes.len() as u32 + 1);
        let index = properties
            .iter()
            .enumerate()
            .map(|(slot, &name)| (name, slot))
            .collect();
        self.classes.push(HiddenClass {
            id,
            properties,
            index,
            prototype,
            transitions: HashMap::new(),
        });
        id
    }

    fn check_object(&self, obj: ObjectId) -> Result<(), ObjectModelError> {
        if obj.index() < self.objects.len() {
            Ok(())
        } else {
            Err(ObjectModelError::UnknownObject(obj))
        }
    }

    /// A fresh object with the empty root class for `proto`.
    ///
    /// Prototypes are fixed at creation and must already exist, so every
    /// chain is finite.
    pub fn new_object(&mut self, proto: Option<ObjectId>) -> Result<ObjectId, ObjectModelError> {
        if let Some(p) = proto {
            self.check_object(p)?;
        }
        let class = match self.roots.get(&proto) {
            Some(&c) => c,
            None => {
                let c = self.push_class(Vec::new(), proto);
                self.roots.insert(proto, c);
                c
            }
        };
        let id = ObjectId(self.objects.len() as u32);
        self.objects.push(HeapObject {
            class,
            slots: Vec::new(),
        });
        Ok(id)
    }

    pub fn set_property(
        &mut self,
        obj: ObjectId,
        name: PropertyName,
        value: u64,
    ) -> Result<(), ObjectModelError> {
        self.check_object(obj)?;
        let current = self.objects[obj.index()].class;
        if let Some(slot) = self.class(current).slot_of(name) {
            self.objects[obj.index()].slots[slot] = value;
            return Ok(());
        }
        let next = match self.class(current).transition(name) {
            Some(c) => c,
            None => {
                let parent = self.class(current);
                let mut properties = parent.properties.clone();
                properties.push(name);
                let prototype = parent.prototype;
                let child = self.push_class(properties, prototype);
                self.classes[current.0 as usize - 1]
                    .transitions
                    .insert(name, child);
                child
            }
        };
        let object = &mut self.objects[obj.index()];
        object.class = next;
        object.slots.push(value);
        Ok(())
    }

    /// Convenience for building fixtures: interns each name and sets it.
    pub fn set_named(&mut self, obj: ObjectId, name: &str, value: u64) -> Result<(), ObjectModelError> {
        let name = self.intern(name)?;
        self.set_property(obj, name, value)
    }

    pub fn delete_property(
        &mut self,
        _obj: ObjectId,
        _name: PropertyName,
    ) -> Result<(), ObjectModelError> {
        Err(ObjectModelError::DeleteUnsupported)
    }

    pub fn lookup_own(&self, obj: ObjectId, name: PropertyName) -> Option<usize> {
        self.class_of(obj).slot_of(name)
    }

    /// First object along the prototype chain owning `name`, with its slot.
    pub fn lookup_chain(
        &self,
        obj: ObjectId,
        name: PropertyName,
    ) -> Result<Option<(ObjectId, usize)>, ObjectModelError> {
        let mut current = Some(obj);
        let mut steps = 0;
        while let Some(o) = current {
            if steps > self.objects.len() {
                return Err(ObjectModelError::PrototypeCycle(obj));
            }
            if let Some(slot) = self.lookup_own(o, name) {
                return Ok(Some((o, slot)));
            }
            current = self.class_of(o).prototype;
            steps += 1;
        }
        Ok(None)
    }

    pub fn read_slot(&self, obj: ObjectId, slot: usize) -> u64 {
        self.object(obj).slots[slot]
    }

    /// The object as a native record: class id, prototype (index + 1, or 0)
    /// and then the slots, padded with `pad` zero words.
    pub fn native_record(&self, obj: ObjectId, pad: usize) -> Vec<u64> {
        let object = self.object(obj);
        let class = self.class(object.class);
        let mut record = vec![0; self.layout.header_words];
        record[0] = object.class.as_word();
        if self.layout.header_words > 1 {
            record[1] = class.prototype.map_or(0, |p| p.0 as u64 + 1);
        }
        record.extend_from_slice(&object.slots);
        record.extend(std::iter::repeat_n(0, pad));
        record
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(realm: &mut Realm, props: &[(&str, u64)]) -> ObjectId {
        let obj = realm.new_object(None).unwrap();
        for (name, value) in props {
            realm.set_named(obj, name, *value).unwrap();
        }
        obj
    }

    #[test]
    fn empty_object_has_empty_class() {
        let mut realm = Realm::default();
        let obj = realm.new_object(None).unwrap();
        assert!(realm.class_of(obj).is_empty());
        assert!(realm.object(obj).slots().is_empty());
    }

    #[test]
    fn listing_objects_share_and_split_classes() {
        let mut realm = Realm::default();
        let o1 = build(&mut realm, &[("a", 13), ("prop", 12)]);
        let o2 = build(&mut realm, &[("a", 13), ("prop", 37)]);
        let o3 = build(&mut realm, &[("b", 1), ("c", 2), ("prop", 2)]);
        let prop = realm.intern("prop").unwrap();
        let a = realm.intern("a").unwrap();
        assert_eq!(realm.object(o1).class(), realm.object(o2).class());
        assert_ne!(realm.object(o1).class(), realm.object(o3).class());
        assert_eq!(realm.lookup_own(o1, a), Some(0));
        assert_eq!(realm.lookup_own(o1, prop), Some(1));
        assert_eq!(realm.lookup_own(o3, prop), Some(2));
        assert_eq!(realm.layout().byte_offset(1), 0x18);
        assert_eq!(realm.layout().byte_offset(2), 0x20);
    }

    #[test]
    fn third_property_slot_and_offset() {
        let mut realm = Realm::default();
        let o = build(&mut realm, &[("x", 1), ("y", 2), ("prop", 3)]);
        let prop = realm.intern("prop").unwrap();
        let slot = realm.lookup_own(o, prop).unwrap();
        assert_eq!(slot, 2);
        assert_eq!(slot * WORD_SIZE, 0x10);
    }

    #[test]
    fn overwrite_keeps_class() {
        let mut realm = Realm::default();
        let o = build(&mut realm, &[("a", 1)]);
        let before = realm.object(o).class();
        realm.set_named(o, "a", 99).unwrap();
        assert_eq!(realm.object(o).class(), before);
        assert_eq!(realm.object(o).slots(), &[99]);
    }

    #[test]
    fn missing_and_errors() {
        let mut realm = Realm::default();
        let o = build(&mut realm, &[("a", 1)]);
        let missing = realm.intern("missing").unwrap();
        assert_eq!(realm.lookup_own(o, missing), None);
        assert_eq!(realm.intern(""), Err(ObjectModelError::EmptyName));
        assert_eq!(
            realm.delete_property(o, missing),
            Err(ObjectModelError::DeleteUnsupported)
        );
        assert!(realm.new_object(Some(ObjectId(42))).is_err());
    }

    #[test]
    fn chain_lookup_finds_prototype_holder() {
        let mut realm = Realm::default();
        let proto = build(&mut realm, &[("shared", 7)]);
        let obj = realm.new_object(Some(proto)).unwrap();
        realm.set_named(obj, "own", 1).unwrap();
        let shared = realm.intern("shared").unwrap();
        let own = realm.intern("own").unwrap();
        assert_eq!(realm.lookup_chain(obj, own).unwrap(), Some((obj, 0)));
        assert_eq!(realm.lookup_chain(obj, shared).unwrap(), Some((proto, 0)));
        let nope = realm.intern("nope").unwrap();
        assert_eq!(realm.lookup_chain(obj, nope).unwrap(), None);
    }

    #[test]
    fn roots_are_per_prototype() {
        let mut realm = Realm::default();
        let p = realm.new_object(None).unwrap();
        let a = realm.new_object(Some(p)).unwrap();
        let b = realm.new_object(None).unwrap();
        assert_ne!(realm.object(a).class(), realm.object(b).class());
        assert_eq!(realm.object(p).class(), realm.object(b).class());
    }

    #[test]
    fn native_record_layout() {
        let mut realm = Realm::default();
        let o = build(&mut realm, &[("a", 13), ("prop", 12)]);
        let rec = realm.native_record(o, 1);
        assert_eq!(rec.len(), 5);
        assert_eq!(rec[0], realm.object(o).class().as_word());
        assert_eq!(rec[1], 0);
        assert_eq!(&rec[2..4], &[13, 12]);
    }
}
