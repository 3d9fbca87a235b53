//! Shared state, resources and access semantics.
//!
//! The shared state is a map from [`ResourceId`] to [`ResourceValue`]; any
//! resource that is not listed is [`ResourceValue::Absent`]. A
//! [`ResourceSpace`] layers two refinements on top of the plain per-name
//! resources:
//!
//! * collections: a prefix such as `dirent:/out/` stands for an infinite
//!   family of membership resources, one per potential name. Listing the
//!   collection is recorded as a single read of the descriptor `prefix*`.
//! * contractions: a set of member resources merged into one tuple-valued
//!   resource. Accesses to a member are tracked as accesses to the merged
//!   resource, so contraction can only add conflicts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::script::TaskId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("cannot write into collection listing `{0}*`; writes must name concrete resources")]
    WriteIntoCollectionListing(String),
    #[error("contraction into `{merged}` overlaps existing declarations at `{resource}`")]
    OverlappingContraction { merged: ResourceId, resource: ResourceId },
    #[error("contraction into `{0}` has no members")]
    EmptyContraction(ResourceId),
    #[error("collection prefix `{0}` overlaps an existing declaration")]
    OverlappingCollection(String),
    #[error("invalid resource state file: {0}")]
    Format(String),
}

/// Name of a single resource, e.g. `file:/src/foo.c` or `env:CC`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(String);

impl ResourceId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for ResourceId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ResourceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Value of a resource. `Absent` is an ordinary value, not an error: a
/// nonexistent file reads as `Absent`, and writing `Absent` deletes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum ResourceValue {
    #[default]
    Absent,
    Bytes(Vec<u8>),
    Tuple(Vec<ResourceValue>),
}

impl ResourceValue {
    pub fn bytes(b: impl AsRef<[u8]>) -> Self {
        ResourceValue::Bytes(b.as_ref().to_vec())
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, ResourceValue::Absent)
    }

    /// Flat byte rendering used by string concatenation in task scripts.
    pub fn render(&self) -> Vec<u8> {
        match self {
            ResourceValue::Absent => b"<absent>".to_vec(),
            ResourceValue::Bytes(b) => b.clone(),
            ResourceValue::Tuple(items) => {
                let mut out = b"(".to_vec();
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(b',');
                    }
                    out.extend(item.render());
                }
                out.push(b')');
                out
            }
        }
    }

    /// Canonical encoding: a kind tag followed by a big-endian length and the
    /// payload. Tuples encode their element count and then each element.
    pub fn encode_canonical(&self, out: &mut Vec<u8>) {
        match self {
            ResourceValue::Absent => out.push(0),
            ResourceValue::Bytes(b) => {
                out.push(1);
                out.extend((b.len() as u64).to_be_bytes());
                out.extend(b);
            }
            ResourceValue::Tuple(items) => {
                out.push(2);
                out.extend((items.len() as u64).to_be_bytes());
                for item in items {
                    item.encode_canonical(out);
                }
            }
        }
    }

    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        self.encode_canonical(&mut buf);
        Digest::of(&buf)
    }
}

impl fmt::Display for ResourceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.render()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum ValueRepr {
    Absent(bool),
    Bytes(String),
    Tuple(Vec<ResourceValue>),
}

impl Serialize for ResourceValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match self {
            ResourceValue::Absent => ValueRepr::Absent(true),
            ResourceValue::Bytes(b) => ValueRepr::Bytes(base64::engine::general_purpose::STANDARD.encode(b)),
            ResourceValue::Tuple(items) => ValueRepr::Tuple(items.clone()),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResourceValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match ValueRepr::deserialize(d)? {
            ValueRepr::Absent(true) => Ok(ResourceValue::Absent),
            ValueRepr::Absent(false) => Err(serde::de::Error::custom("`absent` must be true; omit the entry instead")),
            ValueRepr::Bytes(b64) => base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map(ResourceValue::Bytes)
                .map_err(serde::de::Error::custom),
            ValueRepr::Tuple(items) => Ok(ResourceValue::Tuple(items)),
        }
    }
}

/// SHA-256 digest of a canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// What an access names: one concrete resource, or a whole collection
/// listing written as `prefix*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Resource(ResourceId),
    Listing(String),
}

impl Target {
    pub fn resource(name: &str) -> Self {
        Target::Resource(ResourceId::new(name))
    }

    pub fn listing(prefix: &str) -> Self {
        Target::Listing(prefix.to_owned())
    }

    /// True when a write to `self` and any access to `other` touch a common
    /// resource. Two listings never overlap for conflict purposes since
    /// listings can only be read.
    pub fn overlaps(&self, other: &Target) -> bool {
        match (self, other) {
            (Target::Resource(a), Target::Resource(b)) => a == b,
            (Target::Resource(r), Target::Listing(p)) | (Target::Listing(p), Target::Resource(r)) => {
                r.as_str().starts_with(p.as_str())
            }
            (Target::Listing(_), Target::Listing(_)) => false,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Resource(r) => write!(f, "{r}"),
            Target::Listing(p) => write!(f, "{p}*"),
        }
    }
}

impl FromStr for Target {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.strip_suffix('*') {
            Some(prefix) => Target::Listing(prefix.to_owned()),
            None => Target::Resource(ResourceId::new(s)),
        })
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap_or_else(|e| match e {}))
    }
}

/// Deliberate store faults, used only to check that the oracle notices a
/// broken substrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoreFault {
    #[default]
    None,
    /// A write also clobbers the next mapped resource (wrapping) with the
    /// written value, violating the frame property.
    ClobberNeighbor,
}

/// Map from resource to value; unlisted resources are `Absent`. `Absent`
/// values are never stored, so two states are equal iff they agree on every
/// resource.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SharedState {
    entries: BTreeMap<ResourceId, ResourceValue>,
}

impl SharedState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I, K>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, ResourceValue)>,
        K: Into<ResourceId>,
    {
        let mut state = SharedState::new();
        for (k, v) in entries {
            state.set(k.into(), v);
        }
        state
    }

    pub fn get(&self, id: &ResourceId) -> ResourceValue {
        self.entries.get(id).cloned().unwrap_or(ResourceValue::Absent)
    }

    /// Reads a resource or a collection listing. A listing yields a tuple of
    /// the present member names with the prefix stripped, in name order.
    pub fn read(&self, target: &Target) -> ResourceValue {
        match target {
            Target::Resource(id) => self.get(id),
            Target::Listing(prefix) => ResourceValue::Tuple(
                self.entries
                    .range::<str, _>((std::ops::Bound::Included(prefix.as_str()), std::ops::Bound::Unbounded))
                    .take_while(|(k, _)| k.as_str().starts_with(prefix.as_str()))
                    .map(|(k, _)| ResourceValue::bytes(&k.as_str()[prefix.len()..]))
                    .collect(),
            ),
        }
    }

    fn set(&mut self, id: ResourceId, value: ResourceValue) {
        if value.is_absent() {
            self.entries.remove(&id);
        } else {
            self.entries.insert(id, value);
        }
    }

    /// Writes one resource in place.
    pub fn write(&mut self, target: &Target, value: ResourceValue) -> Result<(), StateError> {
        self.write_with_fault(target, value, StoreFault::None)
    }

    pub fn write_with_fault(
        &mut self,
        target: &Target,
        value: ResourceValue,
        fault: StoreFault,
    ) -> Result<(), StateError> {
        let id = match target {
            Target::Resource(id) => id,
            Target::Listing(p) => return Err(StateError::WriteIntoCollectionListing(p.clone())),
        };
        if fault == StoreFault::ClobberNeighbor {
            let neighbor = self
                .entries
                .range::<ResourceId, _>((std::ops::Bound::Excluded(id), std::ops::Bound::Unbounded))
                .next()
                .or_else(|| self.entries.iter().next())
                .map(|(k, _)| k.clone())
                .filter(|k| k != id);
            if let Some(n) = neighbor {
                self.set(n, value.clone());
            }
        }
        self.set(id.clone(), value);
        Ok(())
    }

    /// Functional multi-write: every key of `writes` is set, every other
    /// resource is left untouched.
    pub fn apply<'a, I>(&self, writes: I) -> Result<SharedState, StateError>
    where
        I: IntoIterator<Item = (&'a Target, &'a ResourceValue)>,
    {
        let mut next = self.clone();
        for (t, v) in writes {
            next.write(t, v.clone())?;
        }
        Ok(next)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ResourceId, &ResourceValue)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        for (k, v) in &self.entries {
            buf.extend((k.as_str().len() as u64).to_be_bytes());
            buf.extend(k.as_str().as_bytes());
            v.encode_canonical(&mut buf);
        }
        Digest::of(&buf)
    }

    /// Resources whose value differs between `self` and `other`.
    pub fn changed_resources(&self, other: &SharedState) -> BTreeSet<ResourceId> {
        let keys: BTreeSet<&ResourceId> = self.entries.keys().chain(other.entries.keys()).collect();
        keys.into_iter().filter(|k| self.get(k) != other.get(k)).cloned().collect()
    }

    /// Serializes as the state snapshot file: pretty JSON, keys sorted,
    /// trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("state serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, StateError> {
        let raw: BTreeMap<ResourceId, ResourceValue> =
            serde_json::from_str(text).map_err(|e| StateError::Format(e.to_string()))?;
        Ok(SharedState::from_entries(raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "R",
            AccessKind::Write => "W",
        })
    }
}

/// One read or write performed by a task.
///
/// `target` is what the task named; `tracked` is the resource the access is
/// accounted against after contraction (equal to `target` when the named
/// resource is not contracted). `value` is the value read or written.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessEvent {
    pub task: TaskId,
    pub kind: AccessKind,
    pub target: Target,
    pub tracked: Target,
    pub value: ResourceValue,
}

/// Resources on which two access sequences conflict.
pub type ConflictSet = BTreeSet<Target>;

/// The tracked read and write sets of an access sequence. Conflicts depend on
/// nothing else.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Footprint {
    pub reads: BTreeSet<Target>,
    pub writes: BTreeSet<Target>,
}

impl Footprint {
    pub fn of<'a>(events: impl IntoIterator<Item = &'a AccessEvent>) -> Self {
        let mut fp = Footprint::default();
        for e in events {
            fp.record(e.kind, e.tracked.clone());
        }
        fp
    }

    pub fn record(&mut self, kind: AccessKind, target: Target) {
        match kind {
            AccessKind::Read => self.reads.insert(target),
            AccessKind::Write => self.writes.insert(target),
        };
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = &Target> {
        self.reads.iter().chain(self.writes.iter())
    }

    pub fn conflicts(&self, other: &Footprint) -> ConflictSet {
        let mut out = ConflictSet::new();
        one_way(self, other, &mut out);
        one_way(other, self, &mut out);
        out
    }
}

fn one_way(writer: &Footprint, other: &Footprint, out: &mut ConflictSet) {
    for w in &writer.writes {
        for x in other.targets() {
            if w.overlaps(x) {
                // A listing hit is reported as the descriptor, a direct hit as the resource.
                out.insert(if matches!(x, Target::Listing(_)) { x.clone() } else { w.clone() });
            }
        }
    }
}

/// Every resource written by one sequence and read or written by the other.
pub fn conflicts(a: &[AccessEvent], b: &[AccessEvent]) -> ConflictSet {
    Footprint::of(a).conflicts(&Footprint::of(b))
}

/// A collection declared by prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CollectionSpec {
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Contraction {
    pub merged: ResourceId,
    pub members: Vec<ResourceId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResourceSpace {
    collections: Vec<CollectionSpec>,
    contractions: Vec<Contraction>,
    // member -> (merged, component index)
    member_of: BTreeMap<ResourceId, (ResourceId, usize)>,
}

impl ResourceSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn collections(&self) -> &[CollectionSpec] {
        &self.collections
    }

    pub fn contractions(&self) -> &[Contraction] {
        &self.contractions
    }

    fn in_collection(&self, id: &ResourceId) -> Option<&CollectionSpec> {
        self.collections.iter().find(|c| id.as_str().starts_with(c.prefix.as_str()))
    }

    fn is_merged(&self, id: &ResourceId) -> bool {
        self.contractions.iter().any(|c| &c.merged == id)
    }

    pub fn with_collection(mut self, prefix: impl Into<String>) -> Result<Self, StateError> {
        let prefix = prefix.into();
        let clash = self
            .collections
            .iter()
            .any(|c| c.prefix.starts_with(prefix.as_str()) || prefix.starts_with(c.prefix.as_str()))
            || self
                .member_of
                .keys()
                .chain(self.contractions.iter().map(|c| &c.merged))
                .any(|m| m.as_str().starts_with(prefix.as_str()));
        if prefix.is_empty() || clash {
            return Err(StateError::OverlappingCollection(prefix));
        }
        self.collections.push(CollectionSpec { prefix });
        Ok(self)
    }

    /// Merges `members` into the tuple-valued resource `merged`. Member order
    /// in the tuple is name order.
    pub fn contract(&self, members: &BTreeSet<ResourceId>, merged: ResourceId) -> Result<ResourceSpace, StateError> {
        if members.is_empty() {
            return Err(StateError::EmptyContraction(merged));
        }
        let overlap =
            |r: &ResourceId| self.member_of.contains_key(r) || self.is_merged(r) || self.in_collection(r).is_some();
        if let Some(r) = members.iter().find(|r| overlap(r)) {
            return Err(StateError::OverlappingContraction { merged, resource: r.clone() });
        }
        if overlap(&merged) && !members.contains(&merged) {
            return Err(StateError::OverlappingContraction { merged: merged.clone(), resource: merged });
        }
        let mut next = self.clone();
        for (i, m) in members.iter().enumerate() {
            next.member_of.insert(m.clone(), (merged.clone(), i));
        }
        next.contractions.push(Contraction { merged, members: members.iter().cloned().collect() });
        Ok(next)
    }

    /// The resource an access to `target` is accounted against.
    pub fn resolve(&self, target: &Target) -> Target {
        match target {
            Target::Resource(id) => Target::Resource(self.resolve_id(id)),
            Target::Listing(_) => target.clone(),
        }
    }

    pub fn resolve_id(&self, id: &ResourceId) -> ResourceId {
        self.member_of.get(id).map(|(m, _)| m.clone()).unwrap_or_else(|| id.clone())
    }

    /// Value of a merged resource: the tuple of its members' values.
    pub fn merged_value(&self, state: &SharedState, merged: &ResourceId) -> Option<ResourceValue> {
        self.contractions
            .iter()
            .find(|c| &c.merged == merged)
            .map(|c| ResourceValue::Tuple(c.members.iter().map(|m| state.get(m)).collect()))
    }

    /// Component of a merged value that a member read observes.
    pub fn member_component(&self, id: &ResourceId) -> Option<(&ResourceId, usize)> {
        self.member_of.get(id).map(|(m, i)| (m, *i))
    }

    pub fn declares_collection(&self, prefix: &str) -> bool {
        self.collections.iter().any(|c| c.prefix == prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(task: &str, kind: AccessKind, target: &str) -> AccessEvent {
        let t: Target = target.parse().unwrap();
        AccessEvent { task: TaskId::new(task), kind, target: t.clone(), tracked: t, value: ResourceValue::Absent }
    }

    #[test]
    fn unmapped_resource_reads_absent() {
        assert_eq!(SharedState::new().read(&Target::resource("file:/a")), ResourceValue::Absent);
    }

    #[test]
    fn direct_lookup() {
        let s = SharedState::from_entries([("file:/a", ResourceValue::bytes("x"))]);
        assert_eq!(s.read(&Target::resource("file:/a")), ResourceValue::bytes("x"));
    }

    #[test]
    fn write_sets_and_deletes() {
        let a = Target::resource("file:/a");
        let s = SharedState::new().apply([(&a, &ResourceValue::bytes("x"))]).unwrap();
        assert_eq!(s, SharedState::from_entries([("file:/a", ResourceValue::bytes("x"))]));
        assert_eq!(s.apply(std::iter::empty()).unwrap(), s);
        let deleted = s.apply([(&a, &ResourceValue::Absent)]).unwrap();
        assert_eq!(deleted.read(&a), ResourceValue::Absent);
        assert!(deleted.is_empty());
    }

    #[test]
    fn write_into_listing_is_rejected() {
        let mut s = SharedState::new();
        let err = s.write(&Target::listing("dirent:/out/"), ResourceValue::bytes("x"));
        assert_eq!(err, Err(StateError::WriteIntoCollectionListing("dirent:/out/".into())));
    }

    #[test]
    fn listing_read_strips_prefix() {
        let s = SharedState::from_entries([
            ("dirent:/out/b", ResourceValue::bytes("1")),
            ("dirent:/out/a", ResourceValue::bytes("1")),
            ("dirent:/outer", ResourceValue::bytes("1")),
            ("dirent:/p", ResourceValue::bytes("1")),
        ]);
        assert_eq!(
            s.read(&Target::listing("dirent:/out/")),
            ResourceValue::Tuple(vec![ResourceValue::bytes("a"), ResourceValue::bytes("b")])
        );
    }

    #[test]
    fn generated_header_conflict() {
        let a = [ev("gen", AccessKind::Write, "file:gen.h")];
        let b = [ev("gcc", AccessKind::Read, "file:gen.h")];
        assert_eq!(conflicts(&a, &b), BTreeSet::from([Target::resource("file:gen.h")]));
    }

    #[test]
    fn read_read_never_conflicts() {
        let a = [ev("a", AccessKind::Read, "x")];
        let b = [ev("b", AccessKind::Read, "x")];
        assert!(conflicts(&a, &b).is_empty());
    }

    #[test]
    fn listing_conflicts_with_member_write() {
        let a = [ev("a", AccessKind::Write, "dirent:/out/f")];
        let b = [ev("b", AccessKind::Read, "dirent:/out/*")];
        assert_eq!(conflicts(&a, &b), BTreeSet::from([Target::listing("dirent:/out/")]));
        let c = [ev("c", AccessKind::Write, "dirent:/other/f")];
        assert!(conflicts(&c, &b).is_empty());
    }

    #[test]
    fn contraction_resolves_members() {
        let space = ResourceSpace::new().contract(&BTreeSet::from(["a".into(), "b".into()]), "m".into()).unwrap();
        assert_eq!(space.resolve(&Target::resource("a")), Target::resource("m"));
        assert_eq!(space.resolve(&Target::resource("c")), Target::resource("c"));
        let state = SharedState::from_entries([("b", ResourceValue::bytes("2"))]);
        assert_eq!(
            space.merged_value(&state, &"m".into()),
            Some(ResourceValue::Tuple(vec![ResourceValue::Absent, ResourceValue::bytes("2")]))
        );
        assert_eq!(space.member_component(&"b".into()), Some((&"m".into(), 1)));
    }

    #[test]
    fn overlapping_contraction_rejected() {
        let space = ResourceSpace::new()
            .with_collection("dir/")
            .unwrap()
            .contract(&BTreeSet::from(["a".into()]), "m".into())
            .unwrap();
        assert!(matches!(
            space.contract(&BTreeSet::from(["a".into(), "z".into()]), "n".into()),
            Err(StateError::OverlappingContraction { .. })
        ));
        assert!(matches!(
            space.contract(&BTreeSet::from(["dir/x".into()]), "n".into()),
            Err(StateError::OverlappingContraction { .. })
        ));
        assert!(matches!(
            space.contract(&BTreeSet::from(["q".into()]), "m".into()),
            Err(StateError::OverlappingContraction { .. })
        ));
        assert!(space.clone().with_collection("d").is_err());
    }

    #[test]
    fn value_json_shapes() {
        let v = ResourceValue::Tuple(vec![ResourceValue::Absent, ResourceValue::bytes("hi")]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"tuple":[{"absent":true},{"bytes":"aGk="}]}"#);
        assert_eq!(serde_json::from_str::<ResourceValue>(&json).unwrap(), v);
    }

    #[test]
    fn state_file_is_sorted_and_drops_absent() {
        let text = r#"{"z": {"bytes": "eg=="}, "a": {"absent": true}, "m": {"bytes": ""}}"#;
        let s = SharedState::from_json(text).unwrap();
        assert_eq!(s.len(), 2);
        let out = s.to_json();
        assert!(out.find("\"m\"").unwrap() < out.find("\"z\"").unwrap());
        assert_eq!(SharedState::from_json(&out).unwrap().to_json(), out);
    }

    #[test]
    fn absent_digest_is_constant() {
        assert_eq!(ResourceValue::Absent.digest(), Digest::of(&[0]));
        assert_ne!(ResourceValue::bytes("").digest(), ResourceValue::Absent.digest());
        let d = ResourceValue::bytes("x").digest();
        assert_eq!(Digest::from_hex(&d.to_hex()), Some(d));
    }

    #[test]
    fn clobber_fault_breaks_frame() {
        let mut s = SharedState::from_entries([("a", ResourceValue::bytes("1")), ("b", ResourceValue::bytes("2"))]);
        s.write_with_fault(&Target::resource("a"), ResourceValue::bytes("9"), StoreFault::ClobberNeighbor).unwrap();
        assert_eq!(s.get(&"b".into()), ResourceValue::bytes("9"));
    }
}
