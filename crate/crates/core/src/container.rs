//! Aggregate containers, their canonical encoding, and hash-chain checks.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::algebra::{self, Aggregate, AlgebraError, AlgebraSpec};
use crate::identity::{sha256, ContainerSignature, Hash, Kid, KID_BYTES, MAX_BITS};

pub const CONTAINER_MAGIC: [u8; 2] = [0x41, 0x56];
pub const CONTAINER_VERSION: u8 = 1;
const HEADER_LEN: usize = 2 + 1 + 1 + KID_BYTES + 12 + 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("initial aggregate is not valid for the algebra")]
    InvalidInitial,
    #[error("containers are not siblings: {0} and {1}")]
    NotSiblings(SubtreeId, SubtreeId),
    #[error("container depth {0} has no parent")]
    NoParent(u8),
    #[error("counter overflow")]
    CounterOverflow,
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("malformed container encoding: {0}")]
    Malformed(&'static str),
}

/// Address of the depth-`d` subtree whose leaves share `prefix`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubtreeId {
    prefix: Kid,
    depth: u8,
}

impl fmt::Debug for SubtreeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SubtreeId({self})")
    }
}

impl fmt::Display for SubtreeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.depth)?;
        for i in 0..(self.depth as usize).min(16) {
            f.write_str(if self.prefix.bit(i) { "1" } else { "0" })?;
        }
        if self.depth > 16 {
            f.write_str("..")?;
        }
        Ok(())
    }
}

impl SubtreeId {
    /// The depth-`depth` subtree containing `kid`.
    pub fn new(kid: Kid, depth: u8) -> Self {
        assert!(depth as usize <= MAX_BITS, "depth {depth} exceeds {MAX_BITS}");
        SubtreeId {
            prefix: kid.truncate(depth as usize),
            depth,
        }
    }

    pub fn root() -> Self {
        SubtreeId {
            prefix: Kid::ZERO,
            depth: 0,
        }
    }

    pub fn prefix(&self) -> Kid {
        self.prefix
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn contains(&self, kid: &Kid) -> bool {
        kid.truncate(self.depth as usize) == self.prefix
    }

    pub fn contains_subtree(&self, other: &SubtreeId) -> bool {
        other.depth >= self.depth && self.contains(&other.prefix)
    }

    pub fn parent(&self) -> Option<SubtreeId> {
        (self.depth > 0).then(|| SubtreeId::new(self.prefix, self.depth - 1))
    }

    pub fn child(&self, bit: bool) -> SubtreeId {
        SubtreeId {
            prefix: self.prefix.with_bit(self.depth as usize, bit),
            depth: self.depth + 1,
        }
    }

    /// The other child of this subtree's parent.
    pub fn sibling(&self) -> Option<SubtreeId> {
        (self.depth > 0).then(|| {
            let i = self.depth as usize - 1;
            SubtreeId {
                prefix: self.prefix.with_bit(i, !self.prefix.bit(i)),
                depth: self.depth,
            }
        })
    }

    /// Value of the bit that distinguishes this subtree from its sibling.
    pub fn last_bit(&self) -> bool {
        self.depth > 0 && self.prefix.bit(self.depth as usize - 1)
    }
}

/// A hash-chained record of a subtree's aggregate.
///
/// Two-child containers keep the child whose subtree has last bit 0 in
/// slot 1 and the other in slot 2. Single-child containers use slot 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateContainer {
    pub hash: Hash,
    pub aggregate: Arc<Aggregate>,
    pub c: u32,
    pub c1: u32,
    pub c2: u32,
    pub h1: Option<Hash>,
    pub h2: Option<Hash>,
    pub subtree: SubtreeId,
}

impl AggregateContainer {
    /// Builds a container and computes its hash.
    pub fn seal(
        aggregate: Arc<Aggregate>,
        c: u32,
        (c1, h1): (u32, Option<Hash>),
        (c2, h2): (u32, Option<Hash>),
        subtree: SubtreeId,
    ) -> Self {
        let mut container = AggregateContainer {
            hash: [0; 32],
            aggregate,
            c,
            c1,
            c2,
            h1,
            h2,
            subtree,
        };
        container.hash = container.compute_hash();
        container
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.aggregate.encoded_len());
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        out.push(self.subtree.depth);
        out.extend_from_slice(&self.subtree.prefix.0);
        out.extend_from_slice(&self.c.to_be_bytes());
        out.extend_from_slice(&self.c1.to_be_bytes());
        out.extend_from_slice(&self.c2.to_be_bytes());
        out.extend_from_slice(&self.h1.unwrap_or([0; 32]));
        out.extend_from_slice(&self.h2.unwrap_or([0; 32]));
        self.aggregate.encode_into(&mut out);
        out
    }

    pub fn compute_hash(&self) -> Hash {
        sha256(&self.canonical_bytes())
    }

    /// Decodes canonical bytes and attaches the claimed hash without
    /// checking it, so that tampered records can be represented.
    pub fn decode(bytes: &[u8], claimed_hash: Hash) -> Result<Self, ContainerError> {
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::Malformed("truncated header"));
        }
        if bytes[..2] != CONTAINER_MAGIC {
            return Err(ContainerError::Malformed("bad magic"));
        }
        if bytes[2] != CONTAINER_VERSION {
            return Err(ContainerError::Malformed("unknown version"));
        }
        let depth = bytes[3];
        if depth as usize > MAX_BITS {
            return Err(ContainerError::Malformed("depth out of range"));
        }
        let prefix = Kid(bytes[4..24].try_into().unwrap());
        if prefix.truncate(depth as usize) != prefix {
            return Err(ContainerError::Malformed("prefix has bits beyond depth"));
        }
        let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        let hash_at = |at: usize| -> Option<Hash> {
            let h: Hash = bytes[at..at + 32].try_into().unwrap();
            (h != [0; 32]).then_some(h)
        };
        let (aggregate, used) =
            Aggregate::decode(&bytes[HEADER_LEN..]).map_err(|_| ContainerError::Malformed("aggregate"))?;
        if HEADER_LEN + used != bytes.len() {
            return Err(ContainerError::Malformed("trailing bytes"));
        }
        Ok(AggregateContainer {
            hash: claimed_hash,
            aggregate: Arc::new(aggregate),
            c: word(24),
            c1: word(28),
            c2: word(32),
            h1: hash_at(36),
            h2: hash_at(68),
            subtree: SubtreeId { prefix, depth },
        })
    }

    pub fn hash_matches(&self) -> bool {
        self.compute_hash() == self.hash
    }

    /// Structural invariants on counters and child slots, for a tree of
    /// depth `bits`.
    pub fn counters_consistent(&self, bits: u8) -> bool {
        if self.c == 0 || self.c1 == 0 && self.h1.is_some() || self.c2 == 0 && self.h2.is_some() {
            return false;
        }
        if self.c1 > 0 && self.h1.is_none() || self.c2 > 0 && self.h2.is_none() {
            return false;
        }
        if self.c2 > 0 && self.c1 == 0 {
            return false;
        }
        if self.subtree.depth == bits {
            self.c == 1 && self.c1 == 0 && self.c2 == 0
        } else {
            self.c1.checked_add(self.c2) == Some(self.c) && self.c1 > 0
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.c1 == 0 && self.c2 == 0
    }

    pub fn child_hashes(&self) -> impl Iterator<Item = Hash> {
        self.h1.into_iter().chain(self.h2)
    }
}

impl Serialize for AggregateContainer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire<'a> {
            #[serde(with = "crate::serde_hex")]
            hash: &'a Hash,
            #[serde(with = "crate::serde_hex::vec")]
            bytes: Vec<u8>,
        }
        Wire {
            hash: &self.hash,
            bytes: self.canonical_bytes(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AggregateContainer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            #[serde(with = "crate::serde_hex")]
            hash: Hash,
            #[serde(with = "crate::serde_hex::vec")]
            bytes: Vec<u8>,
        }
        let w = Wire::deserialize(d)?;
        AggregateContainer::decode(&w.bytes, w.hash).map_err(D::Error::custom)
    }
}

pub fn build_leaf_container(
    a: Aggregate,
    kid: Kid,
    spec: &AlgebraSpec,
    bits: u8,
) -> Result<AggregateContainer, ContainerError> {
    if !algebra::validate_initial(&a, spec) {
        return Err(ContainerError::InvalidInitial);
    }
    Ok(AggregateContainer::seal(
        Arc::new(a),
        1,
        (0, None),
        (0, None),
        SubtreeId::new(kid, bits),
    ))
}

/// Builds the parent of `own` and its optional sibling.
pub fn build_parent_container(
    own: &AggregateContainer,
    sibling: Option<&AggregateContainer>,
) -> Result<AggregateContainer, ContainerError> {
    let parent = own
        .subtree
        .parent()
        .ok_or(ContainerError::NoParent(own.subtree.depth))?;
    let Some(sib) = sibling else {
        return Ok(AggregateContainer::seal(
            own.aggregate.clone(),
            own.c,
            (own.c, Some(own.hash)),
            (0, None),
            parent,
        ));
    };
    if own.subtree.sibling() != Some(sib.subtree) {
        return Err(ContainerError::NotSiblings(own.subtree, sib.subtree));
    }
    let a = algebra::combine(&own.aggregate, &sib.aggregate)?;
    let c = own.c.checked_add(sib.c).ok_or(ContainerError::CounterOverflow)?;
    let (first, second) = if own.subtree.last_bit() { (sib, own) } else { (own, sib) };
    Ok(AggregateContainer::seal(
        Arc::new(a),
        c,
        (first.c, Some(first.hash)),
        (second.c, Some(second.hash)),
        parent,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainVerdict {
    #[error("chain verifies")]
    Valid,
    #[error("chain is invalid: {0}")]
    Invalid(String),
    #[error("witness {} is missing", hex::encode(.0))]
    Incomplete(Hash),
}

/// Follows child links from `root` down to `leaf_hash`.
///
/// The path is determined by the leaf's KID: two-child containers order
/// their children by the next bit, so a missing witness on the path can be
/// named without guessing.
pub fn verify_chain(
    root: &AggregateContainer,
    witnesses: &HashMap<Hash, AggregateContainer>,
    leaf_hash: &Hash,
    bits: u8,
) -> ChainVerdict {
    let Some(leaf) = witnesses.get(leaf_hash) else {
        return ChainVerdict::Incomplete(*leaf_hash);
    };
    if !leaf.hash_matches() {
        return ChainVerdict::Invalid("leaf does not match its hash".into());
    }
    if leaf.subtree.depth != bits || leaf.c != 1 || !leaf.is_leaf() {
        return ChainVerdict::Invalid("leaf hash does not name a leaf container".into());
    }
    let target = leaf.subtree.prefix;
    let mut current = root;
    loop {
        if !current.hash_matches() {
            return ChainVerdict::Invalid(format!(
                "container {} does not match its hash",
                hex::encode(current.hash)
            ));
        }
        if !current.counters_consistent(bits) {
            return ChainVerdict::Invalid(format!(
                "inconsistent counters in {}",
                hex::encode(current.hash)
            ));
        }
        if !current.subtree.contains(&target) {
            return ChainVerdict::Invalid(format!(
                "subtree {} does not contain the leaf",
                current.subtree
            ));
        }
        if current.hash == *leaf_hash {
            return ChainVerdict::Valid;
        }
        if current.is_leaf() {
            return ChainVerdict::Invalid("reached a different leaf".into());
        }
        let next = match (current.h1, current.h2) {
            (Some(h1), None) => h1,
            (Some(h1), Some(h2)) => {
                if target.bit(current.subtree.depth as usize) {
                    h2
                } else {
                    h1
                }
            }
            _ => return ChainVerdict::Invalid("missing child link".into()),
        };
        let Some(child) = witnesses.get(&next) else {
            return ChainVerdict::Incomplete(next);
        };
        if child.subtree.depth != current.subtree.depth + 1 {
            return ChainVerdict::Invalid("child depth does not follow parent".into());
        }
        let expected_c = if Some(next) == current.h1 { current.c1 } else { current.c2 };
        if child.c != expected_c {
            return ChainVerdict::Invalid("child counter differs from parent slot".into());
        }
        current = child;
    }
}

/// Why a signature is part of a confirmed container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignatureRole {
    /// Responder on the container.
    Rule1,
    /// Responder on its own child.
    Rule2,
    /// Another peer of the responder's child subtree on the container.
    Rule3,
    /// A peer of the responder's sibling child subtree on that child.
    Rule4,
    /// A peer of the responder's sibling child subtree on the container.
    Rule5,
}

/// A container backed by signatures, or by its fully signed children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmedContainer {
    pub container: Arc<AggregateContainer>,
    pub signatures: Vec<(SignatureRole, ContainerSignature)>,
    /// The confirmed children, attached when confirmation signatures
    /// could not be gathered.
    pub compensation: Option<Vec<ConfirmedContainer>>,
}

impl ConfirmedContainer {
    pub fn unsigned(container: Arc<AggregateContainer>) -> Self {
        ConfirmedContainer {
            container,
            signatures: Vec::new(),
            compensation: None,
        }
    }

    pub fn hash(&self) -> &Hash {
        &self.container.hash
    }

    pub fn counter(&self) -> u32 {
        self.container.c
    }

    pub fn signature(&self, role: SignatureRole) -> Option<&ContainerSignature> {
        self.signatures.iter().find(|(r, _)| *r == role).map(|(_, s)| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{encode_plurality, AlgebraSpec, Rational};

    fn kid(top: u8) -> Kid {
        let mut k = [0u8; KID_BYTES];
        k[0] = top;
        Kid(k)
    }

    fn leaf(top: u8, choice: usize, bits: u8) -> AggregateContainer {
        let spec = AlgebraSpec::plurality(2);
        build_leaf_container(encode_plurality(choice, &spec).unwrap(), kid(top), &spec, bits).unwrap()
    }

    #[test]
    fn subtree_arithmetic() {
        let s = SubtreeId::new(kid(0b1010_0000), 3);
        assert_eq!(s.prefix(), kid(0b1010_0000));
        assert_eq!(s.sibling().unwrap(), SubtreeId::new(kid(0b1000_0000), 3));
        assert_eq!(s.parent().unwrap(), SubtreeId::new(kid(0b1000_0000), 2));
        assert_eq!(s.parent().unwrap().child(true), s);
        assert!(s.contains(&kid(0b1011_1111)));
        assert!(!s.contains(&kid(0b1000_0000)));
        assert!(SubtreeId::root().contains(&kid(0xff)));
        assert!(SubtreeId::root().contains_subtree(&s));
        assert!(SubtreeId::root().parent().is_none());
        assert_eq!(s.to_string(), "3:101");
    }

    #[test]
    fn leaf_container() {
        let spec = AlgebraSpec::plurality(3);
        let c = build_leaf_container(encode_plurality(0, &spec).unwrap(), kid(1), &spec, 8).unwrap();
        assert_eq!(*c.aggregate, Aggregate::from_counts(&[1, 0, 0]));
        assert_eq!((c.c, c.c1, c.c2, c.h1, c.h2), (1, 0, 0, None, None));
        assert_eq!(c.subtree.depth(), 8);
        assert!(c.counters_consistent(8));

        let other = build_leaf_container(encode_plurality(0, &spec).unwrap(), kid(2), &spec, 8).unwrap();
        assert_ne!(c.hash, other.hash);

        assert_eq!(
            build_leaf_container(Aggregate::from_counts(&[1, 1, 0]), kid(1), &spec, 8),
            Err(ContainerError::InvalidInitial)
        );
    }

    #[test]
    fn parent_of_two_leaves() {
        let left = leaf(0b0000_0000, 0, 3);
        let right = leaf(0b0010_0000, 1, 3);
        let p = build_parent_container(&left, Some(&right)).unwrap();
        assert_eq!(*p.aggregate, Aggregate::from_counts(&[1, 1]));
        assert_eq!((p.c, p.c1, p.c2), (2, 1, 1));
        assert_eq!(p.subtree, SubtreeId::new(kid(0), 2));
        // Slot order does not depend on which side builds the parent.
        assert_eq!(build_parent_container(&right, Some(&left)).unwrap(), p);
        assert_eq!(p.h1, Some(left.hash));
        assert_eq!(p.h2, Some(right.hash));

        let changed = leaf(0b0010_0000, 0, 3);
        assert_ne!(build_parent_container(&left, Some(&changed)).unwrap().hash, p.hash);

        let far = leaf(0b1000_0000, 0, 3);
        assert!(matches!(
            build_parent_container(&left, Some(&far)),
            Err(ContainerError::NotSiblings(..))
        ));
    }

    #[test]
    fn single_child_pass_up() {
        let right = leaf(0b0010_0000, 1, 3);
        let p = build_parent_container(&right, None).unwrap();
        assert_eq!(p.aggregate, right.aggregate);
        assert_eq!((p.c, p.c1, p.c2), (1, 1, 0));
        assert_eq!((p.h1, p.h2), (Some(right.hash), None));
        assert_eq!(p.subtree.depth(), 2);
        assert!(p.counters_consistent(3));
    }

    fn sample_container() -> AggregateContainer {
        AggregateContainer::seal(
            Arc::new(Aggregate::from_entries(vec![
                Rational::new(3, 1),
                Rational::new(1, 2),
                Rational::new(5, 2),
            ])),
            6,
            (4, Some([0x11; 32])),
            (2, Some([0x22; 32])),
            SubtreeId::new(kid(0b1100_0000), 3),
        )
    }

    #[test]
    fn golden_vector() {
        let expected = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/testdata/container_golden.txt"
        ))
        .unwrap();
        let mut lines = expected.lines().filter(|l| !l.starts_with('#'));
        let bytes_hex = lines.next().unwrap().trim();
        let hash_hex = lines.next().unwrap().trim();
        let c = sample_container();
        assert_eq!(hex::encode(c.canonical_bytes()), bytes_hex);
        assert_eq!(hex::encode(c.hash), hash_hex);
        assert_eq!(c.compute_hash(), c.compute_hash());
    }

    #[test]
    fn decode_round_trip() {
        let c = sample_container();
        let back = AggregateContainer::decode(&c.canonical_bytes(), c.hash).unwrap();
        assert_eq!(back, c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AggregateContainer>(&json).unwrap(), c);

        let mut bad = c.canonical_bytes();
        bad[0] = 0;
        assert!(AggregateContainer::decode(&bad, c.hash).is_err());
        let mut long = c.canonical_bytes();
        long.push(0);
        assert!(AggregateContainer::decode(&long, c.hash).is_err());
    }

    #[test]
    fn every_field_changes_the_hash() {
        let base = sample_container();
        let variants: Vec<AggregateContainer> = vec![
            AggregateContainer { c: 7, ..base.clone() },
            AggregateContainer { c1: 5, ..base.clone() },
            AggregateContainer { c2: 3, ..base.clone() },
            AggregateContainer { h1: Some([0x12; 32]), ..base.clone() },
            AggregateContainer { h2: None, ..base.clone() },
            AggregateContainer {
                subtree: SubtreeId::new(kid(0b1110_0000), 3),
                ..base.clone()
            },
            AggregateContainer {
                subtree: SubtreeId::new(kid(0b1100_0000), 2),
                ..base.clone()
            },
            AggregateContainer {
                aggregate: Arc::new(Aggregate::from_entries(vec![
                    Rational::new(3, 1),
                    Rational::new(1, 2),
                    Rational::new(7, 2),
                ])),
                ..base.clone()
            },
        ];
        for v in variants {
            assert_ne!(v.compute_hash(), base.hash);
        }
    }

    fn small_tree() -> (AggregateContainer, HashMap<Hash, AggregateContainer>, Vec<Hash>) {
        // Leaves 000, 001, 011 and 110 in a 3-bit tree.
        let leaves = [leaf(0b0000_0000, 0, 3), leaf(0b0010_0000, 1, 3), leaf(0b0110_0000, 1, 3), leaf(0b1100_0000, 0, 3)];
        let p00 = build_parent_container(&leaves[0], Some(&leaves[1])).unwrap();
        let p01 = build_parent_container(&leaves[2], None).unwrap();
        let p0 = build_parent_container(&p00, Some(&p01)).unwrap();
        let p11 = build_parent_container(&leaves[3], None).unwrap();
        let p1 = build_parent_container(&p11, None).unwrap();
        let root = build_parent_container(&p0, Some(&p1)).unwrap();
        let all = leaves.iter().chain([&p00, &p01, &p0, &p11, &p1, &root]);
        let witnesses = all.map(|c| (c.hash, c.clone())).collect();
        (root, witnesses, leaves.iter().map(|l| l.hash).collect())
    }

    #[test]
    fn chain_verifies_for_every_leaf() {
        let (root, witnesses, leaves) = small_tree();
        assert_eq!(root.c, 4);
        assert_eq!(*root.aggregate, Aggregate::from_counts(&[2, 2]));
        for l in &leaves {
            assert_eq!(verify_chain(&root, &witnesses, l, 3), ChainVerdict::Valid);
        }
    }

    #[test]
    fn tampered_chain_fails() {
        let (root, mut witnesses, leaves) = small_tree();
        let p0_hash = root.h1.unwrap();
        let mut tampered = witnesses[&p0_hash].clone();
        tampered.aggregate = Arc::new(Aggregate::from_counts(&[3, 0]));
        witnesses.insert(p0_hash, tampered);
        assert!(matches!(
            verify_chain(&root, &witnesses, &leaves[0], 3),
            ChainVerdict::Invalid(_)
        ));
        // The other half of the tree is unaffected.
        assert_eq!(verify_chain(&root, &witnesses, &leaves[3], 3), ChainVerdict::Valid);
    }

    #[test]
    fn missing_witness_is_incomplete() {
        let (root, mut witnesses, leaves) = small_tree();
        let p0_hash = root.h1.unwrap();
        witnesses.remove(&p0_hash);
        assert_eq!(
            verify_chain(&root, &witnesses, &leaves[1], 3),
            ChainVerdict::Incomplete(p0_hash)
        );
        assert_eq!(
            verify_chain(&root, &witnesses, &[9; 32], 3),
            ChainVerdict::Incomplete([9; 32])
        );
    }
}
