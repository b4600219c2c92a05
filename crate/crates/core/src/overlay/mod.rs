//! Simulated Kademlia overlay: XOR metric, k-bucket routing tables,
//! iterative lookup, a small DHT store, and the in-process transport.

pub mod dht;
pub mod lookup;
pub mod transport;
pub mod wire;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::identity::{Credentials, Kid};

pub use dht::{dht_key, DhtStorage};
pub use lookup::{LookupMode, LookupState};
pub use transport::{PeerId, RpcError, Runtime, Transport, TransportStats};

/// Bit-wise XOR of two KIDs, compared as a big-endian integer.
pub fn xor_distance(x: &Kid, y: &Kid) -> Kid {
    x.xor(y)
}

/// Depth `d` of the sibling subtree `S(owner, d)` that contains `other`:
/// the length of the common prefix plus one. `None` when the KIDs are equal.
pub fn subtree_depth_of(owner: &Kid, other: &Kid) -> Option<u8> {
    let common = owner.common_prefix_len(other);
    (common < crate::identity::MAX_BITS).then(|| common as u8 + 1)
}

/// A routing-table entry. The KID must be the one the credentials prove.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub kid: Kid,
    pub credentials: Arc<Credentials>,
    pub address: PeerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    AlreadyPresent,
    BucketFull,
    Banned,
    OwnKid,
    Frozen,
}

#[derive(Debug, Clone)]
pub struct RoutingTable {
    owner: Kid,
    bits: u8,
    k: usize,
    /// `buckets[d - 1]` holds contacts of `S(owner, d)`.
    buckets: Vec<Vec<Contact>>,
    /// Buckets that ever held `k` contacts.
    saturated: Vec<bool>,
    /// Banned peers removed from each bucket.
    removed: Vec<usize>,
    banned: HashSet<Kid>,
    frozen: bool,
}

impl RoutingTable {
    pub fn new(owner: Kid, bits: u8, k: usize) -> Self {
        RoutingTable {
            owner,
            bits,
            k,
            buckets: vec![Vec::new(); bits as usize],
            saturated: vec![false; bits as usize],
            removed: vec![0; bits as usize],
            banned: HashSet::new(),
            frozen: false,
        }
    }

    pub fn owner(&self) -> Kid {
        self.owner
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Inserts a contact whose KID proof has already been checked.
    pub fn insert(&mut self, contact: Contact) -> InsertOutcome {
        if self.frozen {
            return InsertOutcome::Frozen;
        }
        if self.banned.contains(&contact.kid) {
            return InsertOutcome::Banned;
        }
        let Some(d) = subtree_depth_of(&self.owner, &contact.kid) else {
            return InsertOutcome::OwnKid;
        };
        if d > self.bits {
            return InsertOutcome::OwnKid;
        }
        let k = self.k;
        let bucket = &mut self.buckets[d as usize - 1];
        if bucket.iter().any(|c| c.kid == contact.kid) {
            InsertOutcome::AlreadyPresent
        } else if bucket.len() >= k {
            InsertOutcome::BucketFull
        } else {
            bucket.push(contact);
            if bucket.len() >= k {
                self.saturated[d as usize - 1] = true;
            }
            InsertOutcome::Inserted
        }
    }

    /// Permanently removes a peer, also after the table is frozen.
    pub fn ban(&mut self, kid: &Kid) -> bool {
        self.banned.insert(*kid);
        match subtree_depth_of(&self.owner, kid) {
            Some(d) if d <= self.bits => {
                let bucket = &mut self.buckets[d as usize - 1];
                let before = bucket.len();
                bucket.retain(|c| c.kid != *kid);
                let removed = before != bucket.len();
                if removed {
                    self.removed[d as usize - 1] += 1;
                }
                removed
            }
            _ => false,
        }
    }

    pub fn is_banned(&self, kid: &Kid) -> bool {
        self.banned.contains(kid)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Contacts of `S(owner, d)`, for `1 <= d <= bits`.
    pub fn bucket(&self, d: u8) -> &[Contact] {
        &self.buckets[d as usize - 1]
    }

    /// A bucket that never filled up holds every peer of its subtree that
    /// the owner has learned about.
    pub fn is_exhaustive(&self, d: u8) -> bool {
        !self.saturated[d as usize - 1]
    }

    /// Peers known in `S(owner, d)`, banned ones included.
    pub fn known_members(&self, d: u8) -> usize {
        self.bucket(d).len() + self.removed[d as usize - 1]
    }

    pub fn deepest_nonempty(&self) -> Option<u8> {
        (1..=self.bits).rev().find(|&d| !self.bucket(d).is_empty())
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.buckets.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, kid: &Kid) -> Option<&Contact> {
        let d = subtree_depth_of(&self.owner, kid)?;
        if d > self.bits {
            return None;
        }
        self.bucket(d).iter().find(|c| c.kid == *kid)
    }

    /// Up to `count` contacts ordered by XOR distance to `target`.
    pub fn closest(&self, target: &Kid, count: usize) -> Vec<Contact> {
        let mut all: Vec<&Contact> = self.contacts().collect();
        all.sort_by_key(|c| xor_distance(&c.kid, target));
        all.into_iter().take(count).cloned().collect()
    }
}
