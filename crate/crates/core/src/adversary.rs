//! Byzantine behaviors for dishonest peers.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{Aggregate, AlgebraSpec, Rational};
use crate::container::{build_leaf_container, build_parent_container, AggregateContainer, ConfirmedContainer, SignatureRole};
use crate::identity::{sign_container_claim, Credentials, Kid, PeerKeyPair};
use crate::overlay::wire::{Request, Response};
use crate::overlay::Contact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Behavior {
    /// Alter the aggregate of served containers without rehashing.
    CorruptAggregate,
    /// Inflate the counter of served containers, rehash and re-sign.
    ForgeCounter,
    /// Serve alternating versions of single-peer containers and sign any
    /// confirmation request.
    Equivocate,
    /// Never answer confirmation requests.
    BlockConfirmation,
    /// Pull containers the requester is not entitled to.
    OverreachRequests,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Targeting {
    #[default]
    Random,
    /// The dishonest peers are those with the smallest KIDs, which puts
    /// them into one corner of the tree.
    TargetedKidPrefix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub fraction: f64,
    pub behaviors: BTreeSet<Behavior>,
    pub targeting: Targeting,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdversaryError {
    #[error("dishonest fraction {0} must lie in [0, 0.5)")]
    Fraction(f64),
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<(), AdversaryError> {
        if !(0.0..0.5).contains(&self.fraction) {
            return Err(AdversaryError::Fraction(self.fraction));
        }
        Ok(())
    }

    pub fn has(&self, b: Behavior) -> bool {
        self.behaviors.contains(&b)
    }
}

/// Picks `floor(fraction * n)` dishonest peers.
pub fn seed_dishonest_set<R: Rng>(kids: &[Kid], config: &AdversaryConfig, rng: &mut R) -> BTreeSet<usize> {
    let n = kids.len();
    let m = (config.fraction * n as f64).floor() as usize;
    match config.targeting {
        Targeting::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.into_iter().take(m).collect()
        }
        Targeting::TargetedKidPrefix => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| (kids[i], i));
            idx.into_iter().take(m).collect()
        }
    }
}

/// What a dishonest peer knows to transform its messages.
pub struct AdversaryState {
    pub behaviors: BTreeSet<Behavior>,
    keys: PeerKeyPair,
    creds: Arc<Credentials>,
    kid: Kid,
    bits: u8,
    alternate_leaf: AggregateContainer,
    pulls_served: u64,
}

impl AdversaryState {
    /// `alternate` is a second initial aggregate used for equivocation.
    pub fn new(
        behaviors: BTreeSet<Behavior>,
        keys: PeerKeyPair,
        creds: Arc<Credentials>,
        kid: Kid,
        bits: u8,
        spec: &AlgebraSpec,
        alternate: Aggregate,
    ) -> Self {
        let alternate_leaf = build_leaf_container(alternate, kid, spec, bits).expect("valid alternate aggregate");
        AdversaryState {
            behaviors,
            keys,
            creds,
            kid,
            bits,
            alternate_leaf,
            pulls_served: 0,
        }
    }

    pub fn has(&self, b: Behavior) -> bool {
        self.behaviors.contains(&b)
    }

    /// The alternate leaf passed up to `depth` as a single-peer container.
    fn alternate_at(&self, depth: u8) -> ConfirmedContainer {
        let mut c = self.alternate_leaf.clone();
        while c.subtree.depth() > depth {
            c = build_parent_container(&c, None).expect("pass-up");
        }
        let sig = sign_container_claim(&self.keys, &self.creds, &c.hash, depth, 1);
        ConfirmedContainer {
            container: Arc::new(c),
            signatures: vec![(SignatureRole::Rule1, sig)],
            compensation: None,
        }
    }

    /// Transforms the honest response to `request`. `None` means silence.
    pub fn apply(&mut self, request: &Request, honest: Option<Response>) -> Option<Response> {
        match request {
            Request::Confirm { candidate, .. } => {
                if self.has(Behavior::BlockConfirmation) {
                    return None;
                }
                if self.has(Behavior::Equivocate) && candidate.subtree.contains(&self.kid) {
                    let sig = sign_container_claim(
                        &self.keys,
                        &self.creds,
                        &candidate.hash,
                        candidate.subtree.depth(),
                        candidate.c,
                    );
                    return Some(Response::Signature(sig));
                }
                honest
            }
            Request::Pull { depth } => {
                let Some(Response::Container(mut cc)) = honest else {
                    return honest;
                };
                if self.has(Behavior::Equivocate) && cc.counter() == 1 {
                    self.pulls_served += 1;
                    if self.pulls_served % 2 == 0 {
                        cc = self.alternate_at(*depth);
                    }
                }
                if self.has(Behavior::ForgeCounter) {
                    let old = &cc.container;
                    let forged = AggregateContainer::seal(
                        old.aggregate.clone(),
                        old.c + 1,
                        (old.c1, old.h1),
                        (old.c2, old.h2),
                        old.subtree,
                    );
                    let sig = sign_container_claim(&self.keys, &self.creds, &forged.hash, forged.subtree.depth(), forged.c);
                    cc.container = Arc::new(forged);
                    cc.signatures.retain(|(r, _)| *r != SignatureRole::Rule1);
                    cc.signatures.insert(0, (SignatureRole::Rule1, sig));
                }
                if self.has(Behavior::CorruptAggregate) {
                    let mut c = (*cc.container).clone();
                    let mut entries = c.aggregate.entries().to_vec();
                    if let Some(first) = entries.first_mut() {
                        *first += Rational::from_integer(1);
                    }
                    c.aggregate = Arc::new(Aggregate::from_entries(entries));
                    cc.container = Arc::new(c);
                }
                Some(Response::Container(cc))
            }
            _ => honest,
        }
    }

    /// Pulls for `d + 1` and for the leaf level at each contact of bucket `d`.
    /// Both lie outside what the contact may serve us.
    pub fn overreach_requests(&self, buckets: &[(u8, Vec<Contact>)]) -> Vec<(Contact, Request)> {
        let mut out = Vec::new();
        for (d, contacts) in buckets {
            for c in contacts {
                if *d < self.bits {
                    out.push((c.clone(), Request::Pull { depth: d + 1 }));
                }
                if d + 1 < self.bits {
                    out.push((c.clone(), Request::Pull { depth: self.bits }));
                }
            }
        }
        out
    }
}
