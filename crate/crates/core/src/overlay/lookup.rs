//! Iterative node lookup as a pure state machine. The caller performs the
//! queries; this module only decides whom to ask next and when to stop.

use std::collections::{BTreeMap, HashSet};

use crate::identity::Kid;
use crate::overlay::{xor_distance, Contact};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupMode {
    /// Stop as soon as the closest unqueried contact is not closer than the
    /// closest contact already queried.
    Greedy,
    /// Query until the `k` closest known contacts have all answered.
    Exhaustive,
}

#[derive(Debug, Clone)]
pub struct LookupState {
    target: Kid,
    k: usize,
    mode: LookupMode,
    owner: Kid,
    /// Known contacts keyed by distance to the target.
    shortlist: BTreeMap<Kid, Contact>,
    queried: HashSet<Kid>,
    failed: HashSet<Kid>,
    best_queried: Option<Kid>,
    cycles: usize,
}

impl LookupState {
    pub fn new(owner: Kid, target: Kid, k: usize, mode: LookupMode, seed: Vec<Contact>) -> Self {
        let mut s = LookupState {
            target,
            k,
            mode,
            owner,
            shortlist: BTreeMap::new(),
            queried: HashSet::new(),
            failed: HashSet::new(),
            best_queried: None,
            cycles: 0,
        };
        s.merge(seed);
        s
    }

    fn merge(&mut self, contacts: Vec<Contact>) {
        for c in contacts {
            if c.kid == self.owner || self.failed.contains(&c.kid) {
                continue;
            }
            self.shortlist.entry(xor_distance(&c.kid, &self.target)).or_insert(c);
        }
    }

    /// The next contact to query, or `None` when the lookup is finished.
    pub fn next_query(&self) -> Option<Contact> {
        match self.mode {
            LookupMode::Greedy => {
                let (dist, c) = self
                    .shortlist
                    .iter()
                    .find(|(_, c)| !self.queried.contains(&c.kid))?;
                match self.best_queried {
                    Some(best) if *dist >= best => None,
                    _ => Some(c.clone()),
                }
            }
            LookupMode::Exhaustive => self
                .shortlist
                .values()
                .take(self.k)
                .find(|c| !self.queried.contains(&c.kid))
                .cloned(),
        }
    }

    pub fn record_response(&mut self, from: &Kid, contacts: Vec<Contact>) {
        self.cycles += 1;
        self.queried.insert(*from);
        let dist = xor_distance(from, &self.target);
        if self.best_queried.map_or(true, |b| dist < b) {
            self.best_queried = Some(dist);
        }
        self.merge(contacts);
    }

    pub fn record_failure(&mut self, from: &Kid) {
        self.cycles += 1;
        self.queried.insert(*from);
        self.failed.insert(*from);
        self.shortlist.remove(&xor_distance(from, &self.target));
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    /// Up to `k` closest contacts that did not fail.
    pub fn result(&self) -> Vec<Contact> {
        self.shortlist.values().take(self.k).cloned().collect()
    }
}
