//! JSON-lines transcripts and offline root-inclusion checks.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::container::{verify_chain, AggregateContainer, ChainVerdict};
use crate::harness::config::ScenarioConfig;
use crate::harness::sim::{MessageRecord, Simulation};
use crate::identity::{Hash, Kid};
use crate::overlay::PeerId;
use crate::protocol::StateEvent;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Scenario {
        config: ScenarioConfig,
    },
    Peer {
        peer: PeerId,
        kid: Kid,
        #[serde(with = "crate::serde_hex")]
        leaf: Hash,
        dishonest: bool,
    },
    Message(MessageRecord),
    State(StateEvent),
}

/// Writes the scenario, the peer table, all messages and all state events.
/// The simulation must have been created with transcripts enabled.
pub fn write_transcript(sim: &Simulation, out: &mut impl Write) -> std::io::Result<()> {
    let mut line = |r: &Record| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")
    };
    line(&Record::Scenario {
        config: sim.config.clone(),
    })?;
    for (i, info) in sim.info.iter().enumerate() {
        line(&Record::Peer {
            peer: i,
            kid: info.kid,
            leaf: info.leaf_hash,
            dishonest: info.dishonest,
        })?;
    }
    for m in sim.take_messages() {
        line(&Record::Message(m))?;
    }
    for e in sim.take_state_events() {
        line(&Record::State(e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyOutcome {
    Valid,
    Invalid(String),
    Incomplete(Hash),
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("cannot read transcript: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer {0} is not in the transcript")]
    NoSuchPeer(PeerId),
}

fn container_of(v: &serde_json::Value) -> Option<&serde_json::Value> {
    match v.get("event")?.as_str()? {
        "confirmed" | "sibling" => v.get("container"),
        _ => None,
    }
}

/// A parsed transcript, ready to check any number of peers.
#[derive(Debug, Default)]
pub struct Transcript {
    witnesses: HashMap<Hash, AggregateContainer>,
    corrupt_hashes: Vec<Hash>,
    corrupt_peers: Vec<PeerId>,
    leaves: BTreeMap<PeerId, Hash>,
    roots: BTreeMap<Hash, u32>,
    bits: Option<u8>,
    broken: Option<String>,
}

fn hash_field(v: &serde_json::Value, key: &str) -> Option<Hash> {
    let raw = hex::decode(v.get(key)?.as_str()?).ok()?;
    <Hash>::try_from(raw).ok()
}

impl Transcript {
    /// A container record that does not decode, or whose bytes do not
    /// hash to its claimed hash, taints both that hash and the peer that recorded it; a line that is
    /// not JSON taints everything.
    pub fn parse(input: impl BufRead) -> Result<Self, TranscriptError> {
        let mut t = Transcript::default();
        for (no, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => {
                    t.broken.get_or_insert(format!("line {} is not valid JSON: {e}", no + 1));
                    continue;
                }
            };
            match v.get("record").and_then(|r| r.as_str()) {
                Some("scenario") => match serde_json::from_value::<Record>(v) {
                    Ok(Record::Scenario { config }) => t.bits = Some(config.bits),
                    _ => {
                        t.broken.get_or_insert(format!("line {} has an unreadable scenario", no + 1));
                    }
                },
                Some("peer") => match serde_json::from_value::<Record>(v) {
                    Ok(Record::Peer { peer, leaf, .. }) => {
                        t.leaves.insert(peer, leaf);
                    }
                    _ => {
                        t.broken.get_or_insert(format!("line {} has an unreadable peer entry", no + 1));
                    }
                },
                Some("state") => {
                    if let Some(c) = container_of(&v) {
                        let recorder = v.get("peer").and_then(|p| p.as_u64()).map(|p| p as PeerId);
                        match serde_json::from_value::<AggregateContainer>(c.clone()) {
                            Ok(c) if c.hash_matches() => {
                                t.witnesses.insert(c.hash, c);
                            }
                            _ => {
                                t.corrupt_hashes.extend(hash_field(c, "hash"));
                                t.corrupt_peers.extend(recorder);
                            }
                        }
                    }
                    if v.get("event").and_then(|e| e.as_str()) == Some("root") {
                        match hash_field(&v, "hash") {
                            Some(h) => *t.roots.entry(h).or_default() += 1,
                            None => {
                                t.broken.get_or_insert(format!("line {} has an unreadable root", no + 1));
                            }
                        }
                    }
                }
                Some("message") => {}
                _ => {
                    t.broken.get_or_insert(format!("line {} has no known record type", no + 1));
                }
            }
        }
        Ok(t)
    }

    pub fn peers(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.leaves.keys().copied()
    }

    /// Checks that `peer`'s leaf is reachable from the root most peers
    /// reported, through containers recorded in the transcript.
    pub fn verify(&self, peer: PeerId) -> Result<VerifyOutcome, TranscriptError> {
        let leaf = *self.leaves.get(&peer).ok_or(TranscriptError::NoSuchPeer(peer))?;
        if let Some(why) = &self.broken {
            return Ok(VerifyOutcome::Invalid(why.clone()));
        }
        if self.corrupt_peers.contains(&peer) {
            return Ok(VerifyOutcome::Invalid(format!("a container recorded by peer {peer} is corrupt")));
        }
        let Some(bits) = self.bits else {
            return Ok(VerifyOutcome::Invalid("transcript has no scenario".into()));
        };
        // Ties go to the smallest hash so the choice is deterministic.
        let Some((&root_hash, _)) = self.roots.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            return Ok(VerifyOutcome::Invalid("transcript has no root".into()));
        };
        let Some(root) = self.witnesses.get(&root_hash) else {
            return Ok(VerifyOutcome::Incomplete(root_hash));
        };
        let verdict = verify_chain(root, &self.witnesses, &leaf, bits);
        let corrupt = |h: &Hash| VerifyOutcome::Invalid(format!("container {} is corrupt", hex::encode(h)));
        // Walk the path once more to see whether it touches a tainted hash.
        if let Some(h) = chain_hashes(root, &self.witnesses, &leaf)
            .iter()
            .find(|h| self.corrupt_hashes.contains(h))
        {
            return Ok(corrupt(h));
        }
        Ok(match verdict {
            ChainVerdict::Valid => VerifyOutcome::Valid,
            ChainVerdict::Invalid(why) => VerifyOutcome::Invalid(why),
            ChainVerdict::Incomplete(h) if self.corrupt_hashes.contains(&h) => corrupt(&h),
            ChainVerdict::Incomplete(h) => VerifyOutcome::Incomplete(h),
        })
    }
}

pub fn verify_transcript(input: impl BufRead, peer: PeerId) -> Result<VerifyOutcome, TranscriptError> {
    Transcript::parse(input)?.verify(peer)
}

/// Hashes visited from `root` towards `leaf`, including the first missing one.
fn chain_hashes(root: &AggregateContainer, witnesses: &HashMap<Hash, AggregateContainer>, leaf: &Hash) -> Vec<Hash> {
    let Some(target) = witnesses.get(leaf).map(|l| l.subtree.prefix()) else {
        return vec![root.hash, *leaf];
    };
    let mut out = vec![root.hash];
    let mut current = root;
    while current.hash != *leaf && !current.is_leaf() {
        let next = match (current.h1, current.h2) {
            (Some(h1), None) => h1,
            (Some(h1), Some(h2)) => {
                if target.bit(current.subtree.depth() as usize) {
                    h2
                } else {
                    h1
                }
            }
            _ => break,
        };
        out.push(next);
        match witnesses.get(&next) {
            Some(c) if c.subtree.depth() > current.subtree.depth() => current = c,
            _ => break,
        }
    }
    out
}
