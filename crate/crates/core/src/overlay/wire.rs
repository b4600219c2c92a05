//! Signed wire messages exchanged between peers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::{AggregateContainer, ConfirmedContainer};
use crate::identity::{sha256, verify_signature, ContainerSignature, Hash, Credentials, Kid, PeerKeyPair, SIGNATURE_BYTES};
use crate::overlay::dht::DhtKey;
use crate::overlay::Contact;
use crate::protocol::DeviationProof;
use crate::serde_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    /// LOOKUP: contacts closest to `target`.
    FindNode { target: Kid },
    /// PULL_CONTAINER: the responder's confirmed container for its own
    /// subtree at `depth`.
    Pull { depth: u8 },
    /// CONFIRM: sign `candidate` if it equals the responder's own candidate.
    /// `evidence` carries the signatures backing the candidate's children.
    Confirm {
        candidate: Arc<AggregateContainer>,
        evidence: Vec<ContainerSignature>,
    },
    Store {
        #[serde(with = "serde_hex")]
        key: DhtKey,
        #[serde(with = "serde_hex::vec")]
        value: Vec<u8>,
    },
    Get {
        #[serde(with = "serde_hex")]
        key: DhtKey,
    },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::FindNode { .. } => "LOOKUP",
            Request::Pull { .. } => "PULL_CONTAINER",
            Request::Confirm { .. } => "CONFIRM",
            Request::Store { .. } => "STORE",
            Request::Get { .. } => "GET",
        }
    }

    /// Container signatures carried by the request.
    pub fn signatures(&self) -> Vec<&ContainerSignature> {
        match self {
            Request::Confirm { evidence, .. } => evidence.iter().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DenyReason {
    BadSignature,
    Replay,
    Ineligible,
    Excluded,
    Unauthorized,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Nodes(Vec<Contact>),
    Container(ConfirmedContainer),
    Signature(ContainerSignature),
    /// The responder's own candidate differs, or it will not sign.
    Refusal {
        candidate: Option<Arc<AggregateContainer>>,
        evidence: Vec<ContainerSignature>,
    },
    Denied(DenyReason),
    Stored(bool),
    Value(#[serde(with = "serde_hex::option_vec")] Option<Vec<u8>>),
}

impl Response {
    /// Container signatures carried by the response, including those of
    /// compensation children.
    pub fn signatures(&self) -> Vec<&ContainerSignature> {
        fn walk<'a>(cc: &'a ConfirmedContainer, out: &mut Vec<&'a ContainerSignature>) {
            out.extend(cc.signatures.iter().map(|(_, s)| s));
            for child in cc.compensation.iter().flatten() {
                walk(child, out);
            }
        }
        let mut out = Vec::new();
        match self {
            Response::Container(cc) => walk(cc, &mut out),
            Response::Signature(s) => out.push(s),
            Response::Refusal { evidence, .. } => out.extend(evidence.iter()),
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Request(Request),
    Response(Response),
}

/// A payload signed by its sender. Deviation proofs known to the sender
/// travel along with aggregation messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: Arc<Credentials>,
    pub nonce: u64,
    pub payload: Payload,
    pub proofs: Vec<Arc<DeviationProof>>,
    #[serde(with = "serde_hex")]
    pub signature: [u8; SIGNATURE_BYTES],
}

/// Digest of the signed fields; signing the digest keeps large payloads cheap.
fn signing_bytes(nonce: u64, payload: &Payload, proofs: &[Arc<DeviationProof>]) -> Hash {
    let mut bytes = b"AVEN".to_vec();
    bincode::serialize_into(&mut bytes, &(nonce, payload, proofs)).expect("payload serializes");
    sha256(&bytes)
}

impl Envelope {
    pub fn seal(
        keys: &PeerKeyPair,
        sender: Arc<Credentials>,
        nonce: u64,
        payload: Payload,
        proofs: Vec<Arc<DeviationProof>>,
    ) -> Self {
        let signature = keys.sign(&signing_bytes(nonce, &payload, &proofs));
        Envelope {
            sender,
            nonce,
            payload,
            proofs,
            signature,
        }
    }

    /// Checks the signature against the sender's public key. Eligibility
    /// (the token) is checked separately by the receiver.
    pub fn signature_valid(&self) -> bool {
        verify_signature(
            &self.sender.pk,
            &signing_bytes(self.nonce, &self.payload, &self.proofs),
            &self.signature,
        )
    }
}
