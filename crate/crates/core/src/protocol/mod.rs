//! Per-peer aggregation protocol: epochs, confirmation, detection, repair.

pub mod authorize;
pub mod conflict;
pub mod detect;
pub mod peer;
pub mod rules;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::algebra::AlgebraSpec;
use crate::identity::{
    ContainerSignature, CredentialVerifier, Credentials, Hash, IdentityError, Kid, PublicKey, SIGNATURE_BYTES,
};

pub use authorize::{authorize_confirm, authorize_pull};
pub use conflict::{resolve_conflict, ChildVote, ConflictAction, OwnChildren};
pub use detect::{detect_equivocation, DeviationProof, ProofError, SignatureLedger, MAX_PROVABLE_COUNTER};
pub use peer::{Network, Peer, PeerReport, Phase, StateEvent};
pub use rules::{check_confirmed, required_signature_set, RuleViolation, SignatureCheck, SignatureRequirement};

pub const DEFAULT_RETRY_BUDGET: u32 = 3;

/// What a peer does when a sibling cannot be obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbortMode {
    Strict,
    /// Continue without the subtree and flag the result incomplete.
    #[default]
    Degrade,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolParams {
    pub bits: u8,
    pub k: usize,
    pub retry_budget: u32,
    pub mode: AbortMode,
    pub spec: AlgebraSpec,
}

/// Extra root signatures: `min(k, ceil(2 log2 c))`, none for `c <= 1`.
pub fn root_confirmations(k: usize, c_root: u32) -> usize {
    if c_root <= 1 {
        return 0;
    }
    let log = (c_root as f64).log2();
    k.min((2.0 * log).ceil() as usize)
}

type SigKey = (PublicKey, [u8; SIGNATURE_BYTES], Hash, u8, u32);

/// Memoized credential and signature checks. Both are pure functions of
/// their inputs, so one cache can serve every peer of a simulation.
pub struct VerifyCache {
    verifier: CredentialVerifier,
    credentials: RefCell<HashMap<Credentials, Result<Kid, IdentityError>>>,
    signatures: RefCell<HashMap<SigKey, Result<Kid, IdentityError>>>,
}

impl VerifyCache {
    pub fn new(verifier: CredentialVerifier) -> Self {
        VerifyCache {
            verifier,
            credentials: RefCell::new(HashMap::new()),
            signatures: RefCell::new(HashMap::new()),
        }
    }

    pub fn verifier(&self) -> &CredentialVerifier {
        &self.verifier
    }

    pub fn kid_of(&self, creds: &Arc<Credentials>) -> Result<Kid, IdentityError> {
        if let Some(r) = self.credentials.borrow().get(creds.as_ref()) {
            return r.clone();
        }
        let r = self.verifier.kid_of(creds);
        self.credentials.borrow_mut().insert((**creds).clone(), r.clone());
        r
    }
}

impl SignatureCheck for VerifyCache {
    fn signer_of(&self, sig: &ContainerSignature) -> Result<Kid, IdentityError> {
        let key = (sig.signer.pk, sig.sig, sig.hash, sig.depth, sig.counter);
        if let Some(r) = self.signatures.borrow().get(&key) {
            return r.clone();
        }
        let msg = crate::identity::claim_message(&sig.hash, sig.depth, sig.counter);
        let r = if crate::identity::verify_signature(&sig.signer.pk, &msg, &sig.sig) {
            self.kid_of(&sig.signer)
        } else {
            Err(IdentityError::BadSignature)
        };
        self.signatures.borrow_mut().insert(key, r.clone());
        r
    }
}
