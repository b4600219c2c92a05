//! Equivocation detection and deviation proofs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{ContainerSignature, IdentityError, Kid};
use crate::protocol::rules::SignatureCheck;

/// Largest counter for which two conflicting signatures prove dishonesty.
pub const MAX_PROVABLE_COUNTER: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProofError {
    #[error("signatures are by different signers")]
    DifferentSigners,
    #[error("signatures differ in depth or counter")]
    DifferentClaims,
    #[error("signatures cover the same hash")]
    SameHash,
    #[error("counter {0} is too large to prove a deviation")]
    CounterTooLarge(u32),
    #[error(transparent)]
    Signature(#[from] IdentityError),
}

/// Two valid signatures by one peer on different containers with the same
/// depth and counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviationProof {
    pub culprit: Kid,
    pub first: ContainerSignature,
    pub second: ContainerSignature,
}

impl DeviationProof {
    /// Re-verifies the proof from scratch and returns the culprit's KID.
    pub fn verify(&self, check: &dyn SignatureCheck) -> Result<Kid, ProofError> {
        let (a, b) = (&self.first, &self.second);
        if a.signer.pk != b.signer.pk {
            return Err(ProofError::DifferentSigners);
        }
        if a.depth != b.depth || a.counter != b.counter {
            return Err(ProofError::DifferentClaims);
        }
        if a.hash == b.hash {
            return Err(ProofError::SameHash);
        }
        if a.counter > MAX_PROVABLE_COUNTER {
            return Err(ProofError::CounterTooLarge(a.counter));
        }
        let ka = check.signer_of(a)?;
        let kb = check.signer_of(b)?;
        if ka != kb || ka != self.culprit {
            return Err(ProofError::DifferentSigners);
        }
        Ok(ka)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("proof serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Compares a newly verified signature with the first signature seen for
/// the same signer, depth and counter.
pub fn detect_equivocation(
    signer: Kid,
    new: &ContainerSignature,
    known: Option<&ContainerSignature>,
) -> Option<DeviationProof> {
    let known = known?;
    (new.counter <= MAX_PROVABLE_COUNTER
        && known.depth == new.depth
        && known.counter == new.counter
        && known.hash != new.hash
        && known.signer.pk == new.signer.pk)
        .then(|| DeviationProof {
            culprit: signer,
            first: known.clone(),
            second: new.clone(),
        })
}

/// First signature per (signer, depth, counter) for small counters.
#[derive(Debug, Clone, Default)]
pub struct SignatureLedger {
    first: HashMap<(Kid, u8, u32), ContainerSignature>,
}

impl SignatureLedger {
    /// Records a verified signature; returns a proof if it conflicts with
    /// an earlier one.
    pub fn observe(&mut self, signer: Kid, sig: &ContainerSignature) -> Option<DeviationProof> {
        if sig.counter > MAX_PROVABLE_COUNTER {
            return None;
        }
        let key = (signer, sig.depth, sig.counter);
        match self.first.get(&key) {
            Some(known) => detect_equivocation(signer, sig, Some(known)),
            None => {
                self.first.insert(key, sig.clone());
                None
            }
        }
    }

    pub fn forget(&mut self, signer: &Kid) {
        self.first.retain(|(k, _, _), _| k != signer);
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}
