//! Which requests a responder answers.

use crate::container::SubtreeId;
use crate::identity::Kid;

/// A pull for the responder's container at `depth` is answered for peers of
/// the same subtree or its sibling, i.e. of `S̄(x_j, depth - 1)`.
pub fn authorize_pull(responder: &Kid, requester: &Kid, depth: u8, bits: u8) -> bool {
    if depth > bits {
        return false;
    }
    if depth == 0 {
        return true;
    }
    SubtreeId::new(*responder, depth - 1).contains(requester)
}

/// Confirmation requests stay inside the candidate's subtree.
pub fn authorize_confirm(responder: &Kid, requester: &Kid, candidate: &SubtreeId) -> bool {
    candidate.contains(responder) && candidate.contains(requester)
}
