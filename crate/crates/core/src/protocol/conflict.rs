//! Majority decision after a confirmation could not be completed.

use std::collections::BTreeMap;

use crate::identity::{Hash, Kid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictAction {
    /// Redo the previous epoch to recompute the own child.
    RepeatChildAggregation,
    /// Redo the current epoch with a fresh sibling pull.
    RepeatSiblingPull,
    /// Proceed with the current candidate, compensating missing signatures.
    Keep,
}

/// One peer's view of the two children of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildVote {
    pub voter: Kid,
    pub own: Option<Hash>,
    pub sibling: Option<Hash>,
}

/// Our side of the conflict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OwnChildren {
    pub me: Kid,
    pub own: (u32, Hash),
    pub sibling: Option<(u32, Hash)>,
    /// Counter of the candidate itself.
    pub c: u32,
}

/// Counts each voter once (the first vote wins) and includes our own vote.
/// A child is revised only with a strict majority for a different hash.
/// Containers with small counters are never revised: c=1 children are
/// initial aggregates, and a revised candidate with c<=3 would carry a
/// second signature of ours for the same claim.
pub fn resolve_conflict(mine: &OwnChildren, votes: &[ChildVote], repeats_left: u32) -> ConflictAction {
    if repeats_left == 0 || mine.c <= super::detect::MAX_PROVABLE_COUNTER {
        return ConflictAction::Keep;
    }
    let mut seen: BTreeMap<Kid, ChildVote> = BTreeMap::new();
    seen.insert(
        mine.me,
        ChildVote {
            voter: mine.me,
            own: Some(mine.own.1),
            sibling: mine.sibling.map(|s| s.1),
        },
    );
    for v in votes {
        seen.entry(v.voter).or_insert(*v);
    }
    let total = seen.len();
    let majority_other = |pick: fn(&ChildVote) -> Option<Hash>, ours: Option<Hash>| {
        let mut tally: BTreeMap<Option<Hash>, usize> = BTreeMap::new();
        for v in seen.values() {
            *tally.entry(pick(v)).or_default() += 1;
        }
        tally
            .into_iter()
            .any(|(h, n)| h != ours && 2 * n > total)
    };
    if mine.own.0 > 1 && majority_other(|v| v.own, Some(mine.own.1)) {
        return ConflictAction::RepeatChildAggregation;
    }
    if let Some((c_sib, h_sib)) = mine.sibling {
        if c_sib > 1 && majority_other(|v| v.sibling, Some(h_sib)) {
            return ConflictAction::RepeatSiblingPull;
        }
    }
    ConflictAction::Keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::KID_BYTES;

    fn kid(i: u8) -> Kid {
        Kid([i; KID_BYTES])
    }

    fn mine(c_own: u32, c_sib: u32) -> OwnChildren {
        OwnChildren {
            me: kid(0),
            own: (c_own, [1; 32]),
            sibling: (c_sib > 0).then_some((c_sib, [2; 32])),
            c: c_own + c_sib,
        }
    }

    fn vote(i: u8, own: u8, sib: u8) -> ChildVote {
        ChildVote {
            voter: kid(i),
            own: Some([own; 32]),
            sibling: Some([sib; 32]),
        }
    }

    #[test]
    fn majority_for_other_own_child_repeats_child() {
        let votes = [vote(1, 9, 2), vote(2, 9, 2), vote(3, 9, 2)];
        assert_eq!(
            resolve_conflict(&mine(4, 4), &votes, 3),
            ConflictAction::RepeatChildAggregation
        );
    }

    #[test]
    fn majority_for_other_sibling_repeats_pull() {
        let votes = [vote(1, 1, 8), vote(2, 1, 8)];
        assert_eq!(resolve_conflict(&mine(4, 4), &votes, 3), ConflictAction::RepeatSiblingPull);
    }

    #[test]
    fn ties_and_agreement_keep() {
        assert_eq!(resolve_conflict(&mine(4, 4), &[vote(1, 9, 2)], 3), ConflictAction::Keep);
        let agree = [vote(1, 1, 2), vote(2, 1, 2), vote(3, 9, 2)];
        assert_eq!(resolve_conflict(&mine(4, 4), &agree, 3), ConflictAction::Keep);
    }

    #[test]
    fn duplicate_voters_count_once() {
        let votes = [vote(1, 9, 2), vote(1, 9, 2), vote(1, 9, 2)];
        assert_eq!(resolve_conflict(&mine(4, 4), &votes, 3), ConflictAction::Keep);
    }

    #[test]
    fn leaves_and_small_candidates_are_never_revised() {
        let votes = [vote(1, 1, 8), vote(2, 1, 8), vote(3, 1, 8)];
        assert_eq!(resolve_conflict(&mine(4, 1), &votes, 3), ConflictAction::Keep);
        assert_eq!(resolve_conflict(&mine(1, 2), &votes, 3), ConflictAction::Keep);
        assert_eq!(resolve_conflict(&mine(4, 4), &votes, 0), ConflictAction::Keep);
    }
}
