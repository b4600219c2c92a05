//! Which signatures back a confirmed container, and checking them.
//!
//! Counters are taken relative to the responder `j`: `c_own` belongs to the
//! child containing `x_j`, `c_sib` to the other child. The signer `l` of
//! the sibling child is the rule-4 signer.

use thiserror::Error;

use crate::algebra;
use crate::container::{ConfirmedContainer, SignatureRole, SubtreeId};
use crate::identity::{ContainerSignature, CredentialVerifier, Hash, IdentityError, Kid};

/// Where the signer of a required signature must live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignerConstraint {
    /// The responder itself.
    Responder,
    /// A peer of the responder's own child subtree other than the responder.
    OwnChildOther,
    /// Any peer of the sibling child subtree; it becomes `l`.
    SiblingChild,
    /// `l` itself.
    SiblingResponder,
    /// A peer of the sibling child subtree other than `l`.
    SiblingChildOther,
}

/// The claim a required signature covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimTarget {
    Container,
    OwnChild,
    SiblingChild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requirement {
    pub role: SignatureRole,
    pub target: ClaimTarget,
    pub signer: SignerConstraint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureRequirement {
    pub rules: Vec<Requirement>,
}

impl SignatureRequirement {
    pub fn roles(&self) -> Vec<SignatureRole> {
        self.rules.iter().map(|r| r.role).collect()
    }

    pub fn requires(&self, role: SignatureRole) -> bool {
        self.rules.iter().any(|r| r.role == role)
    }

    /// Rules 3 and 5 need confirmation requests; the others do not.
    pub fn needs_confirmation(&self) -> bool {
        self.requires(SignatureRole::Rule3) || self.requires(SignatureRole::Rule5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleViolation {
    #[error("counters {c} != {c_own} + {c_sib}")]
    InconsistentCounters { c: u32, c_own: u32, c_sib: u32 },
    #[error("container does not match its hash")]
    HashMismatch,
    #[error("responder {0} is outside the container's subtree")]
    ResponderOutside(Kid),
    #[error("missing {0:?} signature")]
    Missing(SignatureRole),
    #[error("unexpected {0:?} signature")]
    Unexpected(SignatureRole),
    #[error("{0:?} signature covers the wrong claim")]
    WrongClaim(SignatureRole),
    #[error("{role:?} signer {signer} violates its constraint")]
    WrongSigner { role: SignatureRole, signer: Kid },
    #[error("{role:?} signature invalid: {err}")]
    Invalid { role: SignatureRole, err: IdentityError },
    #[error("compensation invalid: {0}")]
    Compensation(String),
}

pub fn required_signature_set(c: u32, c_own: u32, c_sib: u32) -> Result<SignatureRequirement, RuleViolation> {
    if c_own.checked_add(c_sib) != Some(c) || (c > 0 && c_own == 0) {
        return Err(RuleViolation::InconsistentCounters { c, c_own, c_sib });
    }
    use ClaimTarget as T;
    use SignatureRole::*;
    use SignerConstraint as S;
    let mut rules = vec![Requirement {
        role: Rule1,
        target: T::Container,
        signer: S::Responder,
    }];
    if c > 1 {
        rules.push(Requirement {
            role: Rule2,
            target: T::OwnChild,
            signer: S::Responder,
        });
        if c_own > 1 {
            rules.push(Requirement {
                role: Rule3,
                target: T::Container,
                signer: S::OwnChildOther,
            });
        }
        if c_sib > 0 {
            rules.push(Requirement {
                role: Rule4,
                target: T::SiblingChild,
                signer: S::SiblingChild,
            });
            rules.push(Requirement {
                role: Rule5,
                target: T::Container,
                signer: if c_sib == 1 {
                    S::SiblingResponder
                } else {
                    S::SiblingChildOther
                },
            });
        }
    }
    Ok(SignatureRequirement { rules })
}

/// Source of signature validity. Implementations may memoize.
pub trait SignatureCheck {
    fn signer_of(&self, sig: &ContainerSignature) -> Result<Kid, IdentityError>;
}

impl SignatureCheck for CredentialVerifier {
    fn signer_of(&self, sig: &ContainerSignature) -> Result<Kid, IdentityError> {
        sig.verify(self)
    }
}

/// The responder-relative view of a container's children.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildView {
    pub own: Option<(u32, Hash)>,
    pub sibling: Option<(u32, Hash)>,
    pub own_subtree: Option<SubtreeId>,
    pub sibling_subtree: Option<SubtreeId>,
}

/// Splits canonical child slots into own and sibling relative to `responder`.
pub fn child_view(cc: &crate::container::AggregateContainer, responder: &Kid, bits: u8) -> ChildView {
    let d = cc.subtree.depth();
    if d >= bits || cc.is_leaf() {
        return ChildView {
            own: None,
            sibling: None,
            own_subtree: None,
            sibling_subtree: None,
        };
    }
    let bit = responder.bit(d as usize);
    let own_subtree = cc.subtree.child(bit);
    let sibling_subtree = cc.subtree.child(!bit);
    let slot1 = cc.h1.map(|h| (cc.c1, h));
    let slot2 = cc.h2.map(|h| (cc.c2, h));
    let (own, sibling) = match (slot1, slot2) {
        (Some(a), None) => (Some(a), None),
        (a, b) if bit => (b, a),
        (a, b) => (a, b),
    };
    ChildView {
        own,
        sibling,
        own_subtree: Some(own_subtree),
        sibling_subtree: Some(sibling_subtree),
    }
}

/// A signature that passed its rule checks.
#[derive(Debug, Clone, Copy)]
pub struct CheckedSignature<'a> {
    pub role: SignatureRole,
    pub signer: Kid,
    pub sig: &'a ContainerSignature,
}

/// Checks a confirmed container served by `responder`. Returns every
/// verified signature, including those of compensation children.
pub fn check_confirmed<'a>(
    cc: &'a ConfirmedContainer,
    responder: &Kid,
    bits: u8,
    check: &dyn SignatureCheck,
) -> Result<Vec<CheckedSignature<'a>>, RuleViolation> {
    let mut out = Vec::new();
    check_into(cc, responder, bits, check, &mut out)?;
    Ok(out)
}

fn check_into<'a>(
    cc: &'a ConfirmedContainer,
    responder: &Kid,
    bits: u8,
    check: &dyn SignatureCheck,
    out: &mut Vec<CheckedSignature<'a>>,
) -> Result<(), RuleViolation> {
    let container = &cc.container;
    if !container.hash_matches() {
        return Err(RuleViolation::HashMismatch);
    }
    if !container.counters_consistent(bits) {
        return Err(RuleViolation::InconsistentCounters {
            c: container.c,
            c_own: container.c1,
            c_sib: container.c2,
        });
    }
    if !container.subtree.contains(responder) {
        return Err(RuleViolation::ResponderOutside(*responder));
    }
    let d = container.subtree.depth();
    let view = child_view(container, responder, bits);
    let c_own = view.own.map_or(0, |(c, _)| c);
    let c_sib = view.sibling.map_or(0, |(c, _)| c);
    let c_own = if container.is_leaf() { container.c } else { c_own };
    let mut req = required_signature_set(container.c, c_own, c_sib)?;
    if cc.compensation.is_some() {
        req.rules
            .retain(|r| !matches!(r.role, SignatureRole::Rule3 | SignatureRole::Rule5));
    }
    for (role, _) in &cc.signatures {
        if !req.requires(*role) {
            return Err(RuleViolation::Unexpected(*role));
        }
    }

    let mut l: Option<Kid> = None;
    for r in &req.rules {
        let sig = cc.signature(r.role).ok_or(RuleViolation::Missing(r.role))?;
        let (h, depth, c) = match r.target {
            ClaimTarget::Container => (container.hash, d, container.c),
            ClaimTarget::OwnChild => {
                let (c, h) = view.own.ok_or(RuleViolation::Missing(r.role))?;
                (h, d + 1, c)
            }
            ClaimTarget::SiblingChild => {
                let (c, h) = view.sibling.ok_or(RuleViolation::Missing(r.role))?;
                (h, d + 1, c)
            }
        };
        if sig.hash != h || sig.depth != depth || sig.counter != c {
            return Err(RuleViolation::WrongClaim(r.role));
        }
        let signer = check
            .signer_of(sig)
            .map_err(|err| RuleViolation::Invalid { role: r.role, err })?;
        let own_sub = view.own_subtree;
        let sib_sub = view.sibling_subtree;
        let ok = match r.signer {
            SignerConstraint::Responder => signer == *responder,
            SignerConstraint::OwnChildOther => {
                signer != *responder && own_sub.is_some_and(|s| s.contains(&signer))
            }
            SignerConstraint::SiblingChild => {
                let inside = sib_sub.is_some_and(|s| s.contains(&signer));
                if inside {
                    l = Some(signer);
                }
                inside
            }
            SignerConstraint::SiblingResponder => Some(signer) == l,
            SignerConstraint::SiblingChildOther => {
                Some(signer) != l && sib_sub.is_some_and(|s| s.contains(&signer))
            }
        };
        if !ok {
            return Err(RuleViolation::WrongSigner { role: r.role, signer });
        }
        out.push(CheckedSignature {
            role: r.role,
            signer,
            sig,
        });
    }

    if let Some(children) = &cc.compensation {
        check_compensation(cc, children, &view, responder, l, bits, check, out)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn check_compensation<'a>(
    cc: &'a ConfirmedContainer,
    children: &'a [ConfirmedContainer],
    view: &ChildView,
    responder: &Kid,
    l: Option<Kid>,
    bits: u8,
    check: &dyn SignatureCheck,
    out: &mut Vec<CheckedSignature<'a>>,
) -> Result<(), RuleViolation> {
    let bad = |m: &str| RuleViolation::Compensation(m.to_string());
    let expected = usize::from(view.own.is_some()) + usize::from(view.sibling.is_some());
    if children.len() != expected || expected == 0 {
        return Err(bad("wrong number of children"));
    }
    let mut sum: Option<algebra::Aggregate> = None;
    for child in children {
        let h = *child.hash();
        let (side_responder, subtree) = if view.own.is_some_and(|(c, oh)| oh == h && c == child.counter()) {
            (*responder, view.own_subtree)
        } else if view.sibling.is_some_and(|(c, sh)| sh == h && c == child.counter()) {
            (l.ok_or_else(|| bad("sibling child without rule-4 signer"))?, view.sibling_subtree)
        } else {
            return Err(bad("child does not match a slot"));
        };
        if Some(child.container.subtree) != subtree {
            return Err(bad("child subtree mismatch"));
        }
        check_into(child, &side_responder, bits, check, out)?;
        sum = Some(match sum {
            None => (*child.container.aggregate).clone(),
            Some(acc) => algebra::combine(&acc, &child.container.aggregate).map_err(|e| bad(&e.to_string()))?,
        });
    }
    if sum.as_ref() != Some(&*cc.container.aggregate) {
        return Err(bad("aggregate differs from combined children"));
    }
    Ok(())
}
