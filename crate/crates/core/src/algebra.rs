//! Aggregation algebra.
//!
//! Aggregates are vectors of exact non-negative rationals combined by
//! component-wise addition. Plurality voting uses one dimension per option;
//! ranked voting maps every ranking of `d` options to one of `d!` plurality
//! options, indexed lexicographically.

use std::fmt;

use num_rational::Ratio;
use num_traits::{CheckedAdd, One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact non-negative rational used for aggregate entries.
pub type Rational = Ratio<u64>;

/// Largest option count accepted for ranked encodings (8! = 40320 dimensions).
pub const MAX_RANKED_OPTIONS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AlgebraError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("choice {choice} out of range for {options} options")]
    ChoiceOutOfRange { choice: usize, options: u32 },
    #[error("ranking is not a permutation of 0..{0}")]
    NotAPermutation(u32),
    #[error("ranked encoding of {0} options exceeds the supported maximum of {MAX_RANKED_OPTIONS}")]
    DimensionTooLarge(u32),
    #[error("invalid algebra: {0}")]
    InvalidSpec(&'static str),
    #[error("rational overflow while combining aggregates")]
    Overflow,
    #[error("malformed aggregate encoding")]
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgebraKind {
    Plurality,
    Ranked,
}

impl fmt::Display for AlgebraKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlgebraKind::Plurality => f.write_str("plurality"),
            AlgebraKind::Ranked => f.write_str("ranked"),
        }
    }
}

/// Instance of the aggregation algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlgebraSpec {
    pub kind: AlgebraKind,
    pub options: u32,
    pub splitting: bool,
}

impl AlgebraSpec {
    pub fn plurality(options: u32) -> Self {
        AlgebraSpec {
            kind: AlgebraKind::Plurality,
            options,
            splitting: false,
        }
    }

    pub fn ranked(options: u32) -> Self {
        AlgebraSpec {
            kind: AlgebraKind::Ranked,
            options,
            splitting: false,
        }
    }

    pub fn with_splitting(mut self, splitting: bool) -> Self {
        self.splitting = splitting;
        self
    }

    pub fn validate(&self) -> Result<(), AlgebraError> {
        if self.options < 2 {
            return Err(AlgebraError::InvalidSpec("at least two options are required"));
        }
        if self.kind == AlgebraKind::Ranked && self.options > MAX_RANKED_OPTIONS {
            return Err(AlgebraError::DimensionTooLarge(self.options));
        }
        Ok(())
    }

    /// Number of aggregate entries: `d` for plurality, `d!` for ranked.
    pub fn dimension(&self) -> usize {
        match self.kind {
            AlgebraKind::Plurality => self.options as usize,
            AlgebraKind::Ranked => factorial(self.options as usize),
        }
    }

    pub fn zero(&self) -> Aggregate {
        Aggregate::zero(self.dimension())
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product::<usize>().max(1)
}

/// A vector of non-negative rationals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Aggregate {
    entries: Vec<Rational>,
}

impl Aggregate {
    pub fn zero(dimension: usize) -> Self {
        Aggregate {
            entries: vec![Rational::zero(); dimension],
        }
    }

    pub fn from_entries(entries: Vec<Rational>) -> Self {
        Aggregate { entries }
    }

    pub fn from_counts(counts: &[u64]) -> Self {
        Aggregate {
            entries: counts.iter().map(|&c| Rational::from_integer(c)).collect(),
        }
    }

    pub fn unit(dimension: usize, index: usize) -> Self {
        let mut a = Aggregate::zero(dimension);
        a.entries[index] = Rational::one();
        a
    }

    pub fn entries(&self) -> &[Rational] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.entries.len()
    }

    /// Manhattan norm. Entries are non-negative, so this is the plain sum.
    pub fn norm(&self) -> Result<Rational, AlgebraError> {
        self.entries
            .iter()
            .try_fold(Rational::zero(), |acc, e| acc.checked_add(e))
            .ok_or(AlgebraError::Overflow)
    }

    /// Canonical byte encoding used inside container hashes: 4-byte
    /// big-endian dimension, then per entry the reduced numerator and
    /// denominator as 8-byte big-endian integers.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.numer().to_be_bytes());
            out.extend_from_slice(&e.denom().to_be_bytes());
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 16 * self.entries.len()
    }

    /// Inverse of [`Aggregate::encode_into`]. Returns the aggregate and the
    /// number of bytes consumed. Non-reduced or zero-denominator entries are
    /// rejected so that decoding is the exact inverse of encoding.
    pub fn decode(bytes: &[u8]) -> Result<(Aggregate, usize), AlgebraError> {
        let dim_bytes: [u8; 4] = bytes
            .get(..4)
            .and_then(|b| b.try_into().ok())
            .ok_or(AlgebraError::Malformed)?;
        let dim = u32::from_be_bytes(dim_bytes) as usize;
        let needed = 4 + dim.checked_mul(16).ok_or(AlgebraError::Malformed)?;
        if bytes.len() < needed {
            return Err(AlgebraError::Malformed);
        }
        let mut entries = Vec::with_capacity(dim);
        for chunk in bytes[4..needed].chunks_exact(16) {
            let numer = u64::from_be_bytes(chunk[..8].try_into().unwrap());
            let denom = u64::from_be_bytes(chunk[8..].try_into().unwrap());
            if denom == 0 {
                return Err(AlgebraError::Malformed);
            }
            let r = Rational::new(numer, denom);
            if *r.numer() != numer || *r.denom() != denom {
                return Err(AlgebraError::Malformed);
            }
            entries.push(r);
        }
        Ok((Aggregate { entries }, needed))
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str(")")
    }
}

/// The aggregation operation: component-wise sum.
pub fn combine(a: &Aggregate, b: &Aggregate) -> Result<Aggregate, AlgebraError> {
    if a.dimension() != b.dimension() {
        return Err(AlgebraError::DimensionMismatch {
            expected: a.dimension(),
            found: b.dimension(),
        });
    }
    let entries = a
        .entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| x.checked_add(y).ok_or(AlgebraError::Overflow))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Aggregate { entries })
}

/// Checks that an initial aggregate has unit Manhattan norm, and when
/// splitting is disabled, that it is a unit vector.
pub fn validate_initial(a: &Aggregate, spec: &AlgebraSpec) -> bool {
    if a.dimension() != spec.dimension() {
        return false;
    }
    match a.norm() {
        Ok(n) if n.is_one() => {}
        _ => return false,
    }
    if spec.splitting {
        return true;
    }
    a.entries.iter().all(|e| e.is_zero() || e.is_one())
}

pub fn encode_plurality(choice: usize, spec: &AlgebraSpec) -> Result<Aggregate, AlgebraError> {
    if choice >= spec.options as usize {
        return Err(AlgebraError::ChoiceOutOfRange {
            choice,
            options: spec.options,
        });
    }
    Ok(Aggregate::unit(spec.dimension(), choice))
}

/// Lexicographic index of a permutation of `0..d` among all `d!` permutations.
pub fn ranking_index(ranking: &[usize]) -> Result<usize, AlgebraError> {
    let d = ranking.len();
    let mut seen = vec![false; d];
    for &r in ranking {
        if r >= d || seen[r] {
            return Err(AlgebraError::NotAPermutation(d as u32));
        }
        seen[r] = true;
    }
    // Lehmer code: for each position, count the unused smaller elements.
    let mut used = vec![false; d];
    let mut index = 0usize;
    for (pos, &r) in ranking.iter().enumerate() {
        let smaller_unused = (0..r).filter(|&x| !used[x]).count();
        index += smaller_unused * factorial(d - pos - 1);
        used[r] = true;
    }
    Ok(index)
}

/// Inverse of [`ranking_index`].
pub fn ranking_from_index(mut index: usize, options: u32) -> Result<Vec<usize>, AlgebraError> {
    let d = options as usize;
    if index >= factorial(d) {
        return Err(AlgebraError::ChoiceOutOfRange {
            choice: index,
            options,
        });
    }
    let mut pool: Vec<usize> = (0..d).collect();
    let mut out = Vec::with_capacity(d);
    for pos in 0..d {
        let f = factorial(d - pos - 1);
        out.push(pool.remove(index / f));
        index %= f;
    }
    Ok(out)
}

pub fn encode_ranked(ranking: &[usize], spec: &AlgebraSpec) -> Result<Aggregate, AlgebraError> {
    if spec.kind != AlgebraKind::Ranked {
        return Err(AlgebraError::InvalidSpec("ranked encoding requires a ranked algebra"));
    }
    if spec.options > MAX_RANKED_OPTIONS {
        return Err(AlgebraError::DimensionTooLarge(spec.options));
    }
    if ranking.len() != spec.options as usize {
        return Err(AlgebraError::NotAPermutation(spec.options));
    }
    let index = ranking_index(ranking)?;
    Ok(Aggregate::unit(spec.dimension(), index))
}

/// Result of evaluating a root aggregate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub winner: usize,
    pub tallies: Vec<Rational>,
    /// Another option shares the winning tally; the lowest index won.
    pub tie: bool,
}

pub fn outcome(root: &Aggregate) -> Outcome {
    let mut winner = 0;
    let mut tie = false;
    for (i, e) in root.entries.iter().enumerate().skip(1) {
        match e.cmp(&root.entries[winner]) {
            std::cmp::Ordering::Greater => {
                winner = i;
                tie = false;
            }
            std::cmp::Ordering::Equal => tie = true,
            std::cmp::Ordering::Less => {}
        }
    }
    Outcome {
        winner,
        tallies: root.entries.clone(),
        tie,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(n: u64, d: u64) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn combine_is_vector_addition() {
        let a = Aggregate::from_counts(&[1, 0, 0]);
        let b = Aggregate::from_counts(&[0, 1, 0]);
        assert_eq!(combine(&a, &b).unwrap(), Aggregate::from_counts(&[1, 1, 0]));
        assert_eq!(combine(&a, &Aggregate::zero(3)).unwrap(), a);
    }

    #[test]
    fn combine_rejects_dimension_mismatch() {
        let err = combine(&Aggregate::zero(2), &Aggregate::zero(3)).unwrap_err();
        assert_eq!(err, AlgebraError::DimensionMismatch { expected: 2, found: 3 });
    }

    #[test]
    fn combine_reports_overflow() {
        let a = Aggregate::from_entries(vec![r(u64::MAX, 1)]);
        let b = Aggregate::from_entries(vec![r(1, 1)]);
        assert_eq!(combine(&a, &b).unwrap_err(), AlgebraError::Overflow);
    }

    #[test]
    fn fold_of_unit_votes_has_norm_n() {
        let spec = AlgebraSpec::plurality(4);
        let n = 37;
        let root = (0..n).fold(spec.zero(), |acc, i| {
            combine(&acc, &encode_plurality(i % 4, &spec).unwrap()).unwrap()
        });
        assert_eq!(root.norm().unwrap(), Rational::from_integer(n as u64));
    }

    #[test]
    fn initial_validity() {
        let spec = AlgebraSpec::plurality(3);
        assert!(validate_initial(&Aggregate::from_counts(&[0, 1, 0]), &spec));
        assert!(!validate_initial(&Aggregate::from_counts(&[1, 1, 0]), &spec));
        assert!(!validate_initial(&Aggregate::from_counts(&[0, 0, 0]), &spec));
        assert!(!validate_initial(&Aggregate::from_counts(&[0, 1]), &spec));

        let half = Aggregate::from_entries(vec![r(1, 2), r(1, 2), r(0, 1)]);
        assert!(!validate_initial(&half, &spec));
        assert!(validate_initial(&half, &spec.with_splitting(true)));
        let third = Aggregate::from_entries(vec![r(1, 3), r(1, 3), r(1, 3)]);
        assert!(validate_initial(&third, &spec.with_splitting(true)));
        let heavy = Aggregate::from_entries(vec![r(2, 3), r(2, 3), r(0, 1)]);
        assert!(!validate_initial(&heavy, &spec.with_splitting(true)));
    }

    #[test]
    fn plurality_encoding() {
        let spec = AlgebraSpec::plurality(3);
        assert_eq!(encode_plurality(1, &spec).unwrap(), Aggregate::from_counts(&[0, 1, 0]));
        assert_eq!(
            encode_plurality(0, &AlgebraSpec::plurality(2)).unwrap(),
            Aggregate::from_counts(&[1, 0])
        );
        assert!(matches!(
            encode_plurality(3, &spec),
            Err(AlgebraError::ChoiceOutOfRange { .. })
        ));
        for d in 2..=8u32 {
            let spec = AlgebraSpec::plurality(d);
            for choice in 0..d as usize {
                assert!(validate_initial(&encode_plurality(choice, &spec).unwrap(), &spec));
            }
        }
    }

    /// All permutations of `0..d` in lexicographic order, by repeated
    /// next-permutation. Independent of the Lehmer-code path.
    fn lexicographic_permutations(d: usize) -> Vec<Vec<usize>> {
        let mut p: Vec<usize> = (0..d).collect();
        let mut out = vec![p.clone()];
        loop {
            let Some(i) = (0..d.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
                break;
            };
            let j = (i + 1..d).rev().find(|&j| p[j] > p[i]).unwrap();
            p.swap(i, j);
            p[i + 1..].reverse();
            out.push(p.clone());
        }
        out
    }

    #[test]
    fn ranked_encoding_matches_enumeration() {
        let spec = AlgebraSpec::ranked(3);
        assert_eq!(spec.dimension(), 6);
        assert_eq!(AlgebraSpec::ranked(2).dimension(), 2);
        assert_eq!(encode_ranked(&[0, 1, 2], &spec).unwrap(), Aggregate::unit(6, 0));
        assert_eq!(encode_ranked(&[2, 1, 0], &spec).unwrap(), Aggregate::unit(6, 5));
        for d in 1..=6 {
            for (expected, perm) in lexicographic_permutations(d).iter().enumerate() {
                assert_eq!(ranking_index(perm).unwrap(), expected);
                assert_eq!(&ranking_from_index(expected, d as u32).unwrap(), perm);
            }
        }
    }

    #[test]
    fn ranked_encoding_errors() {
        let spec = AlgebraSpec::ranked(3);
        assert!(matches!(encode_ranked(&[0, 0, 1], &spec), Err(AlgebraError::NotAPermutation(3))));
        assert!(matches!(encode_ranked(&[0, 1], &spec), Err(AlgebraError::NotAPermutation(3))));
        assert!(matches!(
            encode_ranked(&(0..9).collect::<Vec<_>>(), &AlgebraSpec::ranked(9)),
            Err(AlgebraError::DimensionTooLarge(9))
        ));
        assert!(AlgebraSpec::ranked(9).validate().is_err());
        assert!(AlgebraSpec::plurality(1).validate().is_err());
    }

    #[test]
    fn outcome_argmax_and_ties() {
        let o = outcome(&Aggregate::from_counts(&[3, 5, 2]));
        assert_eq!((o.winner, o.tie), (1, false));
        let o = outcome(&Aggregate::from_counts(&[4, 4, 1]));
        assert_eq!((o.winner, o.tie), (0, true));
        let o = outcome(&Aggregate::from_counts(&[1, 4, 4]));
        assert_eq!((o.winner, o.tie), (1, true));

        let spec = AlgebraSpec::plurality(3);
        let root = (0..7).fold(spec.zero(), |acc, _| {
            combine(&acc, &encode_plurality(2, &spec).unwrap()).unwrap()
        });
        let o = outcome(&root);
        assert_eq!(o.winner, 2);
        assert_eq!(o.tallies[2], Rational::from_integer(7));
    }

    #[test]
    fn encoding_round_trip_and_layout() {
        let a = Aggregate::from_entries(vec![r(1, 2), r(3, 1)]);
        let mut bytes = Vec::new();
        a.encode_into(&mut bytes);
        assert_eq!(bytes.len(), a.encoded_len());
        assert_eq!(&bytes[..4], &[0, 0, 0, 2]);
        assert_eq!(&bytes[4..12], &1u64.to_be_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_be_bytes());
        let (back, used) = Aggregate::decode(&bytes).unwrap();
        assert_eq!((back, used), (a, bytes.len()));

        let mut unreduced = bytes.clone();
        unreduced[4..12].copy_from_slice(&2u64.to_be_bytes());
        unreduced[12..20].copy_from_slice(&4u64.to_be_bytes());
        assert_eq!(Aggregate::decode(&unreduced).unwrap_err(), AlgebraError::Malformed);
        assert_eq!(Aggregate::decode(&bytes[..10]).unwrap_err(), AlgebraError::Malformed);
    }

    fn aggregate(dim: usize) -> impl Strategy<Value = Aggregate> {
        prop::collection::vec((0u64..1000, 1u64..50), dim).prop_map(|v| {
            Aggregate::from_entries(v.into_iter().map(|(n, d)| Rational::new(n, d)).collect())
        })
    }

    proptest! {
        #[test]
        fn combine_commutes_and_associates(a in aggregate(4), b in aggregate(4), c in aggregate(4)) {
            prop_assert_eq!(combine(&a, &b).unwrap(), combine(&b, &a).unwrap());
            let left = combine(&combine(&a, &b).unwrap(), &c).unwrap();
            let right = combine(&a, &combine(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn outcome_invariant_under_relabelling(
            counts in prop::collection::vec(0u64..20, 5),
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let root = Aggregate::from_counts(&counts);
            let permuted: Vec<u64> = perm.iter().map(|&p| counts[p]).collect();
            let o = outcome(&Aggregate::from_counts(&permuted));
            // The permuted winner maps back to an option with the maximal tally.
            let back = perm[o.winner];
            prop_assert_eq!(counts[back], *counts.iter().max().unwrap());
            prop_assert_eq!(counts[outcome(&root).winner], counts[back]);
        }

        #[test]
        fn ranked_encoding_is_injective(a in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
                                        b in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
            let spec = AlgebraSpec::ranked(5);
            let ea = encode_ranked(&a, &spec).unwrap();
            let eb = encode_ranked(&b, &spec).unwrap();
            prop_assert_eq!(a == b, ea == eb);
        }
    }
}
