//! Peer keys, the administrator's blind signature, authorization tokens,
//! KID derivation, and container signatures.
//!
//! Peer signatures are Ed25519. Authorization tokens are Chaum RSA blind
//! signatures over a full-domain hash of the peer's public key.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use ed25519_dalek::{Signer, SigningKey, Verifier as _, VerifyingKey};
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use ripemd::Ripemd160;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::SubtreeId;
use crate::serde_hex;

pub const KID_BYTES: usize = 20;
pub const MAX_BITS: usize = KID_BYTES * 8;
pub const PUBLIC_KEY_BYTES: usize = 32;
pub const SIGNATURE_BYTES: usize = 64;
pub const DEFAULT_ADMIN_BITS: usize = 2048;
/// Modulus size used by tests and fast simulation profiles.
pub const TEST_ADMIN_BITS: usize = 512;

pub type PublicKey = [u8; PUBLIC_KEY_BYTES];
pub type Hash = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("blinding factor is not invertible modulo N")]
    NotInvertible,
    #[error("requester {0} is not authenticated with the administrator")]
    Unauthenticated(u64),
    #[error("requester {0} already received a signature")]
    DuplicateRequest(u64),
    #[error("administrator signature does not verify")]
    InvalidToken,
    #[error("malformed public key")]
    MalformedKey,
    #[error("signature does not verify")]
    BadSignature,
    #[error("signer {signer} lies outside subtree {subtree}")]
    OutsideSubtree { signer: Kid, subtree: SubtreeId },
    #[error("administrator key generation failed: {0}")]
    KeyGeneration(String),
}

pub fn sha256(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

/// RIPEMD-160 over SHA-256, the 160-bit hash used for KIDs and DHT keys.
pub fn hash160(bytes: &[u8]) -> [u8; KID_BYTES] {
    Ripemd160::digest(Sha256::digest(bytes)).into()
}

// ---------------------------------------------------------------------------
// Peer keys

#[derive(Clone)]
pub struct PeerKeyPair {
    signing: SigningKey,
}

impl fmt::Debug for PeerKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeerKeyPair")
            .field("pk", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

impl PeerKeyPair {
    pub fn generate<R: RngCore + rand::CryptoRng>(rng: &mut R) -> Self {
        PeerKeyPair {
            signing: SigningKey::generate(rng),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn public_key(&self) -> PublicKey {
        self.signing.verifying_key().to_bytes()
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> [u8; SIGNATURE_BYTES] {
        self.signing.sign(message).to_bytes()
    }
}

pub fn verify_signature(pk: &PublicKey, message: &[u8], sig: &[u8; SIGNATURE_BYTES]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(pk) else {
        return false;
    };
    key.verify(message, &ed25519_dalek::Signature::from_bytes(sig))
        .is_ok()
}

// ---------------------------------------------------------------------------
// Blind signatures

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdminPublicKey {
    n: BigUint,
    e: BigUint,
    modulus_bytes: usize,
}

impl AdminPublicKey {
    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn modulus_bytes(&self) -> usize {
        self.modulus_bytes
    }

    /// Full-domain hash of a public key into Z_N: SHA-256 in counter mode,
    /// expanded 16 bytes past the modulus length, reduced mod N.
    pub fn fdh(&self, pk: &PublicKey) -> BigUint {
        let mut out = Vec::with_capacity(self.modulus_bytes + 48);
        let mut counter = 0u32;
        while out.len() < self.modulus_bytes + 16 {
            let mut h = Sha256::new();
            h.update(b"advokat-fdh");
            h.update(counter.to_be_bytes());
            h.update(pk);
            out.extend_from_slice(&h.finalize());
            counter += 1;
        }
        BigUint::from_bytes_be(&out) % &self.n
    }

    /// Checks that `token` is the administrator's signature on `pk`.
    pub fn verify(&self, pk: &PublicKey, token: &AuthorizationToken) -> bool {
        if token.0.len() != self.modulus_bytes {
            return false;
        }
        let t = BigUint::from_bytes_be(&token.0);
        if t >= self.n {
            return false;
        }
        t.modpow(&self.e, &self.n) == self.fdh(pk)
    }

    fn to_fixed(&self, x: &BigUint) -> Vec<u8> {
        let raw = x.to_bytes_be();
        let mut out = vec![0u8; self.modulus_bytes - raw.len()];
        out.extend_from_slice(&raw);
        out
    }
}

/// Administrator's signature over a peer public key.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuthorizationToken(#[serde(with = "serde_hex::vec")] pub Vec<u8>);

impl fmt::Debug for AuthorizationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.0);
        write!(f, "AuthorizationToken({}..)", &h[..h.len().min(16)])
    }
}

impl AuthorizationToken {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindingState {
    pub r: BigUint,
    pub b: BigUint,
}

/// Blinds `pk` with factor `r`: b = H(pk) · r^e mod N.
pub fn blind(pk: &PublicKey, r: &BigUint, admin: &AdminPublicKey) -> Result<BlindingState, IdentityError> {
    if r <= &BigUint::one() || r >= &admin.n || !r.gcd(&admin.n).is_one() {
        return Err(IdentityError::NotInvertible);
    }
    let b = admin.fdh(pk) * r.modpow(&admin.e, &admin.n) % &admin.n;
    Ok(BlindingState { r: r.clone(), b })
}

/// Draws blinding factors until one is invertible.
pub fn blind_random<R: Rng>(pk: &PublicKey, admin: &AdminPublicKey, rng: &mut R) -> BlindingState {
    loop {
        let mut raw = vec![0u8; admin.modulus_bytes];
        rng.fill_bytes(&mut raw);
        let r = BigUint::from_bytes_be(&raw) % &admin.n;
        if let Ok(state) = blind(pk, &r, admin) {
            return state;
        }
    }
}

/// Removes the blinding factor and checks the resulting token.
pub fn unblind_and_verify(
    s: &BigUint,
    r: &BigUint,
    pk: &PublicKey,
    admin: &AdminPublicKey,
) -> Result<AuthorizationToken, IdentityError> {
    let r_inv = mod_inverse(r, &admin.n).ok_or(IdentityError::NotInvertible)?;
    let t = s * r_inv % &admin.n;
    let token = AuthorizationToken(admin.to_fixed(&t));
    if admin.verify(pk, &token) {
        Ok(token)
    } else {
        Err(IdentityError::InvalidToken)
    }
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let g = a.extended_gcd(&m);
    if !g.gcd.is_one() {
        return None;
    }
    g.x.mod_floor(&m).to_biguint()
}

/// The administrator actor. Signs one blinded key per enrolled identity.
pub struct Administrator {
    public: AdminPublicKey,
    d: BigUint,
    enrolled: HashSet<u64>,
    served: HashSet<u64>,
}

impl fmt::Debug for Administrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Administrator")
            .field("modulus_bits", &self.public.n.bits())
            .field("enrolled", &self.enrolled.len())
            .field("served", &self.served.len())
            .finish()
    }
}

impl Administrator {
    pub fn generate<R: RngCore + rand::CryptoRng>(rng: &mut R, bits: usize) -> Result<Self, IdentityError> {
        use rsa::traits::{PrivateKeyParts, PublicKeyParts};
        let key = rsa::RsaPrivateKey::new(rng, bits)
            .map_err(|e| IdentityError::KeyGeneration(e.to_string()))?;
        let n = BigUint::from_bytes_be(&key.n().to_bytes_be());
        let e = BigUint::from_bytes_be(&key.e().to_bytes_be());
        let d = BigUint::from_bytes_be(&key.d().to_bytes_be());
        let modulus_bytes = ((n.bits() + 7) / 8) as usize;
        Ok(Administrator {
            public: AdminPublicKey { n, e, modulus_bytes },
            d,
            enrolled: HashSet::new(),
            served: HashSet::new(),
        })
    }

    pub fn public_key(&self) -> &AdminPublicKey {
        &self.public
    }

    /// Registers an identity on the authenticated administrator channel.
    pub fn enroll(&mut self, requester: u64) {
        self.enrolled.insert(requester);
    }

    pub fn served_count(&self) -> usize {
        self.served.len()
    }

    pub fn sign_blinded(&mut self, b: &BigUint, requester: u64) -> Result<BigUint, IdentityError> {
        if !self.enrolled.contains(&requester) {
            return Err(IdentityError::Unauthenticated(requester));
        }
        if !self.served.insert(requester) {
            return Err(IdentityError::DuplicateRequest(requester));
        }
        Ok(b.modpow(&self.d, &self.public.n))
    }

    /// Full administration step for one peer: blind, sign, unblind, verify.
    pub fn issue<R: Rng>(
        &mut self,
        requester: u64,
        pk: &PublicKey,
        rng: &mut R,
    ) -> Result<AuthorizationToken, IdentityError> {
        let state = blind_random(pk, &self.public, rng);
        let s = self.sign_blinded(&state.b, requester)?;
        unblind_and_verify(&s, &state.r, pk, &self.public)
    }
}

// ---------------------------------------------------------------------------
// KIDs

/// A 160-bit identifier; bits beyond the configured tree depth are zero.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Kid(#[serde(with = "serde_hex")] pub [u8; KID_BYTES]);

impl fmt::Debug for Kid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Kid({})", hex::encode(self.0))
    }
}

impl fmt::Display for Kid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Kid {
    pub const ZERO: Kid = Kid([0; KID_BYTES]);

    pub fn from_bytes(bytes: [u8; KID_BYTES]) -> Self {
        Kid(bytes)
    }

    /// Bit `i`, counted from the most significant bit (`i = 0`).
    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn with_bit(mut self, i: usize, value: bool) -> Self {
        let mask = 1u8 << (7 - i % 8);
        if value {
            self.0[i / 8] |= mask;
        } else {
            self.0[i / 8] &= !mask;
        }
        self
    }

    /// Keeps the first `bits` bits and zeroes the rest.
    pub fn truncate(mut self, bits: usize) -> Self {
        for i in 0..KID_BYTES {
            let start = i * 8;
            if start >= bits {
                self.0[i] = 0;
            } else if start + 8 > bits {
                self.0[i] &= 0xffu8 << (start + 8 - bits);
            }
        }
        self
    }

    pub fn xor(&self, other: &Kid) -> Kid {
        let mut out = [0u8; KID_BYTES];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(&other.0)) {
            *o = a ^ b;
        }
        Kid(out)
    }

    pub fn leading_zeros(&self) -> usize {
        for (i, b) in self.0.iter().enumerate() {
            if *b != 0 {
                return i * 8 + b.leading_zeros() as usize;
            }
        }
        MAX_BITS
    }

    pub fn common_prefix_len(&self, other: &Kid) -> usize {
        self.xor(other).leading_zeros()
    }

    pub fn random<R: Rng>(rng: &mut R, bits: usize) -> Kid {
        let mut out = [0u8; KID_BYTES];
        rng.fill_bytes(&mut out);
        Kid(out).truncate(bits)
    }

    /// Top `bits` bits as an integer; `bits` must be at most 64.
    pub fn top_bits(&self, bits: usize) -> u64 {
        (0..bits).fold(0u64, |acc, i| acc << 1 | self.bit(i) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KidMode {
    /// KID derived from the authorization token.
    #[default]
    Token,
    /// KID derived from the public key alone.
    SimulationPk,
}

/// A peer's public key together with its authorization token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Credentials {
    #[serde(with = "serde_hex")]
    pub pk: PublicKey,
    pub token: AuthorizationToken,
}

pub fn derive_kid(credentials: &Credentials, mode: KidMode, bits: usize) -> Kid {
    let raw = match mode {
        KidMode::Token => hash160(credentials.token.as_bytes()),
        KidMode::SimulationPk => hash160(&credentials.pk),
    };
    Kid(raw).truncate(bits)
}

/// Everything needed to check credentials offline.
#[derive(Debug, Clone)]
pub struct CredentialVerifier {
    pub admin: AdminPublicKey,
    pub mode: KidMode,
    pub bits: usize,
}

impl CredentialVerifier {
    /// Checks the token and returns the KID the credentials prove.
    pub fn kid_of(&self, credentials: &Credentials) -> Result<Kid, IdentityError> {
        if !self.admin.verify(&credentials.pk, &credentials.token) {
            return Err(IdentityError::InvalidToken);
        }
        Ok(derive_kid(credentials, self.mode, self.bits))
    }
}

// ---------------------------------------------------------------------------
// Container signatures

/// σ(h, d, c) together with the signer's credentials.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContainerSignature {
    pub signer: Arc<Credentials>,
    #[serde(with = "serde_hex")]
    pub hash: Hash,
    pub depth: u8,
    pub counter: u32,
    #[serde(with = "serde_hex")]
    pub sig: [u8; SIGNATURE_BYTES],
}

pub fn claim_message(hash: &Hash, depth: u8, counter: u32) -> [u8; 41] {
    let mut m = [0u8; 41];
    m[..4].copy_from_slice(b"AVSG");
    m[4..36].copy_from_slice(hash);
    m[36] = depth;
    m[37..].copy_from_slice(&counter.to_be_bytes());
    m
}

pub fn sign_container_claim(
    keys: &PeerKeyPair,
    credentials: &Arc<Credentials>,
    hash: &Hash,
    depth: u8,
    counter: u32,
) -> ContainerSignature {
    ContainerSignature {
        signer: credentials.clone(),
        hash: *hash,
        depth,
        counter,
        sig: keys.sign(&claim_message(hash, depth, counter)),
    }
}

impl ContainerSignature {
    /// Verifies the signature bytes and token; returns the signer's KID.
    pub fn verify(&self, verifier: &CredentialVerifier) -> Result<Kid, IdentityError> {
        let msg = claim_message(&self.hash, self.depth, self.counter);
        if !verify_signature(&self.signer.pk, &msg, &self.sig) {
            return Err(IdentityError::BadSignature);
        }
        verifier.kid_of(&self.signer)
    }
}

/// Full check: signature, eligibility, and signing capacity for `subtree`.
pub fn verify_container_claim(
    sig: &ContainerSignature,
    verifier: &CredentialVerifier,
    subtree: &SubtreeId,
) -> Result<Kid, IdentityError> {
    let kid = sig.verify(verifier)?;
    if !subtree.contains(&kid) {
        return Err(IdentityError::OutsideSubtree {
            signer: kid,
            subtree: *subtree,
        });
    }
    Ok(kid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn admin() -> &'static std::sync::Mutex<Administrator> {
        static ADMIN: OnceLock<std::sync::Mutex<Administrator>> = OnceLock::new();
        ADMIN.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(7);
            std::sync::Mutex::new(Administrator::generate(&mut rng, TEST_ADMIN_BITS).unwrap())
        })
    }

    fn admin_public() -> AdminPublicKey {
        admin().lock().unwrap().public_key().clone()
    }

    fn fresh_admin(seed: u64) -> Administrator {
        Administrator::generate(&mut ChaCha20Rng::seed_from_u64(seed), TEST_ADMIN_BITS).unwrap()
    }

    #[test]
    fn key_generation_is_deterministic() {
        assert_eq!(PeerKeyPair::from_seed(1).public_key(), PeerKeyPair::from_seed(1).public_key());
        let mut seen = HashSet::new();
        for seed in 0..1000 {
            assert!(seen.insert(PeerKeyPair::from_seed(seed).public_key()));
        }
    }

    #[test]
    fn sign_verify_round_trip() {
        let keys = PeerKeyPair::from_seed(3);
        let sig = keys.sign(b"hello");
        assert!(verify_signature(&keys.public_key(), b"hello", &sig));
        assert!(!verify_signature(&keys.public_key(), b"hellp", &sig));
        assert!(!verify_signature(&PeerKeyPair::from_seed(4).public_key(), b"hello", &sig));
    }

    #[test]
    fn blind_signature_chain() {
        let mut a = fresh_admin(11);
        a.enroll(1);
        let keys = PeerKeyPair::from_seed(5);
        let pk = keys.public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let state = blind_random(&pk, a.public_key(), &mut rng);
        let s = a.sign_blinded(&state.b, 1).unwrap();
        let token = unblind_and_verify(&s, &state.r, &pk, a.public_key()).unwrap();
        assert!(a.public_key().verify(&pk, &token));
        assert!(!a.public_key().verify(&PeerKeyPair::from_seed(6).public_key(), &token));

        // Tampered signature and wrong blinding factor both fail.
        let tampered = &s + 1u32;
        assert_eq!(
            unblind_and_verify(&tampered, &state.r, &pk, a.public_key()),
            Err(IdentityError::InvalidToken)
        );
        let other = blind_random(&pk, a.public_key(), &mut rng);
        assert_eq!(
            unblind_and_verify(&s, &other.r, &pk, a.public_key()),
            Err(IdentityError::InvalidToken)
        );
    }

    #[test]
    fn blinding_depends_on_factor_and_rejects_non_invertible() {
        let admin = admin_public();
        let pk = PeerKeyPair::from_seed(8).public_key();
        let b1 = blind(&pk, &BigUint::from(3u32), &admin).unwrap();
        let b2 = blind(&pk, &BigUint::from(5u32), &admin).unwrap();
        assert_ne!(b1.b, b2.b);
        assert_eq!(blind(&pk, &BigUint::one(), &admin), Err(IdentityError::NotInvertible));
        assert_eq!(blind(&pk, admin.modulus(), &admin), Err(IdentityError::NotInvertible));
    }

    #[test]
    fn blinded_values_are_uniform() {
        // Chi-square over 16 equal-width bins of b/N; 15 degrees of freedom,
        // critical value 30.58 at p = 0.01.
        let admin = admin_public();
        let pk = PeerKeyPair::from_seed(12).public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let draws = 1000;
        let mut bins = [0u32; 16];
        for _ in 0..draws {
            let b = blind_random(&pk, &admin, &mut rng).b;
            let bin = (&b * 16u32 / admin.modulus()).to_u32_digits().first().copied().unwrap_or(0);
            bins[bin as usize] += 1;
        }
        let expected = draws as f64 / 16.0;
        let chi: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 30.58, "chi-square {chi}");
    }

    #[test]
    fn administrator_signs_once_per_identity() {
        let mut a = fresh_admin(21);
        a.enroll(1);
        let pk = PeerKeyPair::from_seed(1).public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(a.issue(1, &pk, &mut rng).is_ok());
        assert_eq!(a.issue(1, &pk, &mut rng), Err(IdentityError::DuplicateRequest(1)));
        assert_eq!(a.issue(2, &pk, &mut rng), Err(IdentityError::Unauthenticated(2)));
        assert_eq!(a.served_count(), 1);
    }

    #[test]
    fn random_tokens_never_verify() {
        let admin = admin_public();
        let pk = PeerKeyPair::from_seed(2).public_key();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let mut raw = vec![0u8; admin.modulus_bytes()];
            rng.fill_bytes(&mut raw);
            assert!(!admin.verify(&pk, &AuthorizationToken(raw)));
        }
        assert!(!admin.verify(&pk, &AuthorizationToken(vec![1, 2, 3])));
    }

    #[test]
    fn kid_derivation() {
        let pk = PeerKeyPair::from_seed(4).public_key();
        let creds = Credentials {
            pk,
            token: AuthorizationToken(vec![7; 64]),
        };
        let k1 = derive_kid(&creds, KidMode::Token, 160);
        assert_eq!(k1, derive_kid(&creds, KidMode::Token, 160));
        assert_eq!(k1, Kid(hash160(&[7; 64])));
        assert_eq!(derive_kid(&creds, KidMode::SimulationPk, 160), Kid(hash160(&pk)));
        assert_eq!(derive_kid(&creds, KidMode::Token, 6), k1.truncate(6));
    }

    #[test]
    fn hash160_matches_reference_vector() {
        // RIPEMD-160(SHA-256("abc")), computed with an independent tool.
        assert_eq!(
            hex::encode(hash160(b"abc")),
            "bb1be98c142444d7a56aa3981c3942a978e4dc33"
        );
    }

    #[test]
    fn kids_do_not_collide_and_are_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut seen = HashSet::new();
        let mut bins = [0u32; 256];
        let draws = 10_000;
        for i in 0..draws {
            let mut pk = [0u8; 32];
            rng.fill_bytes(&mut pk);
            let kid = derive_kid(
                &Credentials { pk, token: AuthorizationToken(Vec::new()) },
                KidMode::SimulationPk,
                160,
            );
            if i < 1000 {
                assert!(seen.insert(kid));
            }
            bins[kid.0[0] as usize] += 1;
        }
        // 255 degrees of freedom: critical value 310.46 at p = 0.01.
        let expected = draws as f64 / 256.0;
        let chi: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 310.46, "chi-square {chi}");
    }

    #[test]
    fn kid_bit_operations() {
        let k = Kid([0b1010_0000; KID_BYTES]);
        assert!(k.bit(0));
        assert!(!k.bit(1));
        assert!(k.bit(2));
        assert_eq!(k.truncate(3).0[0], 0b1010_0000);
        assert_eq!(k.truncate(1).0[0], 0b1000_0000);
        assert_eq!(k.truncate(1).0[1], 0);
        assert_eq!(k.with_bit(1, true).0[0], 0b1110_0000);
        assert_eq!(k.top_bits(3), 0b101);
        assert_eq!(Kid::ZERO.leading_zeros(), MAX_BITS);
        assert_eq!(k.common_prefix_len(&k.with_bit(9, true)), 9);
    }

    #[test]
    fn container_claims() {
        let mut a = fresh_admin(31);
        a.enroll(0);
        let keys = PeerKeyPair::from_seed(10);
        let pk = keys.public_key();
        let token = a.issue(0, &pk, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        let creds = Arc::new(Credentials { pk, token });
        let verifier = CredentialVerifier {
            admin: a.public_key().clone(),
            mode: KidMode::Token,
            bits: 160,
        };
        let kid = verifier.kid_of(&creds).unwrap();
        let h = sha256(b"container");
        let sig = sign_container_claim(&keys, &creds, &h, 3, 2);

        let own = SubtreeId::new(kid, 3);
        assert_eq!(verify_container_claim(&sig, &verifier, &own), Ok(kid));
        let foreign = SubtreeId::new(kid.with_bit(0, !kid.bit(0)), 3);
        assert!(matches!(
            verify_container_claim(&sig, &verifier, &foreign),
            Err(IdentityError::OutsideSubtree { .. })
        ));
        let mut flipped = sig.clone();
        flipped.hash[0] ^= 1;
        assert_eq!(flipped.verify(&verifier), Err(IdentityError::BadSignature));

        let mut forged = sig.clone();
        forged.signer = Arc::new(Credentials {
            pk,
            token: AuthorizationToken(vec![0; verifier.admin.modulus_bytes()]),
        });
        assert_eq!(forged.verify(&verifier), Err(IdentityError::InvalidToken));
    }
}
