//! A peer actor: joining the overlay, answering requests, and running the
//! epochs of the aggregation.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::{Rc, Weak};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryState, Behavior};
use crate::algebra::Aggregate;
use crate::container::{
    build_leaf_container, build_parent_container, AggregateContainer, ConfirmedContainer, SignatureRole, SubtreeId,
};
use crate::identity::{sign_container_claim, ContainerSignature, Credentials, Hash, Kid, PeerKeyPair, PublicKey};
use crate::overlay::dht::{dht_key, DhtKey, DhtStorage};
use crate::overlay::transport::{Handler, Notify};
use crate::overlay::wire::{DenyReason, Envelope, Payload, Request, Response};
use crate::overlay::{subtree_depth_of, xor_distance, Contact, LookupMode, LookupState, PeerId, RoutingTable, Runtime, Transport};
use crate::protocol::authorize::{authorize_confirm, authorize_pull};
use crate::protocol::conflict::{resolve_conflict, ChildVote, ConflictAction, OwnChildren};
use crate::protocol::detect::{DeviationProof, SignatureLedger, MAX_PROVABLE_COUNTER};
use crate::protocol::rules::{check_confirmed, child_view, required_signature_set, SignatureCheck};
use crate::protocol::{root_confirmations, AbortMode, ProtocolParams, VerifyCache};

/// State shared by all peers of one simulation.
pub struct Network {
    pub transport: Transport<Envelope, Envelope>,
    pub cache: VerifyCache,
    pub params: ProtocolParams,
    journal: RefCell<Option<Vec<StateEvent>>>,
}

impl Network {
    pub fn new(rt: &Runtime, cache: VerifyCache, params: ProtocolParams, record: bool) -> Rc<Self> {
        Rc::new(Network {
            transport: Transport::new(rt),
            cache,
            params,
            journal: RefCell::new(record.then(Vec::new)),
        })
    }

    fn record(&self, event: impl FnOnce() -> StateEvent) {
        if let Some(j) = self.journal.borrow_mut().as_mut() {
            j.push(event());
        }
    }

    pub fn take_journal(&self) -> Vec<StateEvent> {
        self.journal.borrow_mut().as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// State transitions, for transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StateEvent {
    Confirmed {
        peer: PeerId,
        depth: u8,
        container: Arc<AggregateContainer>,
        compensated: bool,
    },
    Sibling {
        peer: PeerId,
        depth: u8,
        responder: Kid,
        container: Arc<AggregateContainer>,
    },
    Excluded {
        peer: PeerId,
        culprit: Kid,
    },
    Rollback {
        peer: PeerId,
        epoch: u8,
    },
    Unresolved {
        peer: PeerId,
        depth: u8,
    },
    Aborted {
        peer: PeerId,
        depth: u8,
    },
    Root {
        peer: PeerId,
        #[serde(with = "crate::serde_hex")]
        hash: Hash,
        signatures: u32,
        refusals: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Joining,
    Aggregating(u8),
    RootConfirmation,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeerReport {
    pub lookups: u64,
    pub lookup_cycles: u64,
    pub unresolved: Vec<u8>,
    pub compensations: u32,
    pub rollbacks: u32,
    pub repeats: u32,
    pub self_conflicts: u32,
    pub root_asked: u32,
    pub root_signatures: u32,
    pub root_refusals: u32,
    pub denied: BTreeMap<String, u64>,
    pub proofs_stored: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SiblingSlot {
    pub container: Option<Rc<ConfirmedContainer>>,
    pub responder: Option<Contact>,
    /// Culprits whose proofs came along with the response.
    pub excluded: BTreeSet<Kid>,
}

#[derive(Debug, Clone, Default)]
pub struct DepthState {
    pub own_confirmed: Option<Rc<ConfirmedContainer>>,
    pub sibling: Option<SiblingSlot>,
    pub candidate: Option<Arc<AggregateContainer>>,
    pub candidate_sig: Option<ContainerSignature>,
}

pub struct PeerState {
    pub routing: RoutingTable,
    /// Indexed by depth `0..=bits`.
    pub depths: Vec<DepthState>,
    pub phase: Phase,
    epoch: u8,
    generation: u64,
    ledger: SignatureLedger,
    pub proofs: BTreeMap<Kid, Arc<DeviationProof>>,
    pub dht: DhtStorage,
    nonce_out: u64,
    nonce_in: HashMap<PublicKey, u64>,
    signed: HashMap<(u8, u32), Hash>,
    repeats: BTreeMap<u8, u32>,
    distrusted: BTreeMap<u8, BTreeSet<Kid>>,
    rng: ChaCha20Rng,
    pub report: PeerReport,
}

enum Stop {
    Interrupted,
    Abort,
}

type Step<T> = Result<T, Stop>;

pub struct Peer {
    me: Weak<Peer>,
    pub id: PeerId,
    pub kid: Kid,
    pub creds: Arc<Credentials>,
    keys: PeerKeyPair,
    vote: Aggregate,
    net: Rc<Network>,
    state: RefCell<PeerState>,
    notify: Notify,
    adversary: Option<RefCell<AdversaryState>>,
}

impl Peer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: PeerId,
        keys: PeerKeyPair,
        creds: Arc<Credentials>,
        kid: Kid,
        vote: Aggregate,
        net: Rc<Network>,
        rng: ChaCha20Rng,
        adversary: Option<AdversaryState>,
    ) -> Rc<Self> {
        let p = &net.params;
        let state = PeerState {
            routing: RoutingTable::new(kid, p.bits, p.k),
            depths: vec![DepthState::default(); p.bits as usize + 1],
            phase: Phase::Joining,
            epoch: p.bits,
            generation: 0,
            ledger: SignatureLedger::default(),
            proofs: BTreeMap::new(),
            dht: DhtStorage::default(),
            nonce_out: 0,
            nonce_in: HashMap::new(),
            signed: HashMap::new(),
            repeats: BTreeMap::new(),
            distrusted: BTreeMap::new(),
            rng,
            report: PeerReport::default(),
        };
        let peer = Rc::new_cyclic(|me| Peer {
            me: me.clone(),
            id,
            kid,
            creds,
            keys,
            vote,
            net: net.clone(),
            state: RefCell::new(state),
            notify: Notify::default(),
            adversary: adversary.map(RefCell::new),
        });
        net.transport.register(id, peer.handler());
        peer
    }

    pub fn contact(&self) -> Contact {
        Contact {
            kid: self.kid,
            credentials: self.creds.clone(),
            address: self.id,
        }
    }

    pub fn state(&self) -> std::cell::Ref<'_, PeerState> {
        self.state.borrow()
    }

    pub fn is_dishonest(&self) -> bool {
        self.adversary.is_some()
    }

    pub fn vote(&self) -> &Aggregate {
        &self.vote
    }

    fn bits(&self) -> u8 {
        self.net.params.bits
    }

    fn handler(self: &Rc<Self>) -> Handler<Envelope, Envelope> {
        let weak = Rc::downgrade(self);
        Rc::new(move |from, env| {
            let peer = weak.upgrade();
            Box::pin(async move { peer?.handle(from, env).await })
        })
    }

    // ------------------------------------------------------------------
    // Messaging

    fn seal(&self, payload: Payload, attach_proofs: bool) -> Envelope {
        let (nonce, proofs) = {
            let mut s = self.state.borrow_mut();
            s.nonce_out += 1;
            let proofs = if attach_proofs {
                s.proofs.values().cloned().collect()
            } else {
                Vec::new()
            };
            (s.nonce_out, proofs)
        };
        Envelope::seal(&self.keys, self.creds.clone(), nonce, payload, proofs)
    }

    fn fresh_nonce(&self, pk: &PublicKey, nonce: u64) -> bool {
        let mut s = self.state.borrow_mut();
        let last = s.nonce_in.entry(*pk).or_insert(0);
        if nonce <= *last {
            return false;
        }
        *last = nonce;
        true
    }

    /// Sends a request and checks the signed response.
    async fn rpc(&self, to: &Contact, req: Request) -> Option<(Response, Vec<Arc<DeviationProof>>)> {
        let attach = matches!(req, Request::Pull { .. } | Request::Confirm { .. });
        let env = self.seal(Payload::Request(req), attach);
        let reply = self.net.transport.request(self.id, to.address, env).await.ok()?;
        if reply.sender.pk != to.credentials.pk || !reply.signature_valid() {
            return None;
        }
        if !self.fresh_nonce(&reply.sender.pk, reply.nonce) {
            return None;
        }
        let Payload::Response(resp) = reply.payload else {
            return None;
        };
        for p in &reply.proofs {
            self.adopt_proof(p.clone(), false);
        }
        self.ingest(resp.signatures().into_iter());
        if !self.state.borrow().routing.is_frozen() {
            self.state.borrow_mut().routing.insert(to.clone());
        }
        Some((resp, reply.proofs))
    }

    fn deny(&self, reason: DenyReason) -> Envelope {
        *self
            .state
            .borrow_mut()
            .report
            .denied
            .entry(format!("{reason:?}"))
            .or_default() += 1;
        self.seal(Payload::Response(Response::Denied(reason)), false)
    }

    async fn handle(self: Rc<Self>, from: PeerId, env: Envelope) -> Option<Envelope> {
        if !env.signature_valid() {
            return Some(self.deny(DenyReason::BadSignature));
        }
        let Ok(kid) = self.net.cache.kid_of(&env.sender) else {
            return Some(self.deny(DenyReason::Ineligible));
        };
        if !self.fresh_nonce(&env.sender.pk, env.nonce) {
            return Some(self.deny(DenyReason::Replay));
        }
        if self.state.borrow().routing.is_banned(&kid) {
            return Some(self.deny(DenyReason::Excluded));
        }
        let Payload::Request(req) = env.payload else {
            return Some(self.deny(DenyReason::Malformed));
        };
        for p in &env.proofs {
            self.adopt_proof(p.clone(), false);
        }
        self.ingest(req.signatures().into_iter());
        {
            let mut s = self.state.borrow_mut();
            if !s.routing.is_frozen() {
                s.routing.insert(Contact {
                    kid,
                    credentials: env.sender.clone(),
                    address: from,
                });
            }
        }
        let attach = matches!(req, Request::Pull { .. } | Request::Confirm { .. });
        let honest = match &req {
            Request::FindNode { target } => {
                let s = self.state.borrow();
                Some(Response::Nodes(s.routing.closest(target, s.routing.k())))
            }
            Request::Pull { depth } => {
                if !authorize_pull(&self.kid, &kid, *depth, self.bits()) {
                    return Some(self.deny(DenyReason::Unauthorized));
                }
                let d = *depth as usize;
                let cc = self.wait_for(|s| s.depths[d].own_confirmed.clone()).await;
                Some(Response::Container((*cc).clone()))
            }
            Request::Confirm { candidate, .. } => {
                if candidate.subtree.depth() >= self.bits()
                    || !authorize_confirm(&self.kid, &kid, &candidate.subtree)
                {
                    return Some(self.deny(DenyReason::Unauthorized));
                }
                if !candidate.hash_matches() || !candidate.counters_consistent(self.bits()) {
                    return Some(self.deny(DenyReason::Malformed));
                }
                Some(self.on_confirm(candidate).await)
            }
            Request::Store { key, value } => Some(Response::Stored(self.on_store(key, value))),
            Request::Get { key } => {
                let s = self.state.borrow();
                Some(Response::Value(s.dht.get(key).map(<[u8]>::to_vec)))
            }
        };
        let out = match &self.adversary {
            Some(adv) => adv.borrow_mut().apply(&req, honest),
            None => honest,
        }?;
        Some(self.seal(Payload::Response(out), attach))
    }

    async fn on_confirm(&self, candidate: &Arc<AggregateContainer>) -> Response {
        let d = candidate.subtree.depth() as usize;
        let (mine, sig, evidence) = self
            .wait_for(|s| {
                let ds = &s.depths[d];
                Some((ds.candidate.clone()?, ds.candidate_sig.clone()?, evidence_at(s, d)))
            })
            .await;
        if mine.hash == candidate.hash {
            Response::Signature(sig)
        } else {
            Response::Refusal {
                candidate: Some(mine),
                evidence,
            }
        }
    }

    fn on_store(&self, key: &DhtKey, value: &[u8]) -> bool {
        let Some(proof) = DeviationProof::from_bytes(value) else {
            return false;
        };
        if dht_key(&proof.culprit) != *key || proof.verify(&self.net.cache).is_err() {
            return false;
        }
        self.state.borrow_mut().dht.store(*key, value.to_vec())
    }

    async fn wait_for<T>(&self, mut f: impl FnMut(&PeerState) -> Option<T>) -> T {
        loop {
            let seen = self.notify.generation();
            if let Some(v) = f(&self.state.borrow()) {
                return v;
            }
            self.notify.changed(seen).await;
        }
    }

    // ------------------------------------------------------------------
    // Detection

    /// Feeds verified small-counter signatures into the ledger.
    fn ingest<'a>(&self, sigs: impl Iterator<Item = &'a ContainerSignature>) {
        let mut found = Vec::new();
        for sig in sigs {
            if sig.counter > MAX_PROVABLE_COUNTER {
                continue;
            }
            let Ok(signer) = self.net.cache.signer_of(sig) else {
                continue;
            };
            if signer == self.kid {
                continue;
            }
            if let Some(p) = self.state.borrow_mut().ledger.observe(signer, sig) {
                found.push(p);
            }
        }
        for p in found {
            self.adopt_proof(Arc::new(p), true);
        }
    }

    /// Accepts a proof, bans its culprit and rolls back if a pulled sibling
    /// may contain the culprit's data. Returns whether the proof was new.
    fn adopt_proof(&self, proof: Arc<DeviationProof>, detected_here: bool) -> bool {
        let culprit = proof.culprit;
        if culprit == self.kid || self.state.borrow().proofs.contains_key(&culprit) {
            return false;
        }
        if proof.verify(&self.net.cache).is_err() {
            return false;
        }
        {
            let mut s = self.state.borrow_mut();
            s.proofs.insert(culprit, proof.clone());
            s.routing.ban(&culprit);
            let mut epoch = None;
            if let Some(dstar) = subtree_depth_of(&self.kid, &culprit) {
                let tainted = s
                    .depths
                    .get(dstar as usize)
                    .and_then(|ds| ds.sibling.as_ref())
                    .is_some_and(|slot| slot.container.is_some() && !slot.excluded.contains(&culprit));
                if tainted {
                    epoch = Some(dstar);
                }
            }
            // Our own containers that the culprit helped confirm must be
            // confirmed again, or nobody who banned it will accept them.
            let signed = (0..self.bits()).rev().find(|&d| {
                s.depths[d as usize]
                    .own_confirmed
                    .as_ref()
                    .is_some_and(|cc| self.signed_by(cc, &culprit))
            });
            if let Some(d) = signed {
                epoch = epoch.max(Some(d + 1));
            }
            if let Some(e) = epoch {
                self.rollback(&mut s, e);
            }
        }
        self.net.record(|| StateEvent::Excluded {
            peer: self.id,
            culprit,
        });
        self.notify.notify();
        if detected_here {
            if let Some(me) = self.self_rc() {
                self.net.transport.runtime().spawn(async move { me.store_proof(proof).await });
            }
        }
        true
    }

    fn signed_by(&self, cc: &ConfirmedContainer, kid: &Kid) -> bool {
        cc.signatures
            .iter()
            .any(|(_, sig)| self.net.cache.kid_of(&sig.signer).as_ref() == Ok(kid))
            || cc.compensation.iter().flatten().any(|c| self.signed_by(c, kid))
    }

    fn self_rc(&self) -> Option<Rc<Peer>> {
        self.me.upgrade()
    }

    /// Forgets everything computed from epoch `epoch` on.
    fn rollback(&self, s: &mut PeerState, epoch: u8) {
        if s.phase == Phase::Aborted {
            return;
        }
        for d in 0..epoch as usize {
            let ds = &mut s.depths[d];
            ds.own_confirmed = None;
            ds.candidate = None;
            ds.candidate_sig = None;
        }
        for d in 1..=epoch as usize {
            s.depths[d].sibling = None;
        }
        s.report.unresolved.retain(|&d| d > epoch);
        s.epoch = s.epoch.max(epoch);
        s.phase = Phase::Aggregating(s.epoch);
        s.generation += 1;
        s.report.rollbacks += 1;
        self.net.record(|| StateEvent::Rollback { peer: self.id, epoch });
    }

    async fn store_proof(self: Rc<Self>, proof: Arc<DeviationProof>) {
        let key = dht_key(&proof.culprit);
        let bytes = proof.to_bytes();
        self.state.borrow_mut().dht.store(key, bytes.clone());
        let target = Kid(key).truncate(self.bits() as usize);
        let closest = self.lookup(target, LookupMode::Exhaustive).await;
        for c in closest {
            if let Some((Response::Stored(true), _)) = self
                .rpc(
                    &c,
                    Request::Store {
                        key,
                        value: bytes.clone(),
                    },
                )
                .await
            {
                self.state.borrow_mut().report.proofs_stored += 1;
            }
        }
    }

    /// Looks up a stored proof against `suspect` and adopts it.
    async fn lookup_proof(&self, suspect: Kid) {
        let key = dht_key(&suspect);
        let target = Kid(key).truncate(self.bits() as usize);
        for c in self.lookup(target, LookupMode::Exhaustive).await {
            if let Some((Response::Value(Some(bytes)), _)) = self.rpc(&c, Request::Get { key }).await {
                if let Some(p) = DeviationProof::from_bytes(&bytes) {
                    if p.culprit == suspect && self.adopt_proof(Arc::new(p), false) {
                        return;
                    }
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Overlay

    async fn lookup(&self, target: Kid, mode: LookupMode) -> Vec<Contact> {
        let (seed, k) = {
            let s = self.state.borrow();
            (s.routing.closest(&target, s.routing.k()), s.routing.k())
        };
        let mut st = LookupState::new(self.kid, target, k, mode, seed);
        while let Some(c) = st.next_query() {
            match self.rpc(&c, Request::FindNode { target }).await {
                Some((Response::Nodes(list), _)) => {
                    let valid = self.admit_contacts(list);
                    st.record_response(&c.kid, valid);
                }
                _ => st.record_failure(&c.kid),
            }
        }
        let cycles = st.cycles() as u64;
        {
            let mut s = self.state.borrow_mut();
            s.report.lookups += 1;
            s.report.lookup_cycles += cycles;
        }
        self.net.transport.add_lookup_cycles(self.id, cycles);
        st.result()
    }

    /// Keeps contacts whose credentials prove their KID.
    fn admit_contacts(&self, list: Vec<Contact>) -> Vec<Contact> {
        let mut out = Vec::with_capacity(list.len());
        for c in list {
            if self.net.cache.kid_of(&c.credentials) != Ok(c.kid) {
                continue;
            }
            let mut s = self.state.borrow_mut();
            if s.routing.is_banned(&c.kid) {
                continue;
            }
            if !s.routing.is_frozen() {
                s.routing.insert(c.clone());
            }
            out.push(c);
        }
        out
    }

    fn random_in_bucket(&self, d: u8) -> Kid {
        let bits = self.bits() as usize;
        let mut s = self.state.borrow_mut();
        let mut t = Kid::random(&mut s.rng, bits);
        for i in 0..d as usize - 1 {
            t = t.with_bit(i, self.kid.bit(i));
        }
        t.with_bit(d as usize - 1, !self.kid.bit(d as usize - 1))
    }

    /// Joins through `bootstrap`: a lookup of the own KID, then greedy
    /// lookups for buckets shallower than the closest neighbour.
    pub async fn join(self: Rc<Self>, bootstrap: Option<Contact>) {
        if let Some(b) = bootstrap {
            self.state.borrow_mut().routing.insert(b);
        }
        self.lookup(self.kid, LookupMode::Exhaustive).await;
        let (deepest, k) = {
            let s = self.state.borrow();
            (s.routing.deepest_nonempty(), s.routing.k())
        };
        if let Some(deepest) = deepest {
            for d in 1..deepest {
                if self.state.borrow().routing.bucket(d).len() < k {
                    let t = self.random_in_bucket(d);
                    self.lookup(t, LookupMode::Greedy).await;
                }
            }
        }
    }

    /// Exhaustive lookups into every bucket with spare capacity.
    pub async fn refresh(self: Rc<Self>) {
        let (deepest, k) = {
            let s = self.state.borrow();
            (s.routing.deepest_nonempty(), s.routing.k())
        };
        let Some(deepest) = deepest else { return };
        for d in 1..=deepest {
            if self.state.borrow().routing.bucket(d).len() < k {
                let t = self.random_in_bucket(d);
                self.lookup(t, LookupMode::Exhaustive).await;
            }
        }
    }

    pub fn freeze(&self) {
        self.state.borrow_mut().routing.freeze();
    }

    // ------------------------------------------------------------------
    // Aggregation

    /// Signs a container of our own subtree, refusing a second hash for the
    /// same small-counter claim.
    fn sign_guarded(&self, c: &AggregateContainer) -> Option<ContainerSignature> {
        let d = c.subtree.depth();
        let mut s = self.state.borrow_mut();
        if c.c <= MAX_PROVABLE_COUNTER {
            match s.signed.get(&(d, c.c)) {
                Some(h) if *h != c.hash => {
                    s.report.self_conflicts += 1;
                    return None;
                }
                _ => {
                    s.signed.insert((d, c.c), c.hash);
                }
            }
        }
        Some(sign_container_claim(&self.keys, &self.creds, &c.hash, d, c.c))
    }

    fn check(&self, generation: u64) -> Step<()> {
        if self.state.borrow().generation == generation {
            Ok(())
        } else {
            Err(Stop::Interrupted)
        }
    }

    /// Builds and self-confirms the leaf, then runs the epochs. The task
    /// stays alive to redo epochs after rollbacks.
    pub async fn run(self: Rc<Self>) {
        let bits = self.bits();
        let leaf = build_leaf_container(self.vote.clone(), self.kid, &self.net.params.spec, bits)
            .expect("initial aggregate is valid");
        let sig = self.sign_guarded(&leaf).expect("first signature");
        let leaf = Arc::new(leaf);
        {
            let mut s = self.state.borrow_mut();
            let ds = &mut s.depths[bits as usize];
            ds.candidate = Some(leaf.clone());
            ds.candidate_sig = Some(sig.clone());
            ds.own_confirmed = Some(Rc::new(ConfirmedContainer {
                container: leaf.clone(),
                signatures: vec![(SignatureRole::Rule1, sig)],
                compensation: None,
            }));
            s.phase = if bits == 0 {
                Phase::RootConfirmation
            } else {
                Phase::Aggregating(bits)
            };
        }
        self.net.record(|| StateEvent::Confirmed {
            peer: self.id,
            depth: bits,
            container: leaf.clone(),
            compensated: false,
        });
        self.notify.notify();

        if self
            .adversary
            .as_ref()
            .is_some_and(|a| a.borrow().has(Behavior::OverreachRequests))
        {
            self.overreach().await;
        }

        loop {
            let (generation, epoch, phase) = {
                let s = self.state.borrow();
                (s.generation, s.epoch, s.phase)
            };
            if matches!(phase, Phase::Done | Phase::Aborted) {
                self.wait_for(|s| (s.generation != generation).then_some(())).await;
                continue;
            }
            let step = if epoch == 0 {
                self.confirm_root(generation).await
            } else {
                self.epoch_step(epoch, generation).await
            };
            let mut s = self.state.borrow_mut();
            if s.generation != generation {
                continue;
            }
            match step {
                Ok(()) if epoch == 0 => s.phase = Phase::Done,
                Ok(()) => {
                    s.epoch = epoch - 1;
                    s.phase = if epoch == 1 {
                        Phase::RootConfirmation
                    } else {
                        Phase::Aggregating(epoch - 1)
                    };
                }
                Err(Stop::Interrupted) => {}
                Err(Stop::Abort) => {
                    s.phase = Phase::Aborted;
                    drop(s);
                    self.net.record(|| StateEvent::Aborted {
                        peer: self.id,
                        depth: epoch,
                    });
                }
            }
        }
    }

    async fn overreach(&self) {
        let buckets: Vec<(u8, Vec<Contact>)> = {
            let s = self.state.borrow();
            (1..=self.bits())
                .map(|d| (d, s.routing.bucket(d).to_vec()))
                .filter(|(_, b)| !b.is_empty())
                .collect()
        };
        let requests = self.adversary.as_ref().unwrap().borrow().overreach_requests(&buckets);
        for (c, req) in requests {
            let _ = self.rpc(&c, req).await;
        }
    }

    /// Epoch `e`: pull `S(x, e)`, build the candidate for depth `e - 1` and
    /// confirm it.
    async fn epoch_step(&self, e: u8, generation: u64) -> Step<()> {
        let slot = if self.state.borrow().routing.bucket(e).is_empty() {
            SiblingSlot::default()
        } else {
            self.pull_sibling(e, generation).await?
        };
        let own = {
            let mut s = self.state.borrow_mut();
            s.depths[e as usize].sibling = Some(slot.clone());
            s.depths[e as usize].own_confirmed.clone().expect("own container before its epoch")
        };
        if let (Some(cc), Some(r)) = (&slot.container, &slot.responder) {
            self.net.record(|| StateEvent::Sibling {
                peer: self.id,
                depth: e,
                responder: r.kid,
                container: cc.container.clone(),
            });
        }
        let candidate = build_parent_container(&own.container, slot.container.as_ref().map(|c| &*c.container))
            .map_err(|_| Stop::Abort)?;
        let sig = self.sign_guarded(&candidate).ok_or(Stop::Abort)?;
        {
            let mut s = self.state.borrow_mut();
            let ds = &mut s.depths[e as usize - 1];
            ds.candidate = Some(Arc::new(candidate));
            ds.candidate_sig = Some(sig);
        }
        self.notify.notify();
        let confirmed = self.confirm_candidate(e - 1, generation).await?;
        self.check(generation)?;
        let container = confirmed.container.clone();
        let compensated = confirmed.compensation.is_some();
        self.state.borrow_mut().depths[e as usize - 1].own_confirmed = Some(Rc::new(confirmed));
        self.net.record(|| StateEvent::Confirmed {
            peer: self.id,
            depth: e - 1,
            container,
            compensated,
        });
        self.notify.notify();
        Ok(())
    }

    async fn pull_sibling(&self, e: u8, generation: u64) -> Step<SiblingSlot> {
        let contacts = {
            let s = self.state.borrow();
            let skip = s.distrusted.get(&e);
            let mut v: Vec<Contact> = s
                .routing
                .bucket(e)
                .iter()
                .filter(|c| !skip.is_some_and(|d| d.contains(&c.kid)))
                .cloned()
                .collect();
            v.sort_by_key(|c| xor_distance(&c.kid, &self.kid));
            v
        };
        let budget = self.net.params.retry_budget as usize;
        for c in contacts.into_iter().take(budget) {
            if self.state.borrow().routing.is_banned(&c.kid) {
                continue;
            }
            let reply = self.rpc(&c, Request::Pull { depth: e }).await;
            self.check(generation)?;
            let Some((Response::Container(cc), proofs)) = reply else {
                continue;
            };
            if self.accept_sibling(&c, &cc, e) {
                self.check(generation)?;
                return Ok(SiblingSlot {
                    container: Some(Rc::new(cc)),
                    responder: Some(c),
                    excluded: proofs.iter().map(|p| p.culprit).collect(),
                });
            }
            self.check(generation)?;
        }
        self.state.borrow_mut().report.unresolved.push(e);
        self.net.record(|| StateEvent::Unresolved { peer: self.id, depth: e });
        match self.net.params.mode {
            AbortMode::Strict => Err(Stop::Abort),
            AbortMode::Degrade => Ok(SiblingSlot::default()),
        }
    }

    fn accept_sibling(&self, from: &Contact, cc: &ConfirmedContainer, e: u8) -> bool {
        let bits = self.bits();
        let expected = SubtreeId::new(self.kid, e).sibling();
        if Some(cc.container.subtree) != expected {
            return false;
        }
        {
            let s = self.state.borrow();
            if s.routing.is_banned(&from.kid) {
                return false;
            }
            if s.routing.is_exhaustive(e) && cc.counter() as usize > s.routing.known_members(e) {
                return false;
            }
        }
        let Ok(checked) = check_confirmed(cc, &from.kid, bits, &self.net.cache) else {
            return false;
        };
        let s = self.state.borrow();
        !checked.iter().any(|c| s.routing.is_banned(&c.signer))
    }

    fn rule3_candidates(&self, e: u8) -> Vec<Contact> {
        let mut s = self.state.borrow_mut();
        let s = &mut *s;
        let mut out = Vec::new();
        for d in e + 1..=self.bits() {
            let mut group = s.routing.bucket(d).to_vec();
            group.shuffle(&mut s.rng);
            out.extend(group);
        }
        out
    }

    fn rule5_candidates(&self, e: u8, l: &Kid) -> Vec<Contact> {
        let mut s = self.state.borrow_mut();
        let s = &mut *s;
        let mut v: Vec<Contact> = s.routing.bucket(e).iter().filter(|c| c.kid != *l).cloned().collect();
        v.shuffle(&mut s.rng);
        v.sort_by_key(|c| subtree_depth_of(l, &c.kid));
        v
    }

    /// Asks candidates in turn to sign `candidate`; collects refusals as votes.
    async fn gather(
        &self,
        candidate: &Arc<AggregateContainer>,
        evidence: &[ContainerSignature],
        confirmers: Vec<Contact>,
        generation: u64,
        votes: &mut Vec<ChildVote>,
    ) -> Step<Option<ContainerSignature>> {
        let budget = self.net.params.retry_budget as usize;
        let mut tries = 0;
        for q in confirmers {
            if tries >= budget {
                break;
            }
            if self.state.borrow().routing.is_banned(&q.kid) {
                continue;
            }
            tries += 1;
            let reply = self
                .rpc(
                    &q,
                    Request::Confirm {
                        candidate: candidate.clone(),
                        evidence: evidence.to_vec(),
                    },
                )
                .await;
            self.check(generation)?;
            match reply {
                Some((Response::Signature(sig), _)) => {
                    let valid = sig.hash == candidate.hash
                        && sig.depth == candidate.subtree.depth()
                        && sig.counter == candidate.c
                        && self.net.cache.signer_of(&sig) == Ok(q.kid);
                    if valid {
                        return Ok(Some(sig));
                    }
                }
                Some((Response::Refusal { candidate: theirs, .. }, _)) => {
                    if let Some(theirs) = theirs {
                        if theirs.subtree == candidate.subtree && theirs.hash_matches() {
                            let v = child_view(&theirs, &self.kid, self.bits());
                            votes.push(ChildVote {
                                voter: q.kid,
                                own: v.own.map(|x| x.1),
                                sibling: v.sibling.map(|x| x.1),
                            });
                        }
                    }
                    self.lookup_proof(q.kid).await;
                    self.check(generation)?;
                }
                _ => {
                    self.lookup_proof(q.kid).await;
                    self.check(generation)?;
                }
            }
        }
        Ok(None)
    }

    async fn confirm_candidate(&self, depth: u8, generation: u64) -> Step<ConfirmedContainer> {
        let e = depth + 1;
        let (candidate, my_sig, own, slot) = {
            let s = self.state.borrow();
            let ds = &s.depths[depth as usize];
            (
                ds.candidate.clone().expect("candidate"),
                ds.candidate_sig.clone().expect("candidate signature"),
                s.depths[e as usize].own_confirmed.clone().expect("own child"),
                s.depths[e as usize].sibling.clone().unwrap_or_default(),
            )
        };
        let view = child_view(&candidate, &self.kid, self.bits());
        let c_own = view.own.map_or(candidate.c, |x| x.0);
        let c_sib = view.sibling.map_or(0, |x| x.0);
        let req = required_signature_set(candidate.c, c_own, c_sib).map_err(|_| Stop::Abort)?;
        let mut sigs = vec![(SignatureRole::Rule1, my_sig)];
        if req.requires(SignatureRole::Rule2) {
            let s = own.signature(SignatureRole::Rule1).expect("own child is signed").clone();
            sigs.push((SignatureRole::Rule2, s));
        }
        let sibling = slot.container.clone();
        if req.requires(SignatureRole::Rule4) {
            let sib = sibling.as_ref().expect("sibling present when c_sib > 0");
            let s = sib.signature(SignatureRole::Rule1).expect("sibling is signed").clone();
            sigs.push((SignatureRole::Rule4, s));
        }
        let evidence = {
            let s = self.state.borrow();
            evidence_at(&s, depth as usize)
        };
        let mut votes = Vec::new();
        let mut missing = false;
        if req.requires(SignatureRole::Rule3) {
            let confirmers = self.rule3_candidates(e);
            match self.gather(&candidate, &evidence, confirmers, generation, &mut votes).await? {
                Some(s) => sigs.push((SignatureRole::Rule3, s)),
                None => missing = true,
            }
        }
        if req.requires(SignatureRole::Rule5) {
            let l = slot.responder.clone().expect("sibling responder");
            let confirmers = if c_sib == 1 {
                vec![l]
            } else {
                self.rule5_candidates(e, &l.kid)
            };
            match self.gather(&candidate, &evidence, confirmers, generation, &mut votes).await? {
                Some(s) => sigs.push((SignatureRole::Rule5, s)),
                None => missing = true,
            }
        }
        sigs.sort_by_key(|(r, _)| *r);
        if !missing {
            return Ok(ConfirmedContainer {
                container: candidate,
                signatures: sigs,
                compensation: None,
            });
        }

        let mine = OwnChildren {
            me: self.kid,
            own: view.own.expect("non-leaf candidate"),
            sibling: view.sibling,
            c: candidate.c,
        };
        let mut s = self.state.borrow_mut();
        let used = *s.repeats.get(&depth).unwrap_or(&0);
        let left = self.net.params.retry_budget.saturating_sub(used);
        match resolve_conflict(&mine, &votes, left) {
            ConflictAction::RepeatChildAggregation => {
                *s.repeats.entry(depth).or_default() += 1;
                s.report.repeats += 1;
                self.rollback(&mut s, e + 1);
                drop(s);
                self.notify.notify();
                Err(Stop::Interrupted)
            }
            ConflictAction::RepeatSiblingPull => {
                *s.repeats.entry(depth).or_default() += 1;
                s.report.repeats += 1;
                if let Some(l) = &slot.responder {
                    s.distrusted.entry(e).or_default().insert(l.kid);
                }
                self.rollback(&mut s, e);
                drop(s);
                self.notify.notify();
                Err(Stop::Interrupted)
            }
            ConflictAction::Keep => {
                s.report.compensations += 1;
                sigs.retain(|(r, _)| !matches!(r, SignatureRole::Rule3 | SignatureRole::Rule5));
                let mut children = vec![(*own).clone()];
                if let Some(sib) = sibling {
                    children.push((*sib).clone());
                }
                Ok(ConfirmedContainer {
                    container: candidate,
                    signatures: sigs,
                    compensation: Some(children),
                })
            }
        }
    }

    /// Extra signatures on the root from random contacts.
    async fn confirm_root(&self, generation: u64) -> Step<()> {
        let (root, chosen, evidence) = {
            let mut s = self.state.borrow_mut();
            let s = &mut *s;
            let root = s.depths[0].own_confirmed.clone().expect("root after epoch 1");
            let r = root_confirmations(s.routing.k(), root.counter());
            let all: Vec<Contact> = s.routing.contacts().cloned().collect();
            let chosen: Vec<Contact> = all.choose_multiple(&mut s.rng, r.min(all.len())).cloned().collect();
            (root, chosen, evidence_at(s, 0))
        };
        let (mut signatures, mut refusals) = (0u32, 0u32);
        for q in &chosen {
            let reply = self
                .rpc(
                    q,
                    Request::Confirm {
                        candidate: root.container.clone(),
                        evidence: evidence.clone(),
                    },
                )
                .await;
            self.check(generation)?;
            match reply {
                Some((Response::Signature(sig), _))
                    if sig.hash == root.container.hash
                        && sig.depth == 0
                        && sig.counter == root.counter()
                        && self.net.cache.signer_of(&sig) == Ok(q.kid) =>
                {
                    signatures += 1
                }
                Some((Response::Refusal { .. }, _)) => refusals += 1,
                _ => {}
            }
        }
        {
            let mut s = self.state.borrow_mut();
            s.report.root_asked = chosen.len() as u32;
            s.report.root_signatures = signatures;
            s.report.root_refusals = refusals;
        }
        self.net.record(|| StateEvent::Root {
            peer: self.id,
            hash: root.container.hash,
            signatures,
            refusals,
        });
        Ok(())
    }

    // ------------------------------------------------------------------
    // Inspection

    pub fn root(&self) -> Option<Rc<ConfirmedContainer>> {
        let s = self.state.borrow();
        matches!(s.phase, Phase::Done | Phase::RootConfirmation)
            .then(|| s.depths[0].own_confirmed.clone())
            .flatten()
    }

    pub fn phase(&self) -> Phase {
        self.state.borrow().phase
    }

    pub fn report(&self) -> PeerReport {
        self.state.borrow().report.clone()
    }

    pub fn excluded(&self) -> Vec<Kid> {
        self.state.borrow().proofs.keys().copied().collect()
    }

    /// Every container this peer holds, with a label of where it sits.
    pub fn held_containers(&self) -> Vec<Arc<AggregateContainer>> {
        let s = self.state.borrow();
        let mut out = Vec::new();
        fn walk(cc: &ConfirmedContainer, out: &mut Vec<Arc<AggregateContainer>>) {
            out.push(cc.container.clone());
            for child in cc.compensation.iter().flatten() {
                walk(child, out);
            }
        }
        for ds in &s.depths {
            if let Some(cc) = &ds.own_confirmed {
                walk(cc, &mut out);
            }
            if let Some(cc) = ds.sibling.as_ref().and_then(|s| s.container.as_ref()) {
                walk(cc, &mut out);
            }
            if let Some(c) = &ds.candidate {
                out.push(c.clone());
            }
        }
        out
    }
}

/// Signatures backing both children of our candidate at `depth`.
fn evidence_at(s: &PeerState, depth: usize) -> Vec<ContainerSignature> {
    let mut out = Vec::new();
    if let Some(own) = s.depths.get(depth + 1).and_then(|d| d.own_confirmed.as_ref()) {
        out.extend(own.signatures.iter().map(|(_, sig)| sig.clone()));
    }
    if let Some(sib) = s
        .depths
        .get(depth + 1)
        .and_then(|d| d.sibling.as_ref())
        .and_then(|s| s.container.as_ref())
    {
        out.extend(sib.signatures.iter().map(|(_, sig)| sig.clone()));
    }
    out
}

