//! One scenario: setup, join, aggregation, and the observer that measures
//! what every peer leaked and received.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{seed_dishonest_set, AdversaryState};
use crate::algebra::{self, Aggregate, AlgebraKind, Rational};
use crate::container::{build_leaf_container, AggregateContainer, SubtreeId};
use crate::harness::config::{ConfigError, Layout, ScenarioConfig};
use crate::identity::{
    derive_kid, AdminPublicKey, Administrator, ContainerSignature, CredentialVerifier, Credentials, Hash, Kid, KidMode,
    PeerKeyPair,
};
use crate::overlay::transport::TransportEvent;
use crate::overlay::wire::{Envelope, Payload, Request, Response};
use crate::overlay::{dht_key, PeerId, Runtime, TransportStats};
use crate::protocol::{authorize_pull, Network, Peer, Phase, ProtocolParams, StateEvent, VerifyCache, MAX_PROVABLE_COUNTER};

/// Per-peer random stream `i + 1`; stream 0 drives the scenario itself.
pub fn peer_rng(seed: u64, peer: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(peer as u64 + 1);
    rng
}

fn random_vote<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Aggregate {
    let spec = config.spec();
    let dim = spec.dimension();
    let base = match spec.kind {
        AlgebraKind::Plurality => algebra::encode_plurality(rng.gen_range(0..config.options as usize), &spec),
        AlgebraKind::Ranked => {
            let mut ranking: Vec<usize> = (0..config.options as usize).collect();
            ranking.shuffle(rng);
            algebra::encode_ranked(&ranking, &spec)
        }
    }
    .expect("valid vote");
    if !spec.splitting || !rng.gen_bool(0.5) {
        return base;
    }
    // Split the voice between the drawn entry and one other.
    let i = base.entries().iter().position(|e| !e.is_zero()).expect("unit vote");
    let j = (i + rng.gen_range(1..dim)) % dim;
    let share = Rational::new(rng.gen_range(1..4), 4);
    let mut entries = vec![Rational::zero(); dim];
    entries[i] = share;
    entries[j] = Rational::from_integer(1) - share;
    Aggregate::from_entries(entries)
}

/// A valid initial aggregate different from `vote`.
fn alternate_vote(vote: &Aggregate) -> Aggregate {
    let dim = vote.dimension();
    let i = vote.entries().iter().position(|e| !e.is_zero()).unwrap_or(0);
    Aggregate::unit(dim, (i + 1) % dim)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageRecord {
    pub id: u64,
    pub from: PeerId,
    pub to: PeerId,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "crate::serde_hex::option")]
    pub container: Option<Hash>,
}

/// What the observer measures; only aggregation traffic counts.
#[derive(Default)]
struct Observer {
    active: bool,
    robust: bool,
    bits: u8,
    kids: Vec<Kid>,
    honest: Vec<bool>,
    dishonest_kids: BTreeSet<Kid>,
    verifier: Option<CredentialVerifier>,
    leaked: Vec<BigRational>,
    received: Vec<BigRational>,
    container_requests: Vec<u64>,
    /// Open pulls an honest responder should deny.
    unauthorized_open: BTreeMap<u64, ()>,
    unauthorized_pulls: u64,
    unauthorized_served: u64,
    timed_out: BTreeSet<u64>,
    /// Small-counter signatures of dishonest signers, per honest receiver.
    seen: BTreeMap<(PeerId, Kid, u8, u32), BTreeSet<Hash>>,
    records: Option<Vec<MessageRecord>>,
}

fn inverse(c: u32) -> BigRational {
    BigRational::new(BigInt::from(1), BigInt::from(c.max(1)))
}

impl Observer {
    fn on_event(&mut self, event: TransportEvent<'_, Envelope, Envelope>) {
        match event {
            TransportEvent::Request { id, from, to, body } => {
                let Payload::Request(req) = &body.payload else { return };
                self.record(id, from, to, req.kind(), None);
                if !self.active {
                    return;
                }
                match req {
                    Request::Pull { depth } => {
                        self.container_requests[from] += 1;
                        if self.honest[to] && !authorize_pull(&self.kids[to], &self.kids[from], *depth, self.bits) {
                            self.unauthorized_pulls += 1;
                            self.unauthorized_open.insert(id, ());
                        }
                    }
                    Request::Confirm { candidate, .. } => {
                        self.container_requests[from] += 1;
                        if self.robust {
                            self.leaked[from] += inverse(candidate.c);
                            self.received[to] += inverse(candidate.c);
                        }
                    }
                    _ => {}
                }
                self.observe_signatures(to, req.signatures());
            }
            TransportEvent::Response { id, from, to, body } => {
                let Payload::Response(resp) = &body.payload else { return };
                let hash = match resp {
                    Response::Container(cc) => Some(*cc.hash()),
                    _ => None,
                };
                self.record(id, from, to, response_kind(resp), hash);
                if !self.active {
                    return;
                }
                if self.unauthorized_open.remove(&id).is_some() && matches!(resp, Response::Container(_)) {
                    self.unauthorized_served += 1;
                }
                let mut exposed = Vec::new();
                match resp {
                    Response::Container(cc) => {
                        let mut stack = vec![cc];
                        while let Some(cc) = stack.pop() {
                            exposed.push(cc.counter());
                            stack.extend(cc.compensation.iter().flatten());
                        }
                    }
                    Response::Refusal {
                        candidate: Some(c), ..
                    } if self.robust => exposed.push(c.c),
                    _ => {}
                }
                for c in exposed {
                    self.leaked[from] += inverse(c);
                    self.received[to] += inverse(c);
                }
                if !self.timed_out.contains(&id) {
                    self.observe_signatures(to, resp.signatures());
                }
            }
            TransportEvent::TimedOut { id, .. } => {
                self.unauthorized_open.remove(&id);
                self.timed_out.insert(id);
            }
            TransportEvent::Dropped { .. } => {}
        }
    }

    fn record(&mut self, id: u64, from: PeerId, to: PeerId, kind: &str, container: Option<Hash>) {
        if let Some(r) = self.records.as_mut() {
            r.push(MessageRecord {
                id,
                from,
                to,
                kind: kind.to_string(),
                container,
            });
        }
    }

    fn observe_signatures(&mut self, receiver: PeerId, sigs: Vec<&ContainerSignature>) {
        if !self.honest[receiver] {
            return;
        }
        let Some(verifier) = &self.verifier else { return };
        for sig in sigs {
            if sig.counter > MAX_PROVABLE_COUNTER {
                continue;
            }
            let kid = derive_kid(&sig.signer, verifier.mode, verifier.bits);
            if !self.dishonest_kids.contains(&kid) {
                continue;
            }
            if sig.verify(verifier) != Ok(kid) {
                continue;
            }
            self.seen
                .entry((receiver, kid, sig.depth, sig.counter))
                .or_default()
                .insert(sig.hash);
        }
    }
}

fn response_kind(r: &Response) -> &'static str {
    match r {
        Response::Nodes(_) => "NODES",
        Response::Container(_) => "CONTAINER",
        Response::Signature(_) => "SIGNATURE",
        Response::Refusal { .. } => "REFUSAL",
        Response::Denied(_) => "DENIED",
        Response::Stored(_) => "STORED",
        Response::Value(_) => "VALUE",
    }
}

/// Static facts about one simulated peer.
#[derive(Debug, Clone)]
pub struct PeerInfo {
    pub kid: Kid,
    pub dishonest: bool,
    pub vote: Aggregate,
    pub leaf_hash: Hash,
}

pub struct Simulation {
    pub config: ScenarioConfig,
    rt: Runtime,
    net: Rc<Network>,
    pub peers: Vec<Rc<Peer>>,
    pub info: Vec<PeerInfo>,
    admin: AdminPublicKey,
    observer: Rc<RefCell<Observer>>,
    join_stats: Vec<TransportStats>,
    joined: bool,
    aggregated: bool,
}

impl Simulation {
    /// Creates the administrator and all peers. `transcript` keeps message
    /// and state records for [`crate::harness::transcript`].
    pub fn new(config: ScenarioConfig, transcript: bool) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let bits = config.bits;
        let mut admin = Administrator::generate(&mut rng, config.admin_bits)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let admin_pk = admin.public_key().clone();

        let mut keys = Vec::with_capacity(config.n);
        let mut creds = Vec::with_capacity(config.n);
        let mut kids: Vec<Kid> = Vec::with_capacity(config.n);
        let mut taken = BTreeSet::new();
        let mut requester = 0u64;
        while kids.len() < config.n {
            let k = PeerKeyPair::generate(&mut rng);
            // Without a token the KID is known up front in simulation mode,
            // which saves administrator work on collisions.
            if config.kid_mode == KidMode::SimulationPk {
                let probe = Credentials {
                    pk: k.public_key(),
                    token: crate::identity::AuthorizationToken(Vec::new()),
                };
                if taken.contains(&derive_kid(&probe, KidMode::SimulationPk, bits as usize)) {
                    continue;
                }
            }
            admin.enroll(requester);
            let token = admin
                .issue(requester, &k.public_key(), &mut rng)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            requester += 1;
            let c = Credentials {
                pk: k.public_key(),
                token,
            };
            let kid = derive_kid(&c, config.kid_mode, bits as usize);
            if !taken.insert(kid) {
                continue;
            }
            keys.push(k);
            creds.push(Arc::new(c));
            kids.push(kid);
        }
        debug_assert!(config.layout != Layout::Balanced || taken.len() == 1 << bits);

        let votes: Vec<Aggregate> = (0..config.n).map(|_| random_vote(&config, &mut rng)).collect();
        let dishonest = seed_dishonest_set(&kids, &config.adversary, &mut rng);

        let spec = config.spec();
        let params = ProtocolParams {
            bits,
            k: config.k,
            retry_budget: config.retry_budget,
            mode: config.mode,
            spec,
        };
        let verifier = CredentialVerifier {
            admin: admin_pk.clone(),
            mode: config.kid_mode,
            bits: bits as usize,
        };
        let rt = Runtime::new();
        let net = Network::new(&rt, VerifyCache::new(verifier.clone()), params, transcript);

        let mut peers = Vec::with_capacity(config.n);
        let mut info = Vec::with_capacity(config.n);
        for i in 0..config.n {
            let is_bad = dishonest.contains(&i);
            let adversary = is_bad.then(|| {
                AdversaryState::new(
                    config.adversary.behaviors.clone(),
                    keys[i].clone(),
                    creds[i].clone(),
                    kids[i],
                    bits,
                    &spec,
                    alternate_vote(&votes[i]),
                )
            });
            let leaf = build_leaf_container(votes[i].clone(), kids[i], &spec, bits).expect("valid vote");
            info.push(PeerInfo {
                kid: kids[i],
                dishonest: is_bad,
                vote: votes[i].clone(),
                leaf_hash: leaf.hash,
            });
            peers.push(Peer::new(
                i,
                keys[i].clone(),
                creds[i].clone(),
                kids[i],
                votes[i].clone(),
                net.clone(),
                peer_rng(config.seed, i),
                adversary,
            ));
        }

        let observer = Rc::new(RefCell::new(Observer {
            robust: config.robust_accounting,
            bits,
            kids: kids.clone(),
            honest: (0..config.n).map(|i| !dishonest.contains(&i)).collect(),
            dishonest_kids: dishonest.iter().map(|&i| kids[i]).collect(),
            verifier: (!dishonest.is_empty()).then_some(verifier),
            leaked: vec![BigRational::zero(); config.n],
            received: vec![BigRational::zero(); config.n],
            container_requests: vec![0; config.n],
            records: transcript.then(Vec::new),
            ..Default::default()
        }));
        let obs = observer.clone();
        net.transport.set_observer(Box::new(move |e| obs.borrow_mut().on_event(e)));

        Ok(Simulation {
            config,
            rt,
            net,
            peers,
            info,
            admin: admin_pk,
            observer,
            join_stats: Vec::new(),
            joined: false,
            aggregated: false,
        })
    }

    pub fn admin(&self) -> &AdminPublicKey {
        &self.admin
    }

    /// Peers join one after another, each through the previous one, then
    /// refresh their buckets once everybody is in.
    pub fn join(&mut self) {
        if self.joined {
            return;
        }
        for i in 0..self.peers.len() {
            let bootstrap = i.checked_sub(1).map(|j| self.peers[j].contact());
            self.rt.spawn(self.peers[i].clone().join(bootstrap));
            self.rt.run();
        }
        for p in &self.peers {
            self.rt.spawn(p.clone().refresh());
            self.rt.run();
        }
        for p in &self.peers {
            p.freeze();
        }
        self.join_stats = self.net.transport.stats();
        self.observer.borrow_mut().active = true;
        self.joined = true;
    }

    pub fn aggregate(&mut self) {
        self.join();
        if self.aggregated {
            return;
        }
        for p in &self.peers {
            self.rt.spawn(p.clone().run());
        }
        self.rt.run();
        self.aggregated = true;
    }

    /// Whether every routing table holds every peer of each non-full
    /// bucket: the precondition for exact sibling aggregates.
    pub fn routing_exhaustive(&self) -> bool {
        let bits = self.config.bits;
        self.peers.iter().all(|p| {
            let s = p.state();
            (1..=bits).all(|d| {
                let sub = SubtreeId::new(p.kid, d).sibling().expect("depth >= 1");
                let members = self.info.iter().filter(|i| sub.contains(&i.kid)).count();
                s.routing.bucket(d).len() == members.min(self.config.k)
            })
        })
    }

    /// Fold of every initial aggregate.
    pub fn expected_root(&self) -> Aggregate {
        self.info
            .iter()
            .fold(self.config.spec().zero(), |acc, i| algebra::combine(&acc, &i.vote).expect("fold"))
    }

    pub fn report(&self) -> MetricsReport {
        let obs = self.observer.borrow();
        let n = self.config.n;
        let stats = self.net.transport.stats();
        let expected = self.expected_root();
        let denominator = BigRational::from_integer(BigInt::from(n.saturating_sub(1).max(1)));
        let mut peers = Vec::with_capacity(n);
        let mut roots: BTreeMap<String, u32> = BTreeMap::new();
        let mut culprits = BTreeSet::new();
        let mut complete = 0;
        let mut aborted = 0;
        let mut incomplete = 0;
        for (i, p) in self.peers.iter().enumerate() {
            let agg = stats[i].since(self.join_stats.get(i).copied().as_ref().unwrap_or(&TransportStats::default()));
            let root = p.root();
            let report = p.report();
            let phase = p.phase();
            if !self.info[i].dishonest {
                match &root {
                    Some(r) => {
                        *roots.entry(hex::encode(r.hash())).or_default() += 1;
                        if r.counter() as usize == n && *r.container.aggregate == expected {
                            complete += 1;
                        }
                    }
                    None => {}
                }
                if phase == Phase::Aborted {
                    aborted += 1;
                }
                if !report.unresolved.is_empty() {
                    incomplete += 1;
                }
                culprits.extend(p.excluded());
            }
            let leaked = obs.leaked[i].clone();
            let received = obs.received[i].clone();
            peers.push(PeerMetrics {
                peer: i,
                kid: self.info[i].kid,
                dishonest: self.info[i].dishonest,
                l: ratio_f64(&(leaked.clone() / denominator.clone())),
                r: ratio_f64(&(received.clone() / denominator.clone())),
                leaked,
                received,
                inbox: agg.responses_received,
                outbox: agg.responses_given,
                container_requests: obs.container_requests[i],
                join_lookups: report.lookups,
                join_cycles: self.join_stats.get(i).map_or(0, |s| s.lookup_cycles),
                root_counter: root.as_ref().map(|r| r.counter()),
                phase: format!("{phase:?}"),
            });
        }
        let honest: Vec<&PeerMetrics> = peers.iter().filter(|p| !p.dishonest).collect();
        let lookups: u64 = honest.iter().map(|p| p.join_lookups).sum();
        let cycles: u64 = honest.iter().map(|p| p.join_cycles).sum();
        let mean_requests = mean(honest.iter().map(|p| p.container_requests as f64));
        MetricsReport {
            n,
            seed: self.config.seed,
            robust_accounting: self.config.robust_accounting,
            mean_lookup_cycles: if lookups == 0 { 0.0 } else { cycles as f64 / lookups as f64 },
            mean_container_requests: mean_requests,
            root_hashes: roots,
            detected_culprits: culprits.into_iter().collect(),
            complete,
            aborted,
            incomplete,
            unauthorized_pulls: obs.unauthorized_pulls,
            unauthorized_served: obs.unauthorized_served,
            peers,
        }
    }

    /// Dishonest peers some honest peer saw sign two hashes for the same
    /// small-counter claim.
    pub fn exposed_equivocators(&self) -> BTreeSet<Kid> {
        self.observer
            .borrow()
            .seen
            .iter()
            .filter(|(_, hashes)| hashes.len() > 1)
            .map(|((_, kid, _, _), _)| *kid)
            .collect()
    }

    /// Honest peers whose DHT store, anywhere among honest peers, holds a
    /// proof against `culprit` that verifies.
    pub fn proof_stored(&self, culprit: &Kid) -> bool {
        let key = dht_key(culprit);
        self.peers.iter().filter(|p| !p.is_dishonest()).any(|p| {
            let s = p.state();
            s.dht
                .get(&key)
                .and_then(|v| crate::protocol::DeviationProof::from_bytes(v))
                .is_some_and(|proof| proof.verify(&self.net.cache).ok() == Some(*culprit))
        })
    }

    /// Containers held by honest peers outside `S̄(x, d)` and `S(x, d)`.
    pub fn confinement_violations(&self) -> Vec<(PeerId, SubtreeId)> {
        let mut out = Vec::new();
        for p in self.peers.iter().filter(|p| !p.is_dishonest()) {
            for c in p.held_containers() {
                let sub = c.subtree;
                let own = SubtreeId::new(p.kid, sub.depth());
                if sub != own && Some(sub) != own.sibling() {
                    out.push((p.id, sub));
                }
            }
        }
        out
    }

    pub fn take_messages(&self) -> Vec<MessageRecord> {
        self.observer.borrow_mut().records.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn take_state_events(&self) -> Vec<StateEvent> {
        self.net.take_journal()
    }

    /// Root container of an honest peer, if it finished.
    pub fn root_of(&self, peer: PeerId) -> Option<Arc<AggregateContainer>> {
        self.peers[peer].root().map(|r| r.container.clone())
    }
}

/// Joins and aggregates `config`; the usual entry point.
pub fn run_scenario(config: ScenarioConfig) -> Result<(Simulation, MetricsReport), ConfigError> {
    let mut sim = Simulation::new(config, false)?;
    sim.aggregate();
    let report = sim.report();
    Ok((sim, report))
}

fn ratio_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Population standard deviation.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct PeerMetrics {
    pub peer: PeerId,
    pub kid: Kid,
    pub dishonest: bool,
    /// L_i: sum of `1/c` over the containers this peer responded with.
    pub leaked: BigRational,
    /// R_i: sum of `1/c` over the containers it received.
    pub received: BigRational,
    pub l: f64,
    pub r: f64,
    pub inbox: u64,
    pub outbox: u64,
    pub container_requests: u64,
    pub join_lookups: u64,
    pub join_cycles: u64,
    pub root_counter: Option<u32>,
    pub phase: String,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub n: usize,
    pub seed: u64,
    pub robust_accounting: bool,
    pub mean_lookup_cycles: f64,
    pub mean_container_requests: f64,
    /// Root hash (hex) to the number of honest peers that hold it.
    pub root_hashes: BTreeMap<String, u32>,
    pub detected_culprits: Vec<Kid>,
    /// Honest peers whose root is the exact fold over all peers.
    pub complete: usize,
    pub aborted: usize,
    /// Honest peers that skipped an unreachable sibling.
    pub incomplete: usize,
    pub unauthorized_pulls: u64,
    pub unauthorized_served: u64,
    pub peers: Vec<PeerMetrics>,
}

impl MetricsReport {
    pub fn honest(&self) -> impl Iterator<Item = &PeerMetrics> {
        self.peers.iter().filter(|p| !p.dishonest)
    }

    pub fn mean_l(&self) -> f64 {
        mean(self.honest().map(|p| p.l))
    }

    /// Honest peers holding the most common root.
    pub fn agreement(&self) -> u32 {
        self.root_hashes.values().copied().max().unwrap_or(0)
    }

    pub fn mean_r(&self) -> f64 {
        mean(self.honest().map(|p| p.r))
    }
}
