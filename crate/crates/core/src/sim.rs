//! The simulated network: nodes, memories, protocol instances and the event
//! handlers that drive them.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acp::{AcpNodeState, QueryAnswer, ReplyOutcome, TickOutcome};
use crate::bds::{self, NoiseParams, PauliErrorDistribution};
use crate::hardware::{self, ClassicalParams, EpId, MemoryId, NodeId, QuantumMemory, SlotClass};
use crate::kernel::{EventHandle, RngPurpose, RngStreams, SimTime, Timeline};
use crate::protocols::{
    check_pregenerated, swap_records, ConsumeReason, EpLock, EpOrigin, EpRecord, Payload, ProtocolMessage,
    SelectionPolicy,
};
use crate::resource::{
    create_rules, create_rules_acp, evaluate_rules, pump_partner, Reservation, ReservationBook, Rule, RuleAction,
    RuleHost, RuleId, RuleManager,
};
use crate::scenario::{Request, Strategy};
use crate::topology::{ForwardingTable, LinkId, Topology};

/// Physical and protocol parameters. Defaults are the reference set used
/// throughout the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub memories_per_node: usize,
    pub max_memory_acp: usize,
    pub memory_efficiency: f64,
    pub detector_efficiency: f64,
    pub bsm_success: f64,
    pub attenuation_db_per_km: f64,
    pub link_km: f64,
    /// Minimum spacing between photon emissions on one memory, s.
    pub emission_period: f64,
    pub initial_fidelity: f64,
    pub pauli_errors: [f64; 3],
    pub gate_fidelity: f64,
    pub measure_fidelity: f64,
    pub coherence_time: f64,
    pub swap_success: f64,
    pub light_speed: f64,
    pub forward_delay: f64,
    pub end_process_delay: f64,
    /// Lifetime of an ACP generation rule, s.
    pub acp_ttl: f64,
    /// Mean ACP sleep, s.
    pub sleep_base: f64,
    pub delta: f64,
    /// How long an ACP initiator waits for a reply, s.
    pub query_timeout: f64,
    /// Each retry after a failed herald re-runs the classical negotiation.
    pub negotiate_each_attempt: bool,
    /// Twirl both inputs to Werner form before each purification round.
    pub twirl_before_purify: bool,
    /// An ACP session keeps its memory pair after its EP is consumed and
    /// regenerates until the rule expires.
    pub acp_renew: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            memories_per_node: 10,
            max_memory_acp: 5,
            memory_efficiency: 0.6,
            detector_efficiency: 0.95,
            bsm_success: 0.5,
            attenuation_db_per_km: 0.2,
            link_km: 10.0,
            emission_period: 50e-6,
            initial_fidelity: 0.95,
            pauli_errors: [1.0 / 3.0; 3],
            gate_fidelity: 0.99,
            measure_fidelity: 0.99,
            coherence_time: 2.0,
            swap_success: 1.0,
            light_speed: 2e8,
            forward_delay: 20e-6,
            end_process_delay: 100e-6,
            acp_ttl: 1.0,
            sleep_base: 10e-3,
            delta: 0.05,
            query_timeout: 1e-3,
            negotiate_each_attempt: true,
            twirl_before_purify: true,
            acp_renew: true,
        }
    }
}

impl SimParams {
    pub fn classical(&self) -> ClassicalParams {
        ClassicalParams {
            light_speed: self.light_speed,
            forward_delay: self.forward_delay,
            end_process_delay: self.end_process_delay,
        }
    }

    pub fn noise(&self) -> NoiseParams {
        NoiseParams {
            gate_fidelity: self.gate_fidelity,
            measure_fidelity: self.measure_fidelity,
            coherence_time: self.coherence_time,
        }
    }

    pub fn pauli(&self) -> Option<PauliErrorDistribution> {
        let [x, y, z] = self.pauli_errors;
        PauliErrorDistribution::new(x, y, z)
    }

    /// First violated constraint as `(key, reason)`.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let prob = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err((k.to_string(), format!("{v} is not a probability")))
            }
        };
        let pos = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((k.to_string(), format!("{v} must be positive")))
            }
        };
        prob("memory_efficiency", self.memory_efficiency)?;
        prob("detector_efficiency", self.detector_efficiency)?;
        prob("bsm_success", self.bsm_success)?;
        prob("initial_fidelity", self.initial_fidelity)?;
        prob("swap_success", self.swap_success)?;
        pos("gate_fidelity", self.gate_fidelity)?;
        prob("gate_fidelity", self.gate_fidelity)?;
        pos("measure_fidelity", self.measure_fidelity)?;
        prob("measure_fidelity", self.measure_fidelity)?;
        pos("coherence_time", self.coherence_time)?;
        pos("light_speed", self.light_speed)?;
        pos("link_km", self.link_km)?;
        pos("emission_period", self.emission_period)?;
        pos("acp_ttl", self.acp_ttl)?;
        pos("sleep_base", self.sleep_base)?;
        pos("query_timeout", self.query_timeout)?;
        if self.forward_delay < 0.0 || self.end_process_delay < 0.0 {
            return Err(("forward_delay".into(), "delays must be non-negative".into()));
        }
        if self.attenuation_db_per_km < 0.0 {
            return Err(("attenuation_db_per_km".into(), "must be non-negative".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(("delta".into(), "must be non-negative".into()));
        }
        if self.pauli().is_none() {
            return Err(("pauli_errors".into(), "must be non-negative and sum to 1".into()));
        }
        if self.max_memory_acp > self.memories_per_node {
            return Err(("max_memory_acp".into(), "exceeds memories_per_node".into()));
        }
        if self.memories_per_node - self.max_memory_acp < 2 {
            return Err(("memories_per_node".into(), "need at least 2 reserved memories per node".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub strategy: Strategy,
    pub purification: bool,
    pub policy: SelectionPolicy,
    pub seed: u64,
}

/// Outcome of one request, as seen at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutcome {
    pub request: Request,
    pub path: Vec<NodeId>,
    /// `(completion time, delivered fidelity)` when served.
    pub served: Option<(SimTime, f64)>,
}

/// Invariant checks collected during a run. Violations are recorded, not
/// panicked on, so a test can report them all.
#[derive(Debug, Clone, Default)]
pub struct Audit {
    pub violations: Vec<String>,
    pub eps_created: u64,
    pub consumed: BTreeMap<&'static str, u64>,
    pub max_counter: usize,
    pub max_acp_occupancy: usize,
    pub max_table_error: f64,
    pub reuse_deliveries: u64,
    /// Per link: `[request hops started, hops served by reuse]`.
    pub link_reuse: BTreeMap<LinkId, [u64; 2]>,
    /// ACP EPs generated per link.
    pub link_acp_eps: BTreeMap<LinkId, u64>,
    pub attempts: u64,
    /// Path notifications sent to intermediate nodes.
    pub path_notifies: u64,
    pub events: u64,
    digest: DefaultHasher,
}

impl Audit {
    fn violation(&mut self, at: SimTime, what: String) {
        if self.violations.len() < 100 {
            self.violations.push(format!("{at}: {what}"));
        }
    }

    pub fn consumed_total(&self) -> u64 {
        self.consumed.values().sum()
    }

    /// Hash over every dispatched event; equal seeds give equal digests.
    pub fn digest(&self) -> u64 {
        self.digest.finish()
    }
}

fn reason_name(r: ConsumeReason) -> &'static str {
    match r {
        ConsumeReason::Delivered => "delivered",
        ConsumeReason::Discarded => "discarded",
        ConsumeReason::Swapped => "swapped",
        ConsumeReason::PurifiedMeasured => "purified_measured",
        ConsumeReason::PurifyFailed => "purify_failed",
        ConsumeReason::Expired => "expired",
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Tick(NodeId),
    Message(ProtocolMessage),
    Emit(u64),
    Herald { generation: u64, success: bool, emitted_at: SimTime },
    SessionExpiry(u64),
    RequestArrival(Box<Request>),
    RequestStart(u64),
    RequestEnd(u64),
}

impl Event {
    fn digest_into(&self, h: &mut DefaultHasher) {
        match self {
            Event::Tick(n) => (0u8, n.0).hash(h),
            Event::Message(m) => (1u8, m.src.0, m.dst.0, m.kind() as u8).hash(h),
            Event::Emit(g) => (2u8, g).hash(h),
            Event::Herald { generation, success, .. } => (3u8, generation, success).hash(h),
            Event::SessionExpiry(s) => (4u8, s).hash(h),
            Event::RequestArrival(r) => (5u8, r.id).hash(h),
            Event::RequestStart(r) => (6u8, r).hash(h),
            Event::RequestEnd(r) => (7u8, r).hash(h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Claim {
    Pending,
    Session(u64),
}

#[derive(Debug, Clone)]
struct Session {
    initiator: NodeId,
    init_mem: Option<MemoryId>,
    responder: NodeId,
    resp_mem: MemoryId,
    /// The responder's counter still includes this session; it is released
    /// once the first generation finishes.
    resp_counted: bool,
    link: LinkId,
    expiry: SimTime,
    expiry_event: EventHandle,
    rule: Option<RuleId>,
    generation: Option<u64>,
    ep: Option<EpId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GenPurpose {
    Request { request: u64, hop: usize },
    Acp { session: u64 },
}

#[derive(Debug, Clone)]
struct Generation {
    link: LinkId,
    /// Coordinator; sends the negotiation messages.
    lead: NodeId,
    ends: [(NodeId, MemoryId); 2],
    purpose: GenPurpose,
    reuse: Option<EpId>,
    reuse_at_start: bool,
    attempts: u64,
}

#[derive(Debug, Clone)]
struct Purification {
    kept: EpId,
    meas: EpId,
    link: LinkId,
}

#[derive(Debug, Clone)]
struct RequestState {
    request: Request,
    path: Vec<NodeId>,
    reservation: Option<Reservation>,
    rules: Vec<RuleId>,
    /// In-flight swap notifications per path position.
    outstanding: Vec<u32>,
    generations: BTreeMap<usize, u64>,
    active: bool,
    served: Option<(SimTime, f64)>,
}

pub struct World {
    pub topo: Topology,
    routes: ForwardingTable,
    params: SimParams,
    cfg: WorldConfig,
    classical: ClassicalParams,
    noise: NoiseParams,
    pauli: PauliErrorDistribution,
    timeline: Timeline<Event>,
    rngs: RngStreams,
    memories: Vec<QuantumMemory>,
    claims: Vec<Option<Claim>>,
    acp_mems: Vec<Vec<MemoryId>>,
    reserved_mems: Vec<Vec<MemoryId>>,
    eps: BTreeMap<EpId, EpRecord>,
    next_ep: u64,
    /// ACP-class EPs per link.
    link_eps: Vec<BTreeSet<EpId>>,
    ep_session: BTreeMap<EpId, u64>,
    acp: Vec<AcpNodeState>,
    sessions: BTreeMap<u64, Session>,
    next_session: u64,
    generations: BTreeMap<u64, Generation>,
    next_generation: u64,
    purifications: BTreeMap<u64, Purification>,
    next_purification: u64,
    requests: BTreeMap<u64, RequestState>,
    rules: RuleManager,
    book: ReservationBook,
    latency_cache: HashMap<(NodeId, NodeId), SimTime>,
    link_success: Vec<f64>,
    link_herald: Vec<SimTime>,
    pub audit: Audit,
    outcomes: Vec<RequestOutcome>,
}

impl World {
    pub fn new(topo: Topology, params: SimParams, cfg: WorldConfig) -> Result<Self, crate::error::ConfigError> {
        let routes = ForwardingTable::build(&topo)?;
        let classical = params.classical();
        let pauli = params.pauli().expect("validated parameters");
        let mut memories = Vec::new();
        let mut acp_mems = Vec::new();
        let mut reserved_mems = Vec::new();
        for n in topo.nodes() {
            let mut a = Vec::new();
            let mut r = Vec::new();
            for k in 0..params.memories_per_node {
                let id = MemoryId(memories.len());
                let class = if k < params.max_memory_acp { SlotClass::Acp } else { SlotClass::Reserved };
                memories.push(QuantumMemory::new(id, n, class));
                match class {
                    SlotClass::Acp => a.push(id),
                    SlotClass::Reserved => r.push(id),
                }
            }
            acp_mems.push(a);
            reserved_mems.push(r);
        }
        let acp = topo
            .nodes()
            .map(|n| {
                let neighbors: Vec<NodeId> = topo.neighbors(n).iter().map(|e| e.0).collect();
                let mut s = AcpNodeState::new(n, &neighbors, params.max_memory_acp, params.sleep_base, params.delta);
                s.query_timeout = SimTime::from_secs(params.query_timeout);
                s
            })
            .collect();
        let link_success = topo
            .links
            .iter()
            .map(|l| hardware::attempt_success_prob(l, params.memory_efficiency))
            .collect();
        let link_herald = topo.links.iter().map(|l| hardware::herald_delay(l, &classical)).collect();
        let mut w = World {
            link_eps: vec![BTreeSet::new(); topo.links.len()],
            claims: vec![None; memories.len()],
            noise: params.noise(),
            pauli,
            classical,
            routes,
            timeline: Timeline::new(),
            rngs: RngStreams::new(cfg.seed),
            memories,
            acp_mems,
            reserved_mems,
            eps: BTreeMap::new(),
            next_ep: 0,
            ep_session: BTreeMap::new(),
            acp,
            sessions: BTreeMap::new(),
            next_session: 0,
            generations: BTreeMap::new(),
            next_generation: 0,
            purifications: BTreeMap::new(),
            next_purification: 0,
            requests: BTreeMap::new(),
            rules: RuleManager::new(),
            book: ReservationBook::default(),
            latency_cache: HashMap::new(),
            link_success,
            link_herald,
            audit: Audit::default(),
            outcomes: Vec::new(),
            topo,
            params,
            cfg,
        };
        if w.continuous() {
            for n in w.topo.nodes() {
                let d = w.sleep(n);
                w.timeline.schedule(d, Event::Tick(n));
            }
        }
        Ok(w)
    }

    fn continuous(&self) -> bool {
        matches!(self.cfg.strategy, Strategy::Ucp | Strategy::Acp)
    }

    pub fn now(&self) -> SimTime {
        self.timeline.now()
    }

    pub fn submit(&mut self, request: Request) {
        self.timeline.schedule(request.arrival, Event::RequestArrival(Box::new(request)));
    }

    pub fn acp_state(&self, n: NodeId) -> &AcpNodeState {
        &self.acp[n.0]
    }

    pub fn live_eps(&self) -> usize {
        self.eps.len()
    }

    /// ACP-class EPs currently stored on `link`.
    pub fn link_ep_count(&self, link: LinkId) -> usize {
        self.link_eps[link].len()
    }

    pub fn take_outcomes(&mut self) -> Vec<RequestOutcome> {
        std::mem::take(&mut self.outcomes)
    }

    pub fn run_until(&mut self, t_end: SimTime) {
        while let Some((t, _, ev)) = self.timeline.pop_until(t_end) {
            ev.digest_into(&mut self.audit.digest);
            t.0.hash(&mut self.audit.digest);
            self.audit.events += 1;
            self.dispatch(ev);
            self.check_invariants();
        }
        self.timeline.advance_to(t_end);
    }

    /// End every open request (counted unserved) and release everything.
    pub fn finish(&mut self) {
        let open: Vec<u64> = self.requests.keys().copied().collect();
        for r in open {
            self.end_request(r);
        }
    }

    // ---- helpers ---------------------------------------------------------

    fn sleep(&mut self, n: NodeId) -> SimTime {
        let d = {
            let base = self.acp[n.0].sleep_base;
            base * self.rngs.get(n.0, RngPurpose::Sleep).random_range(0.5..=1.5)
        };
        SimTime::from_secs(d)
    }

    fn latency(&mut self, a: NodeId, b: NodeId) -> SimTime {
        if let Some(t) = self.latency_cache.get(&(a, b)) {
            return *t;
        }
        let path = self.routes.path(a, b);
        let t = hardware::classical_latency(
            self.topo.path_km(&path) * 1e3,
            path.len().saturating_sub(2),
            &self.classical,
        );
        self.latency_cache.insert((a, b), t);
        t
    }

    fn send(&mut self, src: NodeId, dst: NodeId, payload: Payload) {
        let at = self.now() + self.latency(src, dst);
        self.timeline.schedule(at, Event::Message(ProtocolMessage { src, dst, payload }));
    }

    fn free_acp_memory(&self, n: NodeId) -> Option<MemoryId> {
        self.acp_mems[n.0]
            .iter()
            .copied()
            .find(|m| self.claims[m.0].is_none() && self.memories[m.0].is_empty())
    }

    fn touch(&mut self, m: MemoryId, ep: EpId) {
        let now = self.now();
        let rec = self.eps.get_mut(&ep).expect("live EP");
        self.memories[m.0].touch(&mut rec.state, now, self.noise.coherence_time, &self.pauli);
    }

    fn touch_ep(&mut self, ep: EpId) {
        let ends = self.eps[&ep].ends;
        for (_, m) in ends {
            self.touch(m, ep);
        }
    }

    fn new_ep(&mut self, ends: [(NodeId, MemoryId); 2], state: bds::BellDiagonalState, created_at: SimTime, origin: EpOrigin) -> EpId {
        let id = EpId(self.next_ep);
        self.next_ep += 1;
        for (_, m) in ends {
            let mem = &mut self.memories[m.0];
            assert!(mem.ep.is_none(), "memory already holds an EP");
            mem.ep = Some(id);
            mem.last_touch = created_at;
        }
        self.eps.insert(
            id,
            EpRecord {
                id,
                ends,
                state,
                created_at,
                origin,
                lock: None,
            },
        );
        self.audit.eps_created += 1;
        id
    }

    fn destroy_ep(&mut self, ep: EpId, reason: ConsumeReason) -> EpRecord {
        let now = self.now();
        let Some(rec) = self.eps.remove(&ep) else {
            self.audit.violation(now, format!("EP {ep:?} consumed twice ({reason:?})"));
            panic!("EP consumed twice");
        };
        let read = !matches!(reason, ConsumeReason::Expired | ConsumeReason::Discarded);
        for (_, m) in rec.ends {
            let mem = &mut self.memories[m.0];
            if mem.ep != Some(ep) {
                self.audit.violation(now, format!("memory {m:?} does not hold {ep:?}"));
            }
            if read && mem.last_touch != now {
                self.audit.violation(now, format!("{ep:?} consumed without touch ({reason:?})"));
            }
            mem.ep = None;
        }
        if let Some(l) = self.topo.link_between(rec.ends[0].0, rec.ends[1].0) {
            self.link_eps[l].remove(&ep);
        }
        *self.audit.consumed.entry(reason_name(reason)).or_default() += 1;
        rec
    }

    fn link_of(&self, a: NodeId, b: NodeId) -> LinkId {
        self.topo.link_between(a, b).expect("neighbours")
    }

    fn check_invariants(&mut self) {
        let now = self.now();
        for n in 0..self.acp.len() {
            let counter = self.acp[n].counter();
            let occupied = self.acp_mems[n].iter().filter(|m| self.claims[m.0].is_some()).count();
            self.audit.max_counter = self.audit.max_counter.max(counter);
            self.audit.max_acp_occupancy = self.audit.max_acp_occupancy.max(occupied);
            if occupied > self.params.max_memory_acp || counter > occupied {
                self.audit
                    .violation(now, format!("node {n}: counter {counter}, occupied ACP memories {occupied}"));
            }
            if self.acp[n].pending_len() > counter {
                self.audit.violation(now, format!("node {n}: more pending queries than counter"));
            }
            let stray = self.acp_mems[n]
                .iter()
                .filter(|m| self.claims[m.0].is_none() && self.memories[m.0].ep.is_some())
                .count();
            if stray > 0 {
                self.audit.violation(now, format!("node {n}: EP in unclaimed ACP memory"));
            }
        }
    }

    // ---- dispatch --------------------------------------------------------

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Tick(n) => self.on_tick(n),
            Event::Message(m) => self.on_message(m),
            Event::Emit(g) => self.on_emit(g),
            Event::Herald {
                generation,
                success,
                emitted_at,
            } => self.on_herald(generation, success, emitted_at),
            Event::SessionExpiry(s) => {
                if self.sessions.contains_key(&s) {
                    self.end_session(s, true);
                }
            }
            Event::RequestArrival(r) => self.on_arrival(*r),
            Event::RequestStart(r) => self.on_request_start(r),
            Event::RequestEnd(r) => self.end_request(r),
        }
    }

    fn on_message(&mut self, m: ProtocolMessage) {
        match m.payload {
            Payload::Query { query, memory } => self.on_query(m.dst, m.src, query, memory),
            Payload::ReplyYes { query, session, .. } => self.on_reply(m.dst, query, Some(session)),
            Payload::ReplyNo { query } => self.on_reply(m.dst, query, None),
            Payload::EgRequest { generation } => {
                if self.generations.contains_key(&generation) {
                    self.send(m.dst, m.src, Payload::EgResponse { generation });
                }
            }
            Payload::EgResponse { generation } => self.on_negotiated(generation),
            Payload::Herald { .. } => unreachable!("heralds are scheduled directly"),
            Payload::SwapResult { request } => self.on_swap_result(m.dst, request),
            Payload::PurifyCoord { purification } => {
                if self.purifications.contains_key(&purification) {
                    self.send(m.dst, m.src, Payload::PurifyCoordAck { purification });
                }
            }
            Payload::PurifyCoordAck { purification } => self.on_purify_ready(purification),
            Payload::PathNotify { path } => self.reward(m.dst, &path),
        }
    }

    // ---- continuous generation -------------------------------------------

    fn release_pending(&mut self, n: NodeId) {
        let now = self.now();
        for m in self.acp[n.0].expire_pending(now) {
            self.claims[m.0] = None;
        }
    }

    fn on_tick(&mut self, n: NodeId) {
        let now = self.now();
        self.release_pending(n);
        let free = self.free_acp_memory(n);
        let outcome = {
            let rng = self.rngs.get(n.0, RngPurpose::Roulette);
            self.acp[n.0].tick(free, now, rng)
        };
        if let TickOutcome::Query { query, neighbor, memory } = outcome {
            self.claims[memory.0] = Some(Claim::Pending);
            self.send(n, neighbor, Payload::Query { query, memory });
        }
        let d = self.sleep(n);
        self.timeline.schedule_in(d, Event::Tick(n));
    }

    fn on_query(&mut self, x: NodeId, a: NodeId, query: u64, _their_memory: MemoryId) {
        self.release_pending(x);
        let free = self.free_acp_memory(x);
        match self.acp[x.0].handle_query(free) {
            QueryAnswer::Yes(m) => {
                let sid = self.next_session;
                self.next_session += 1;
                let expiry = self.now() + self.latency(x, a) + SimTime::from_secs(self.params.acp_ttl);
                let expiry_event = self.timeline.schedule(expiry, Event::SessionExpiry(sid));
                self.claims[m.0] = Some(Claim::Session(sid));
                let link = self.link_of(a, x);
                self.sessions.insert(
                    sid,
                    Session {
                        initiator: a,
                        init_mem: None,
                        responder: x,
                        resp_mem: m,
                        resp_counted: true,
                        link,
                        expiry,
                        expiry_event,
                        rule: None,
                        generation: None,
                        ep: None,
                    },
                );
                self.send(x, a, Payload::ReplyYes { query, session: sid, memory: m });
            }
            QueryAnswer::No => self.send(x, a, Payload::ReplyNo { query }),
        }
    }

    fn on_reply(&mut self, a: NodeId, query: u64, session: Option<u64>) {
        let now = self.now();
        self.release_pending(a);
        match self.acp[a.0].handle_reply(query, session.is_some(), now) {
            ReplyOutcome::CreateRule { memory, .. } => {
                let sid = session.expect("accepted reply carries a session");
                let Some(s) = self.sessions.get_mut(&sid) else {
                    // responder side already expired
                    self.acp[a.0].release();
                    self.claims[memory.0] = None;
                    return;
                };
                s.init_mem = Some(memory);
                let ttl = s.expiry.saturating_sub(now);
                self.claims[memory.0] = Some(Claim::Session(sid));
                let rule = self.rules.install(create_rules_acp(sid, a, now, ttl));
                self.sessions.get_mut(&sid).expect("present").rule = Some(rule);
                self.evaluate(a);
            }
            ReplyOutcome::Released { memory } => self.claims[memory.0] = None,
            ReplyOutcome::Stale => {}
        }
    }

    /// Tear down an ACP session, destroying its EP if `destroy_ep` and the EP
    /// is still housed in the session's memories.
    fn end_session(&mut self, sid: u64, destroy_ep: bool) {
        let Some(s) = self.sessions.remove(&sid) else { return };
        self.timeline.cancel(s.expiry_event);
        if let Some(r) = s.rule {
            self.rules.remove(r);
        }
        if let Some(g) = s.generation {
            self.generations.remove(&g);
        }
        if let Some(ep) = s.ep {
            self.ep_session.remove(&ep);
            if destroy_ep && self.eps.contains_key(&ep) {
                self.destroy_ep(ep, ConsumeReason::Expired);
            }
        }
        self.claims[s.resp_mem.0] = None;
        if s.resp_counted {
            self.acp[s.responder.0].release();
        }
        if let Some(m) = s.init_mem {
            self.claims[m.0] = None;
            self.acp[s.initiator.0].release();
        }
        // A waiting request may be blocked on a purification this ended.
        let (u, v) = self.topo.links[s.link].endpoints;
        self.evaluate(u);
        self.evaluate(v);
    }

    fn reward(&mut self, n: NodeId, path: &[NodeId]) {
        self.acp[n.0].reward(path);
        let t = &self.acp[n.0].table;
        let err = (t.sum() - 1.0).abs();
        self.audit.max_table_error = self.audit.max_table_error.max(err);
        if !t.is_normalised(1e-12) {
            let now = self.now();
            self.audit.violation(now, format!("table at node {} not normalised", n.0));
        }
    }

    // ---- rules -----------------------------------------------------------

    fn evaluate(&mut self, n: NodeId) {
        let now = self.now();
        evaluate_rules(self, n, now);
    }
}

impl RuleHost for World {
    fn rules(&mut self) -> &mut RuleManager {
        &mut self.rules
    }

    fn condition(&self, rule: &Rule) -> bool {
        match rule.action {
            RuleAction::AcpGenerate { session } => self.sessions.get(&session).is_some_and(|s| {
                s.init_mem.is_some() && s.generation.is_none() && s.ep.is_none()
            }),
            RuleAction::Generate { request, hop } => {
                let Some(rs) = self.requests.get(&request) else { return false };
                let Some(res) = &rs.reservation else { return false };
                if !rs.active || rs.served.is_some() || rs.generations.contains_key(&hop) {
                    return false;
                }
                let (mu, mv) = res.hop_memories(hop);
                if !(self.memories[mu.0].is_empty() && self.memories[mv.0].is_empty()) {
                    return false;
                }
                // A pumping round in flight on this link may hand over its
                // kept EP shortly; wait for it rather than start from scratch.
                let link = self.link_of(rs.path[hop], rs.path[hop + 1]);
                let eps = self.link_eps[link].iter().map(|e| &self.eps[e]);
                let mut purifying = false;
                for e in eps {
                    match e.lock {
                        None if e.origin == EpOrigin::Acp => return true,
                        Some(EpLock::Purify(_)) => purifying = true,
                        _ => {}
                    }
                }
                !purifying
            }
            RuleAction::Swap { request, position } => {
                let Some(rs) = self.requests.get(&request) else { return false };
                let Some(res) = &rs.reservation else { return false };
                if !rs.active || rs.served.is_some() || rs.outstanding[position] > 0 {
                    return false;
                }
                let [l, r] = res.slots[position];
                let (l, r) = (l.expect("granted"), r.expect("granted"));
                let (el, er) = (self.memories[l.0].ep, self.memories[r.0].ep);
                match (el, er) {
                    (Some(a), Some(b)) => a != b,
                    _ => false,
                }
            }
        }
    }

    fn fire(&mut self, rule: &Rule) {
        match rule.action {
            RuleAction::AcpGenerate { session } => {
                let s = &self.sessions[&session];
                let ends = [
                    (s.initiator, s.init_mem.expect("condition")),
                    (s.responder, s.resp_mem),
                ];
                let g = self.start_generation(s.link, s.initiator, ends, GenPurpose::Acp { session }, None);
                self.sessions.get_mut(&session).expect("present").generation = Some(g);
                // the query round trip doubled as the negotiation
                self.timeline.schedule(self.now(), Event::Emit(g));
            }
            RuleAction::Generate { request, hop } => {
                let rs = &self.requests[&request];
                let (u, v) = (rs.path[hop], rs.path[hop + 1]);
                let (mu, mv) = rs.reservation.as_ref().expect("condition").hop_memories(hop);
                let lead = self.topo.primary(u, v);
                let link = self.link_of(u, v);
                let reuse = self.pick_reuse(link, lead);
                self.audit.link_reuse.entry(link).or_default()[0] += 1;
                let g = self.start_generation(link, lead, [(u, mu), (v, mv)], GenPurpose::Request { request, hop }, reuse);
                self.requests.get_mut(&request).expect("present").generations.insert(hop, g);
                let other = if lead == u { v } else { u };
                self.send(lead, other, Payload::EgRequest { generation: g });
            }
            RuleAction::Swap { request, position } => self.swap(request, position),
        }
    }
}

impl World {
    // ---- generation ------------------------------------------------------

    fn pick_reuse(&mut self, link: LinkId, lead: NodeId) -> Option<EpId> {
        if !self.continuous() {
            return None;
        }
        let policy = self.cfg.policy;
        let ids: Vec<EpId> = self.link_eps[link].iter().copied().collect();
        let eps = &self.eps;
        let rng = self.rngs.get(lead.0, RngPurpose::EpSelection);
        check_pregenerated(ids.iter().map(|id| &eps[id]), policy, rng)
    }

    fn start_generation(
        &mut self,
        link: LinkId,
        lead: NodeId,
        ends: [(NodeId, MemoryId); 2],
        purpose: GenPurpose,
        reuse: Option<EpId>,
    ) -> u64 {
        let g = self.next_generation;
        self.next_generation += 1;
        if let Some(ep) = reuse {
            self.eps.get_mut(&ep).expect("live").lock = Some(EpLock::Reuse(g));
        }
        self.generations.insert(
            g,
            Generation {
                link,
                lead,
                ends,
                purpose,
                reuse,
                reuse_at_start: reuse.is_some(),
                attempts: 0,
            },
        );
        g
    }

    fn unlock(&mut self, ep: EpId) {
        if let Some(rec) = self.eps.get_mut(&ep) {
            rec.lock = None;
        }
    }

    /// Negotiation round trip finished at the lead node.
    fn on_negotiated(&mut self, g: u64) {
        let Some(gen) = self.generations.get(&g).cloned() else { return };
        if let Some(ep) = gen.reuse {
            if self.try_reallocate(g, &gen, ep) {
                return;
            }
            self.unlock(ep);
            let entry = self.generations.get_mut(&g).expect("present");
            entry.reuse = None;
            entry.reuse_at_start = false;
            self.pump_link(gen.link);
        }
        self.timeline.schedule(self.now(), Event::Emit(g));
    }

    /// Move a pre-generated EP into the generation's reserved memories.
    fn try_reallocate(&mut self, g: u64, gen: &Generation, ep: EpId) -> bool {
        if !self.eps.contains_key(&ep) || gen.ends.iter().any(|(_, m)| !self.memories[m.0].is_empty()) {
            return false;
        }
        let GenPurpose::Request { request, hop } = gen.purpose else { return false };
        self.touch_ep(ep);
        let now = self.now();
        let old = self.eps[&ep].ends;
        let mut ends = old;
        for e in ends.iter_mut() {
            let target = gen.ends.iter().find(|t| t.0 == e.0).expect("same link").1;
            self.memories[e.1 .0].ep = None;
            let mem = &mut self.memories[target.0];
            mem.ep = Some(ep);
            mem.last_touch = now;
            e.1 = target;
        }
        {
            let rec = self.eps.get_mut(&ep).expect("live");
            rec.ends = ends;
            rec.lock = None;
        }
        self.link_eps[gen.link].remove(&ep);
        if let Some(sid) = self.ep_session.remove(&ep) {
            self.session_lost_ep(sid);
        }
        if gen.reuse_at_start && gen.attempts > 0 {
            self.audit.violation(now, format!("reuse generation {g} made attempts"));
        }
        self.audit.reuse_deliveries += 1;
        self.audit.link_reuse.entry(gen.link).or_default()[1] += 1;
        self.generations.remove(&g);
        self.hop_ready(request, hop);
        true
    }

    fn on_emit(&mut self, g: u64) {
        let Some(gen) = self.generations.get_mut(&g) else { return };
        gen.attempts += 1;
        self.audit.attempts += 1;
        let link = gen.link;
        let lead = gen.lead;
        let p = self.link_success[link];
        let success = self.rngs.get(lead.0, RngPurpose::Attempt(link)).random::<f64>() < p;
        let now = self.now();
        self.timeline.schedule(
            now + self.link_herald[link],
            Event::Herald {
                generation: g,
                success,
                emitted_at: now,
            },
        );
    }

    fn on_herald(&mut self, g: u64, success: bool, emitted_at: SimTime) {
        let Some(gen) = self.generations.get(&g).cloned() else { return };
        if !success {
            if self.params.negotiate_each_attempt {
                if let GenPurpose::Request { .. } = gen.purpose {
                    // check again for a pre-generated EP before retrying
                    if let Some(ep) = self.pick_reuse(gen.link, gen.lead) {
                        self.eps.get_mut(&ep).expect("live").lock = Some(EpLock::Reuse(g));
                        self.generations.get_mut(&g).expect("present").reuse = Some(ep);
                    }
                }
                let other = if gen.ends[0].0 == gen.lead { gen.ends[1].0 } else { gen.ends[0].0 };
                self.send(gen.lead, other, Payload::EgRequest { generation: g });
            } else {
                let next = (emitted_at + SimTime::from_secs(self.params.emission_period)).max(self.now());
                self.timeline.schedule(next, Event::Emit(g));
            }
            return;
        }
        self.generations.remove(&g);
        let state = bds::initial_link_state(self.params.initial_fidelity, &self.pauli);
        match gen.purpose {
            GenPurpose::Acp { session } => {
                let ep = self.new_ep(gen.ends, state, emitted_at, EpOrigin::Acp);
                let s = self.sessions.get_mut(&session).expect("generation outlived session");
                s.generation = None;
                s.ep = Some(ep);
                let responder = s.responder;
                if std::mem::replace(&mut s.resp_counted, false) {
                    self.acp[responder.0].release();
                }
                self.ep_session.insert(ep, session);
                *self.audit.link_acp_eps.entry(gen.link).or_default() += 1;
                self.link_eps[gen.link].insert(ep);
                self.pump_link(gen.link);
                let (u, v) = self.topo.links[gen.link].endpoints;
                self.evaluate(u);
                self.evaluate(v);
            }
            GenPurpose::Request { request, hop } => {
                if let Some(ep) = gen.reuse {
                    self.unlock(ep);
                    self.pump_link(gen.link);
                }
                self.new_ep(gen.ends, state, emitted_at, EpOrigin::OnDemand);
                self.hop_ready(request, hop);
            }
        }
    }

    // ---- pumping -----------------------------------------------------------

    /// Purify the newest unlocked ACP EP on `link` against the oldest one.
    fn pump_link(&mut self, link: LinkId) {
        if !self.cfg.purification {
            return;
        }
        let eps = &self.eps;
        let Some(newest) = self.link_eps[link]
            .iter()
            .map(|e| &eps[e])
            .filter(|e| e.lock.is_none())
            .max_by_key(|e| (e.created_at, std::cmp::Reverse(e.id)))
        else {
            return;
        };
        let Some(meas) = pump_partner(self.link_eps[link].iter().map(|e| &eps[e]), newest) else {
            return;
        };
        let kept = newest.id;
        let p = self.next_purification;
        self.next_purification += 1;
        for e in [kept, meas] {
            self.eps.get_mut(&e).expect("live").lock = Some(EpLock::Purify(p));
        }
        self.purifications.insert(p, Purification { kept, meas, link });
        let (u, v) = self.topo.links[link].endpoints;
        let lead = self.topo.primary(u, v);
        let other = if lead == u { v } else { u };
        self.send(lead, other, Payload::PurifyCoord { purification: p });
    }

    fn on_purify_ready(&mut self, p: u64) {
        let Some(pur) = self.purifications.remove(&p) else { return };
        let alive = |w: &World, e: EpId| w.eps.get(&e).is_some_and(|r| r.lock == Some(EpLock::Purify(p)));
        if !(alive(self, pur.kept) && alive(self, pur.meas)) {
            self.unlock(pur.kept);
            self.unlock(pur.meas);
        } else {
            self.touch_ep(pur.kept);
            self.touch_ep(pur.meas);
            let (u, v) = self.topo.links[pur.link].endpoints;
            let lead = self.topo.primary(u, v);
            let mut kept_state = self.eps[&pur.kept].state;
            let mut meas_state = self.eps[&pur.meas].state;
            if self.params.twirl_before_purify {
                kept_state = kept_state.twirl();
                meas_state = meas_state.twirl();
            }
            let outcome = bds::purify(&kept_state, &meas_state, &self.noise, self.rngs.get(lead.0, RngPurpose::Purification));
            self.consume_acp(pur.meas, ConsumeReason::PurifiedMeasured);
            match outcome.out {
                Some(out) => {
                    let rec = self.eps.get_mut(&pur.kept).expect("live");
                    rec.state = out;
                    rec.lock = None;
                }
                None => self.consume_acp(pur.kept, ConsumeReason::PurifyFailed),
            }
        }
        self.pump_link(pur.link);
        let (u, v) = self.topo.links[pur.link].endpoints;
        self.evaluate(u);
        self.evaluate(v);
    }

    /// Consume an ACP EP and end the session housing it.
    fn consume_acp(&mut self, ep: EpId, reason: ConsumeReason) {
        self.destroy_ep(ep, reason);
        if let Some(sid) = self.ep_session.remove(&ep) {
            self.session_lost_ep(sid);
        }
    }

    /// The session's EP left its memories; regenerate or wind down.
    fn session_lost_ep(&mut self, sid: u64) {
        let Some(s) = self.sessions.get_mut(&sid) else { return };
        s.ep = None;
        if !self.params.acp_renew {
            self.end_session(sid, false);
            return;
        }
        let (a, rule) = (s.initiator, s.rule);
        if let Some(r) = rule {
            self.rules.rearm(r);
            self.evaluate(a);
        }
    }

    // ---- requests ----------------------------------------------------------

    fn on_arrival(&mut self, request: Request) {
        let (i, r) = (request.initiator, request.responder);
        let path = self.routes.path(i, r);
        self.book.prune(self.now());
        let reserved = &self.reserved_mems;
        let reservation = self
            .book
            .reserve(request.id, &path, request.start, request.end, |n| reserved[n.0].as_slice());
        let id = request.id;
        let (start, end) = (request.start, request.end);
        let admitted = reservation.is_some();
        self.requests.insert(
            id,
            RequestState {
                outstanding: vec![0; path.len()],
                request,
                path,
                reservation,
                rules: Vec::new(),
                generations: BTreeMap::new(),
                active: false,
                served: None,
            },
        );
        if admitted {
            self.timeline.schedule(start, Event::RequestStart(id));
        }
        self.timeline.schedule(end, Event::RequestEnd(id));
    }

    fn on_request_start(&mut self, id: u64) {
        let Some(rs) = self.requests.get_mut(&id) else { return };
        rs.active = true;
        let topo = &self.topo;
        let specs = create_rules(id, &rs.path, rs.request.end, |a, b| topo.primary(a, b));
        let ids: Vec<RuleId> = specs.into_iter().map(|s| self.rules.install(s)).collect();
        let path = rs.path.clone();
        self.requests.get_mut(&id).expect("present").rules = ids;
        for n in path {
            self.evaluate(n);
        }
    }

    fn hop_ready(&mut self, request: u64, hop: usize) {
        let Some(rs) = self.requests.get_mut(&request) else { return };
        rs.generations.remove(&hop);
        let (u, v) = (rs.path[hop], rs.path[hop + 1]);
        self.evaluate(u);
        self.evaluate(v);
        self.try_serve(request);
    }

    fn swap(&mut self, request: u64, position: usize) {
        let rs = &self.requests[&request];
        let m = rs.path[position];
        let [l, r] = rs.reservation.as_ref().expect("condition").slots[position];
        let left = self.memories[l.expect("granted").0].ep.expect("condition");
        let right = self.memories[r.expect("granted").0].ep.expect("condition");
        self.touch_ep(left);
        self.touch_ep(right);
        let now = self.now();
        let success = self.params.swap_success >= 1.0
            || self.rngs.get(m.0, RngPurpose::Swap).random::<f64>() < self.params.swap_success;
        let l_rec = self.destroy_ep(left, ConsumeReason::Swapped);
        let r_rec = self.destroy_ep(right, ConsumeReason::Swapped);
        let (a, b) = (l_rec.other_end(m), r_rec.other_end(m));
        if success {
            let id = EpId(self.next_ep);
            let out = swap_records(&l_rec, &r_rec, m, &self.noise, id, now);
            self.new_ep(out.ends, out.state, now, EpOrigin::OnDemand);
        } else {
            let rules = self.requests[&request].rules.clone();
            for r in rules {
                self.rules.rearm(r);
            }
        }
        let path = self.requests[&request].path.clone();
        for (far, _) in [a, b] {
            let pos = path.iter().position(|&n| n == far).expect("on path");
            self.requests.get_mut(&request).expect("present").outstanding[pos] += 1;
            self.send(m, far, Payload::SwapResult { request });
        }
        if !success {
            for n in path {
                self.evaluate(n);
            }
        }
    }

    fn on_swap_result(&mut self, n: NodeId, request: u64) {
        let Some(rs) = self.requests.get_mut(&request) else { return };
        let pos = rs.path.iter().position(|&p| p == n).expect("on path");
        rs.outstanding[pos] -= 1;
        self.evaluate(n);
        self.try_serve(request);
    }

    fn try_serve(&mut self, request: u64) {
        let Some(rs) = self.requests.get(&request) else { return };
        if !rs.active || rs.served.is_some() {
            return;
        }
        let last = rs.path.len() - 1;
        if rs.outstanding[0] > 0 || rs.outstanding[last] > 0 {
            return;
        }
        let res = rs.reservation.as_ref().expect("active implies reserved");
        let (mi, mr) = (res.slots[0][1].expect("granted"), res.slots[last][0].expect("granted"));
        let (Some(ep), Some(ep_r)) = (self.memories[mi.0].ep, self.memories[mr.0].ep) else { return };
        if ep != ep_r {
            return;
        }
        let threshold = rs.request.fidelity_threshold;
        let path = rs.path.clone();
        self.touch_ep(ep);
        let fidelity = self.eps[&ep].state.fidelity();
        let now = self.now();
        if fidelity > threshold {
            self.destroy_ep(ep, ConsumeReason::Delivered);
            self.requests.get_mut(&request).expect("present").served = Some((now, fidelity));
            if self.cfg.strategy == Strategy::Acp {
                self.reward(path[0], &path);
                self.reward(path[last], &path);
                for &n in &path[1..last] {
                    self.audit.path_notifies += 1;
                    self.send(path[0], n, Payload::PathNotify { path: path.clone() });
                }
            }
            self.end_request(request);
        } else {
            self.destroy_ep(ep, ConsumeReason::Discarded);
            let rules = self.requests[&request].rules.clone();
            for r in rules {
                self.rules.rearm(r);
            }
            for n in path {
                self.evaluate(n);
            }
        }
    }

    fn end_request(&mut self, id: u64) {
        let Some(rs) = self.requests.remove(&id) else { return };
        self.rules.remove_where(|r| r.action.request() == Some(id));
        for (_, g) in rs.generations {
            if let Some(gen) = self.generations.remove(&g) {
                if let Some(ep) = gen.reuse {
                    self.unlock(ep);
                    self.pump_link(gen.link);
                }
            }
        }
        if let Some(res) = &rs.reservation {
            for (_, m) in res.all_memories() {
                if let Some(ep) = self.memories[m.0].ep {
                    if self.eps.contains_key(&ep) {
                        self.destroy_ep(ep, ConsumeReason::Expired);
                    }
                }
            }
        }
        self.outcomes.push(RequestOutcome {
            request: rs.request,
            path: rs.path,
            served: rs.served,
        });
    }

    /// EPs still alive plus everything consumed must equal everything created.
    pub fn conservation_holds(&self) -> bool {
        self.audit.eps_created == self.audit.consumed_total() + self.eps.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{builtin, LinkSpec};

    fn world(names: Vec<String>, links: Vec<LinkSpec>, strategy: Strategy, purification: bool, params: SimParams) -> World {
        let bsm = hardware::BsmDevice {
            detector_efficiency: params.detector_efficiency,
            bsm_success: params.bsm_success,
        };
        let topo = Topology::new(names, &links, params.attenuation_db_per_km, bsm).unwrap();
        let cfg = WorldConfig {
            strategy,
            purification,
            policy: SelectionPolicy::Freshest,
            seed: 11,
        };
        World::new(topo, params, cfg).unwrap()
    }

    fn two_node(strategy: Strategy, purification: bool, params: SimParams) -> World {
        let (n, l) = builtin::two_node(params.link_km);
        world(n, l, strategy, purification, params)
    }

    fn request(id: u64, initiator: usize, responder: usize, start: SimTime) -> Request {
        Request {
            id,
            initiator: NodeId(initiator),
            responder: NodeId(responder),
            arrival: start.saturating_sub(SimTime::from_millis(10.0)),
            start,
            end: start + SimTime::from_millis(95.0),
            num_eps: 1,
            fidelity_threshold: 0.5,
        }
    }

    fn served_tts(w: &mut World) -> SimTime {
        let out = w.take_outcomes();
        assert_eq!(out.len(), 1);
        let (t, _) = out[0].served.expect("served");
        t.saturating_sub(out[0].request.start)
    }

    fn run_clean(w: &mut World, t: SimTime) {
        w.run_until(t);
        assert!(w.audit.violations.is_empty(), "{:?}", w.audit.violations);
    }

    #[test]
    fn reuse_serves_after_one_round_trip() {
        let mut w = two_node(Strategy::Acp, false, SimParams::default());
        let start = SimTime::from_secs(0.5);
        w.submit(request(0, 0, 1, start));
        run_clean(&mut w, SimTime::from_secs(0.6));
        assert_eq!(served_tts(&mut w), SimTime::from_micros(300));
        assert_eq!(w.audit.reuse_deliveries, 1);
        assert!(w.conservation_holds());
    }

    #[test]
    fn odo_generates_from_scratch() {
        let mut w = two_node(Strategy::Odo, false, SimParams::default());
        let start = SimTime::from_secs(0.1);
        w.submit(request(0, 0, 1, start));
        run_clean(&mut w, SimTime::from_secs(0.3));
        assert!(served_tts(&mut w) > SimTime::from_micros(300));
        assert_eq!(w.audit.reuse_deliveries, 0);
        assert!(w.audit.attempts > 0);
    }

    #[test]
    fn busy_target_slot_falls_back_to_attempts() {
        let mut w = two_node(Strategy::Acp, false, SimParams::default());
        let start = SimTime::from_secs(0.5);
        w.submit(request(0, 0, 1, start));
        w.run_until(start);
        let (&g, gen) = w
            .generations
            .iter()
            .find(|(_, g)| matches!(g.purpose, GenPurpose::Request { .. }))
            .expect("request generation started");
        assert!(gen.reuse.is_some());
        let ends = gen.ends;
        // occupy the target slots before the handshake completes
        let state = bds::BellDiagonalState::werner(0.9);
        let blocker = w.new_ep(ends, state, start, EpOrigin::OnDemand);
        w.run_until(start + SimTime::from_micros(300));
        let gen = &w.generations[&g];
        assert!(gen.reuse.is_none());
        assert!(gen.attempts > 0);
        w.destroy_ep(blocker, ConsumeReason::Discarded);
        run_clean(&mut w, SimTime::from_secs(0.7));
        assert!(served_tts(&mut w) > SimTime::from_micros(300));
        assert!(w.conservation_holds());
    }

    #[test]
    fn purification_aborts_when_an_input_vanishes() {
        let mut w = two_node(Strategy::Acp, true, SimParams::default());
        let mut t = SimTime::ZERO;
        while w.purifications.is_empty() {
            t = t + SimTime::from_micros(10);
            assert!(t < SimTime::from_secs(1.0), "no purification started");
            w.run_until(t);
        }
        let (&p, pur) = w.purifications.iter().next().unwrap();
        let (kept, meas) = (pur.kept, pur.meas);
        let measured_before = w.audit.consumed.get("purified_measured").copied().unwrap_or(0);
        w.consume_acp(meas, ConsumeReason::Expired);
        // stop the link from pumping again so the kept EP is observable
        w.cfg.purification = false;
        run_clean(&mut w, t + SimTime::from_millis(1.0));
        assert!(!w.purifications.contains_key(&p));
        assert_eq!(w.audit.consumed.get("purified_measured").copied().unwrap_or(0), measured_before);
        let rec = &w.eps[&kept];
        assert_eq!(rec.lock, None);
        assert!(w.conservation_holds());
    }

    #[test]
    fn responder_counter_released_after_first_generation() {
        let mut w = two_node(Strategy::Acp, false, SimParams::default());
        run_clean(&mut w, SimTime::from_secs(0.3));
        let with_ep: Vec<&Session> = w.sessions.values().filter(|s| s.ep.is_some()).collect();
        assert!(!with_ep.is_empty());
        assert!(with_ep.iter().all(|s| !s.resp_counted));
        for n in w.topo.nodes() {
            let initiated = w.sessions.values().filter(|s| s.initiator == n && s.init_mem.is_some()).count();
            let responding = w.sessions.values().filter(|s| s.responder == n && s.resp_counted).count();
            let counter = w.acp_state(n).counter();
            assert!(counter >= initiated + responding);
            assert!(counter <= w.params.max_memory_acp);
        }
    }

    #[test]
    fn renewed_session_regenerates_after_consumption() {
        let mut w = two_node(Strategy::Acp, false, SimParams::default());
        run_clean(&mut w, SimTime::from_secs(0.3));
        let (&sid, s) = w.sessions.iter().find(|(_, s)| s.ep.is_some()).unwrap();
        let (old, initiator) = (s.ep.unwrap(), s.initiator);
        let counter = w.acp_state(initiator).counter();
        let now = w.now();
        w.touch_ep(old);
        w.consume_acp(old, ConsumeReason::Discarded);
        assert_eq!(w.acp_state(initiator).counter(), counter);
        run_clean(&mut w, now + SimTime::from_millis(5.0));
        let s = &w.sessions[&sid];
        assert!(s.ep.is_some_and(|e| e != old));
    }

    #[test]
    fn without_renewal_consumption_ends_the_session() {
        let params = SimParams {
            acp_renew: false,
            ..SimParams::default()
        };
        let mut w = two_node(Strategy::Acp, false, params);
        run_clean(&mut w, SimTime::from_secs(0.3));
        let (&sid, s) = w.sessions.iter().find(|(_, s)| s.ep.is_some()).unwrap();
        let (ep, initiator) = (s.ep.unwrap(), s.initiator);
        let counter = w.acp_state(initiator).counter();
        w.touch_ep(ep);
        w.consume_acp(ep, ConsumeReason::Discarded);
        assert!(!w.sessions.contains_key(&sid));
        assert_eq!(w.acp_state(initiator).counter(), counter - 1);
    }

    #[test]
    fn expiry_destroys_idle_eps() {
        let params = SimParams {
            acp_ttl: 0.05,
            ..SimParams::default()
        };
        let mut w = two_node(Strategy::Acp, false, params);
        run_clean(&mut w, SimTime::from_secs(0.5));
        assert!(w.audit.consumed.get("expired").copied().unwrap_or(0) > 0);
        let now = w.now();
        for s in w.sessions.values() {
            assert!(s.expiry > now);
            assert!(s.expiry <= now + SimTime::from_secs(0.05) + SimTime::from_millis(1.0));
        }
        assert!(w.conservation_holds());
    }

    #[test]
    fn path_notification_reaches_each_intermediate_node() {
        let names: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let links = (0..4)
            .map(|i| LinkSpec {
                a: names[i].clone(),
                b: names[i + 1].clone(),
                km: 10.0,
            })
            .collect();
        let mut w = world(names, links, Strategy::Acp, false, SimParams::default());
        let start = SimTime::from_secs(0.2);
        w.submit(request(0, 0, 4, start));
        run_clean(&mut w, SimTime::from_secs(0.4));
        let _ = served_tts(&mut w);
        assert_eq!(w.audit.path_notifies, 3);
        // both neighbours of a middle node are on the path, so only None loses
        for i in 1..4 {
            let t = &w.acp_state(NodeId(i)).table;
            assert!(t.is_normalised(1e-12));
            assert!(t.none() < 1.0 / 3.0);
        }
    }

    #[test]
    fn ucp_sends_no_path_notifications() {
        let mut w = two_node(Strategy::Ucp, false, SimParams::default());
        w.submit(request(0, 0, 1, SimTime::from_secs(0.2)));
        run_clean(&mut w, SimTime::from_secs(0.4));
        let _ = served_tts(&mut w);
        assert_eq!(w.audit.path_notifies, 0);
    }

    #[test]
    fn equal_seeds_give_equal_digests() {
        let run = || {
            let mut w = two_node(Strategy::Acp, true, SimParams::default());
            w.submit(request(0, 0, 1, SimTime::from_secs(0.2)));
            w.run_until(SimTime::from_secs(0.5));
            w.audit.digest()
        };
        assert_eq!(run(), run());
    }
}
