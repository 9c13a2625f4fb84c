//! Rules, reservations and the link-level pumping policy.

use std::collections::BTreeMap;

use crate::hardware::{EpId, MemoryId, NodeId};
use crate::kernel::SimTime;
use crate::protocols::{EpOrigin, EpRecord};

pub type RuleId = u64;

/// Lower fires first.
pub const PRIORITY_SWAP: i32 = 0;
pub const PRIORITY_GENERATE: i32 = 10;
pub const PRIORITY_ACP: i32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleAction {
    /// Produce the link EP for hop `hop` of a request's path.
    Generate { request: u64, hop: usize },
    /// Swap at `path[position]`.
    Swap { request: u64, position: usize },
    /// Continuous generation on an ACP memory pair.
    AcpGenerate { session: u64 },
}

impl RuleAction {
    pub fn request(&self) -> Option<u64> {
        match *self {
            RuleAction::Generate { request, .. } | RuleAction::Swap { request, .. } => Some(request),
            RuleAction::AcpGenerate { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: RuleId,
    pub node: NodeId,
    pub priority: i32,
    pub action: RuleAction,
    pub expiry: SimTime,
    /// Set on firing; cleared by `rearm` when the state it acted on is gone.
    pub fired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleSpec {
    pub node: NodeId,
    pub priority: i32,
    pub action: RuleAction,
    pub expiry: SimTime,
}

#[derive(Debug, Clone, Default)]
pub struct RuleManager {
    rules: BTreeMap<RuleId, Rule>,
    next: RuleId,
}

impl RuleManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, spec: RuleSpec) -> RuleId {
        let id = self.next;
        self.next += 1;
        self.rules.insert(
            id,
            Rule {
                id,
                node: spec.node,
                priority: spec.priority,
                action: spec.action,
                expiry: spec.expiry,
                fired: false,
            },
        );
        id
    }

    pub fn get(&self, id: RuleId) -> Option<&Rule> {
        self.rules.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.rules.values()
    }

    pub fn remove(&mut self, id: RuleId) -> Option<Rule> {
        self.rules.remove(&id)
    }

    pub fn remove_where(&mut self, mut pred: impl FnMut(&Rule) -> bool) -> Vec<Rule> {
        let ids: Vec<RuleId> = self.rules.values().filter(|r| pred(r)).map(|r| r.id).collect();
        ids.into_iter().filter_map(|id| self.rules.remove(&id)).collect()
    }

    pub fn rearm(&mut self, id: RuleId) {
        if let Some(r) = self.rules.get_mut(&id) {
            r.fired = false;
        }
    }

    pub fn find(&self, action: RuleAction) -> Option<RuleId> {
        self.rules.values().find(|r| r.action == action).map(|r| r.id)
    }

    /// Unfired, unexpired rules at `node` in firing order.
    pub fn candidates(&self, node: NodeId, now: SimTime) -> Vec<RuleId> {
        let mut c: Vec<&Rule> = self
            .rules
            .values()
            .filter(|r| r.node == node && !r.fired && now < r.expiry)
            .collect();
        c.sort_by_key(|r| (r.priority, r.id));
        c.into_iter().map(|r| r.id).collect()
    }
}

/// State a rule set acts on.
pub trait RuleHost {
    fn rules(&mut self) -> &mut RuleManager;
    fn condition(&self, rule: &Rule) -> bool;
    fn fire(&mut self, rule: &Rule);
}

/// Fire every satisfied rule at `node` in ascending priority. Each condition
/// is re-checked right before firing, so an action that uses up state another
/// rule needed keeps that rule from firing.
pub fn evaluate_rules<H: RuleHost>(host: &mut H, node: NodeId, now: SimTime) -> Vec<RuleId> {
    let mut fired = Vec::new();
    for id in host.rules().candidates(node, now) {
        // an earlier action may have removed or fired it
        let Some(rule) = host.rules().get(id).filter(|r| !r.fired).cloned() else {
            continue;
        };
        if host.condition(&rule) {
            host.rules().rules.get_mut(&id).expect("present").fired = true;
            host.fire(&rule);
            fired.push(id);
        }
    }
    fired
}

/// Reserved memories granted to one request. Index by path position: slot 0
/// faces the previous node, slot 1 the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservation {
    pub request: u64,
    pub path: Vec<NodeId>,
    pub slots: Vec<[Option<MemoryId>; 2]>,
    pub start: SimTime,
    pub end: SimTime,
}

impl Reservation {
    /// Memories at the two ends of hop `hop` (between `path[hop]` and `path[hop+1]`).
    pub fn hop_memories(&self, hop: usize) -> (MemoryId, MemoryId) {
        (
            self.slots[hop][1].expect("granted"),
            self.slots[hop + 1][0].expect("granted"),
        )
    }

    pub fn all_memories(&self) -> impl Iterator<Item = (NodeId, MemoryId)> + '_ {
        self.path
            .iter()
            .zip(&self.slots)
            .flat_map(|(n, s)| s.iter().flatten().map(move |m| (*n, *m)))
    }
}

/// Time-window bookings on reserved-class memories.
#[derive(Debug, Clone, Default)]
pub struct ReservationBook {
    windows: BTreeMap<MemoryId, Vec<(SimTime, SimTime, u64)>>,
}

impl ReservationBook {
    fn is_free(&self, m: MemoryId, start: SimTime, end: SimTime) -> bool {
        self.windows
            .get(&m)
            .is_none_or(|ws| ws.iter().all(|&(s, e, _)| end <= s || e <= start))
    }

    /// Grant memories along `path` for `[start, end]` or reject the whole
    /// request. `reserved_at(n)` lists node `n`'s reserved-class memories.
    pub fn reserve<'a>(
        &mut self,
        request: u64,
        path: &[NodeId],
        start: SimTime,
        end: SimTime,
        reserved_at: impl Fn(NodeId) -> &'a [MemoryId],
    ) -> Option<Reservation> {
        assert!(path.len() >= 2);
        let mut slots = Vec::with_capacity(path.len());
        for (i, &n) in path.iter().enumerate() {
            let need = [i > 0, i + 1 < path.len()];
            let mut free = reserved_at(n).iter().copied().filter(|&m| self.is_free(m, start, end));
            let mut s = [None, None];
            for k in 0..2 {
                if need[k] {
                    s[k] = Some(free.next()?);
                }
            }
            slots.push(s);
        }
        let r = Reservation {
            request,
            path: path.to_vec(),
            slots,
            start,
            end,
        };
        for (_, m) in r.all_memories() {
            self.windows.entry(m).or_default().push((start, end, request));
        }
        Some(r)
    }

    /// Drop bookings that ended before `now`.
    pub fn prune(&mut self, now: SimTime) {
        for ws in self.windows.values_mut() {
            ws.retain(|&(_, e, _)| e >= now);
        }
    }
}

/// One generation rule per hop at the hop's primary node, one swap rule per
/// intermediate node, all expiring at the request's end.
pub fn create_rules(
    request: u64,
    path: &[NodeId],
    end: SimTime,
    primary: impl Fn(NodeId, NodeId) -> NodeId,
) -> Vec<RuleSpec> {
    let mut out = Vec::new();
    for (hop, w) in path.windows(2).enumerate() {
        out.push(RuleSpec {
            node: primary(w[0], w[1]),
            priority: PRIORITY_GENERATE,
            action: RuleAction::Generate { request, hop },
            expiry: end,
        });
    }
    for position in 1..path.len().saturating_sub(1) {
        out.push(RuleSpec {
            node: path[position],
            priority: PRIORITY_SWAP,
            action: RuleAction::Swap { request, position },
            expiry: end,
        });
    }
    out
}

pub fn create_rules_acp(session: u64, node: NodeId, now: SimTime, ttl: SimTime) -> RuleSpec {
    RuleSpec {
        node,
        priority: PRIORITY_ACP,
        action: RuleAction::AcpGenerate { session },
        expiry: now + ttl,
    }
}

/// Pumping partner for `new_ep`: the oldest other unlocked ACP EP on the
/// same link, to be measured while `new_ep` is kept.
pub fn pump_partner<'a>(link_eps: impl IntoIterator<Item = &'a EpRecord>, new_ep: &EpRecord) -> Option<EpId> {
    if new_ep.origin != EpOrigin::Acp {
        return None;
    }
    let (a, b) = new_ep.nodes();
    link_eps
        .into_iter()
        .filter(|e| e.id != new_ep.id && e.origin == EpOrigin::Acp && e.lock.is_none() && e.spans(a, b))
        .filter(|e| e.created_at <= new_ep.created_at)
        .min_by_key(|e| (e.created_at, e.id))
        .map(|e| e.id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bds::BellDiagonalState;

    fn by_index(a: NodeId, b: NodeId) -> NodeId {
        a.max(b)
    }

    fn path(n: usize) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    fn count(specs: &[RuleSpec]) -> (usize, usize) {
        let g = specs.iter().filter(|s| matches!(s.action, RuleAction::Generate { .. })).count();
        (g, specs.len() - g)
    }

    #[test]
    fn rule_counts_follow_path_length() {
        let end = SimTime(10);
        assert_eq!(count(&create_rules(0, &path(2), end, by_index)), (1, 0));
        assert_eq!(count(&create_rules(0, &path(3), end, by_index)), (2, 1));
        assert_eq!(count(&create_rules(0, &path(5), end, by_index)), (4, 3));
        let specs = create_rules(0, &path(3), end, by_index);
        assert!(specs.iter().all(|s| s.expiry == end));
        let swap = specs.iter().find(|s| matches!(s.action, RuleAction::Swap { .. })).unwrap();
        assert_eq!(swap.node, NodeId(1));
        assert!(swap.priority < PRIORITY_GENERATE);
    }

    /// Rules whose condition is "a shared memory is free" and whose action
    /// takes the memory and logs the priority.
    struct Host {
        rules: RuleManager,
        needs_memory: bool,
        memory_free: bool,
        log: Vec<i32>,
    }

    impl RuleHost for Host {
        fn rules(&mut self) -> &mut RuleManager {
            &mut self.rules
        }
        fn condition(&self, _: &Rule) -> bool {
            !self.needs_memory || self.memory_free
        }
        fn fire(&mut self, r: &Rule) {
            self.memory_free = false;
            self.log.push(r.priority);
        }
    }

    fn host(priorities: &[i32], expiry: SimTime, needs_memory: bool) -> Host {
        let mut rules = RuleManager::new();
        for (i, &p) in priorities.iter().enumerate() {
            rules.install(RuleSpec {
                node: NodeId(0),
                priority: p,
                action: RuleAction::AcpGenerate { session: i as u64 },
                expiry,
            });
        }
        Host { rules, needs_memory, memory_free: true, log: vec![] }
    }

    #[test]
    fn fires_in_priority_order() {
        let mut h = host(&[2, 1], SimTime(100), false);
        evaluate_rules(&mut h, NodeId(0), SimTime(0));
        assert_eq!(h.log, [1, 2]);
        // fired rules stay quiet until re-armed
        assert!(evaluate_rules(&mut h, NodeId(0), SimTime(0)).is_empty());
        h.rules.rearm(0);
        assert_eq!(evaluate_rules(&mut h, NodeId(0), SimTime(0)), [0]);
        // other nodes' rules are not considered
        h.rules.rearm(1);
        assert!(evaluate_rules(&mut h, NodeId(1), SimTime(0)).is_empty());
    }

    #[test]
    fn expired_rule_never_fires() {
        let mut h = host(&[0], SimTime(10), false);
        assert!(evaluate_rules(&mut h, NodeId(0), SimTime(10)).is_empty());
        assert_eq!(evaluate_rules(&mut h, NodeId(0), SimTime(9)).len(), 1);
        let spec = create_rules_acp(0, NodeId(0), SimTime(5), SimTime(10));
        assert_eq!(spec.expiry, SimTime(15));
    }

    #[test]
    fn consumed_memory_blocks_second_rule() {
        let mut h = host(&[0, 1], SimTime(100), true);
        let fired = evaluate_rules(&mut h, NodeId(0), SimTime(0));
        assert_eq!(fired.len(), 1);
        assert_eq!(h.rules.get(fired[0]).unwrap().action, RuleAction::AcpGenerate { session: 0 });
        assert_eq!(h.log, [0]);
    }

    fn reserved(n: NodeId) -> &'static [MemoryId] {
        const M: [[MemoryId; 2]; 3] = [
            [MemoryId(0), MemoryId(1)],
            [MemoryId(2), MemoryId(3)],
            [MemoryId(4), MemoryId(5)],
        ];
        &M[n.0]
    }

    #[test]
    fn reservation_grants_and_rejects_overlaps() {
        let mut book = ReservationBook::default();
        let p = path(3);
        let r = book.reserve(0, &p, SimTime(10), SimTime(20), reserved).unwrap();
        assert_eq!(r.slots[0], [None, Some(MemoryId(0))]);
        assert_eq!(r.slots[1], [Some(MemoryId(2)), Some(MemoryId(3))]);
        assert_eq!(r.hop_memories(1), (MemoryId(3), MemoryId(4)));
        // the middle node is fully booked for an overlapping window
        assert!(book.reserve(1, &p, SimTime(15), SimTime(25), reserved).is_none());
        assert!(book.reserve(2, &p, SimTime(20), SimTime(30), reserved).is_some());
        book.prune(SimTime(25));
        assert!(book.reserve(3, &p, SimTime(10), SimTime(20), reserved).is_some());
    }

    fn acp_ep(id: u64, created: u64) -> EpRecord {
        EpRecord {
            id: EpId(id),
            ends: [(NodeId(0), MemoryId(id as usize)), (NodeId(1), MemoryId(10 + id as usize))],
            state: BellDiagonalState::PERFECT,
            created_at: SimTime(created),
            origin: EpOrigin::Acp,
            lock: None,
        }
    }

    #[test]
    fn pumping_measures_the_oldest() {
        let new = acp_ep(9, 3);
        assert_eq!(pump_partner([&new], &new), None);
        let e1 = acp_ep(1, 1);
        let e2 = acp_ep(2, 2);
        assert_eq!(pump_partner([&e2, &e1, &new], &new), Some(EpId(1)));
        let mut od = acp_ep(1, 1);
        od.origin = EpOrigin::OnDemand;
        assert_eq!(pump_partner([&od, &new], &new), None);
        let mut other_link = acp_ep(1, 1);
        other_link.ends[1].0 = NodeId(5);
        assert_eq!(pump_partner([&other_link, &new], &new), None);
    }
}
