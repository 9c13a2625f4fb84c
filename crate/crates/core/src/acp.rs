//! Adaptive continuous entanglement generation: the per-node state machine,
//! the neighbour probability table and its reward update.
//!
//! Every node runs both roles. As the *initiator* it wakes after a random
//! sleep, claims a free ACP memory, spins the roulette wheel over its
//! probability table and queries the chosen neighbour. As the *responder* it
//! answers queries with YES (and a paired memory) or NO. Memory occupancy is
//! tracked by `counter`, capped at `max_memory_acp`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::hardware::{MemoryId, NodeId};
use crate::kernel::SimTime;

/// Neighbour-selection probabilities plus the phantom `None` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    /// Sorted by neighbour id.
    entries: Vec<(NodeId, f64)>,
    none: f64,
}

impl ProbabilityTable {
    /// Uniform over the neighbours and `None`.
    pub fn uniform(neighbors: &[NodeId]) -> Self {
        let mut ids: Vec<NodeId> = neighbors.to_vec();
        ids.sort();
        ids.dedup();
        let p = 1.0 / (ids.len() + 1) as f64;
        ProbabilityTable {
            entries: ids.into_iter().map(|n| (n, p)).collect(),
            none: p,
        }
    }

    /// Build from explicit weights; they are normalised.
    pub fn from_weights(entries: &[(NodeId, f64)], none: f64) -> Self {
        let mut entries = entries.to_vec();
        entries.sort_by_key(|e| e.0);
        let mut t = ProbabilityTable { entries, none };
        assert!(t.entries.iter().all(|e| e.1 >= 0.0) && none >= 0.0);
        t.normalise();
        t
    }

    pub fn get(&self, n: NodeId) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == n).map(|e| e.1)
    }

    pub fn none(&self) -> f64 {
        self.none
    }

    pub fn entries(&self) -> &[(NodeId, f64)] {
        &self.entries
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum::<f64>() + self.none
    }

    pub fn is_normalised(&self, tol: f64) -> bool {
        (self.sum() - 1.0).abs() <= tol && self.none >= 0.0 && self.entries.iter().all(|e| e.1 >= 0.0)
    }

    fn normalise(&mut self) {
        let s = self.sum();
        for e in self.entries.iter_mut() {
            e.1 /= s;
        }
        self.none /= s;
    }

    /// Roulette-wheel pick for a uniform draw `u ∈ [0, 1)`. Entries are
    /// walked in id order with `None` last.
    pub fn select_with(&self, u: f64) -> Option<NodeId> {
        let mut acc = 0.0;
        for &(n, p) in &self.entries {
            acc += p;
            if u < acc {
                return Some(n);
            }
        }
        None
    }
}

pub fn select_neighbor<R: Rng + ?Sized>(table: &ProbabilityTable, rng: &mut R) -> Option<NodeId> {
    table.select_with(rng.random::<f64>())
}

/// True if `a` and `b` are adjacent somewhere along `path`.
pub fn path_uses_link(path: &[NodeId], a: NodeId, b: NodeId) -> bool {
    path.windows(2)
        .any(|w| (w[0] == a && w[1] == b) || (w[0] == b && w[1] == a))
}

/// Reward every neighbour `x` of `node` whose link `(node, x)` lies on
/// `path` by `delta`, then renormalise (the `None` entry included).
pub fn update_table(table: &mut ProbabilityTable, node: NodeId, path: &[NodeId], delta: f64) {
    for e in table.entries.iter_mut() {
        if path_uses_link(path, node, e.0) {
            e.1 += delta;
        }
    }
    table.normalise();
}

pub type QueryId = u64;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    neighbor: NodeId,
    memory: MemoryId,
    deadline: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    /// Counter at the cap or no free ACP memory: nothing happens.
    Idle,
    /// The wheel landed on `None`; the claimed memory is handed back.
    Backoff,
    Query {
        query: QueryId,
        neighbor: NodeId,
        memory: MemoryId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryAnswer {
    Yes(MemoryId),
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    /// Install the generation rule for `(memory, remote)`.
    CreateRule { neighbor: NodeId, memory: MemoryId },
    /// Neighbour refused; `memory` is free again.
    Released { memory: MemoryId },
    /// No matching pending query (timed out or unknown); ignore.
    Stale,
}

/// ACP bookkeeping for one node.
#[derive(Debug, Clone)]
pub struct AcpNodeState {
    pub node: NodeId,
    /// ACP-class memories currently occupied by ACP at this node.
    counter: usize,
    pub max_memory_acp: usize,
    pending: BTreeMap<QueryId, Pending>,
    next_query: QueryId,
    pub table: ProbabilityTable,
    /// Mean sleep between ticks, seconds.
    pub sleep_base: f64,
    pub delta: f64,
    /// How long an initiator waits for a reply before giving up.
    pub query_timeout: SimTime,
}

impl AcpNodeState {
    pub fn new(node: NodeId, neighbors: &[NodeId], max_memory_acp: usize, sleep_base: f64, delta: f64) -> Self {
        AcpNodeState {
            node,
            counter: 0,
            max_memory_acp,
            pending: BTreeMap::new(),
            next_query: 0,
            table: ProbabilityTable::uniform(neighbors),
            sleep_base,
            delta,
            query_timeout: SimTime::from_millis(1.0),
        }
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Uniform on `[0.5, 1.5] · sleep_base`.
    pub fn sleep_duration<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sleep_base * rng.random_range(0.5..=1.5)
    }

    /// Sleep expired. `free_memory` is any unoccupied ACP memory at this node.
    pub fn tick<R: Rng + ?Sized>(
        &mut self,
        free_memory: Option<MemoryId>,
        now: SimTime,
        rng: &mut R,
    ) -> TickOutcome {
        let Some(memory) = free_memory else {
            return TickOutcome::Idle;
        };
        if self.counter >= self.max_memory_acp {
            return TickOutcome::Idle;
        }
        self.counter += 1;
        match select_neighbor(&self.table, rng) {
            None => {
                self.counter -= 1;
                TickOutcome::Backoff
            }
            Some(neighbor) => {
                let query = self.next_query;
                self.next_query += 1;
                self.pending.insert(
                    query,
                    Pending {
                        neighbor,
                        memory,
                        deadline: now + self.query_timeout,
                    },
                );
                TickOutcome::Query {
                    query,
                    neighbor,
                    memory,
                }
            }
        }
    }

    /// Answer a neighbour's query. Both conditions must hold: the counter is
    /// below the cap and a free ACP memory exists.
    pub fn handle_query(&mut self, free_memory: Option<MemoryId>) -> QueryAnswer {
        match free_memory {
            Some(m) if self.counter < self.max_memory_acp => {
                self.counter += 1;
                QueryAnswer::Yes(m)
            }
            _ => QueryAnswer::No,
        }
    }

    pub fn handle_reply(&mut self, query: QueryId, accepted: bool, now: SimTime) -> ReplyOutcome {
        let Some(p) = self.pending.get(&query).copied() else {
            return ReplyOutcome::Stale;
        };
        if p.deadline < now {
            // Left for expire_pending to reclaim.
            return ReplyOutcome::Stale;
        }
        self.pending.remove(&query);
        if accepted {
            ReplyOutcome::CreateRule {
                neighbor: p.neighbor,
                memory: p.memory,
            }
        } else {
            self.counter -= 1;
            ReplyOutcome::Released { memory: p.memory }
        }
    }

    /// Drop queries whose reply is overdue; returns the memories freed.
    pub fn expire_pending(&mut self, now: SimTime) -> Vec<MemoryId> {
        let overdue: Vec<QueryId> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline < now)
            .map(|(q, _)| *q)
            .collect();
        overdue
            .into_iter()
            .map(|q| {
                let p = self.pending.remove(&q).expect("listed");
                self.counter -= 1;
                p.memory
            })
            .collect()
    }

    /// An ACP memory at this node was released.
    pub fn release(&mut self) {
        assert!(self.counter > 0, "ACP counter underflow at {:?}", self.node);
        self.counter -= 1;
    }

    pub fn reward(&mut self, path: &[NodeId]) {
        update_table(&mut self.table, self.node, path, self.delta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: NodeId = NodeId(0);
    const B: NodeId = NodeId(1);
    const C: NodeId = NodeId(2);

    fn state() -> AcpNodeState {
        AcpNodeState::new(A, &[B, C], 5, 0.01, 0.05)
    }

    #[test]
    fn roulette_intervals() {
        let t = ProbabilityTable::from_weights(&[(B, 1.0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(select_neighbor(&t, &mut rng), Some(B));
        }
        let t = ProbabilityTable::from_weights(&[(B, 0.5)], 0.5);
        assert_eq!(t.select_with(0.75), None);
        assert_eq!(t.select_with(0.25), Some(B));
    }

    #[test]
    fn roulette_frequencies() {
        let t = ProbabilityTable::from_weights(&[(B, 0.2), (C, 0.5)], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match select_neighbor(&t, &mut rng) {
                Some(B) => counts[0] += 1,
                Some(C) => counts[1] += 1,
                None => counts[2] += 1,
                _ => unreachable!(),
            }
        }
        for (c, p) in counts.iter().zip([0.2, 0.5, 0.3]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn reward_update_arithmetic() {
        let mut t = ProbabilityTable::from_weights(&[(B, 0.3), (C, 0.3)], 0.4);
        update_table(&mut t, A, &[A, B], 0.05);
        assert!((t.get(B).unwrap() - 0.333333).abs() < 1e-6);
        assert!((t.get(C).unwrap() - 0.285714).abs() < 1e-6);
        assert!((t.none() - 0.380952).abs() < 1e-6);
    }

    #[test]
    fn intermediate_node_rewards_both_sides() {
        let d = NodeId(3);
        let mut t = ProbabilityTable::uniform(&[B, C, d]);
        update_table(&mut t, A, &[NodeId(9), B, A, C, NodeId(7)], 0.05);
        assert!(t.get(B).unwrap() > 0.25 && t.get(C).unwrap() > 0.25);
        assert!(t.get(d).unwrap() < 0.25);
    }

    #[test]
    fn unrelated_path_leaves_table_unchanged() {
        let mut t = ProbabilityTable::from_weights(&[(B, 0.3), (C, 0.3)], 0.4);
        let before = t.clone();
        update_table(&mut t, A, &[B, C, NodeId(5)], 0.05);
        for (x, y) in t.entries().iter().zip(before.entries()) {
            assert!((x.1 - y.1).abs() < 1e-15);
        }
    }

    #[test]
    fn tick_at_cap_does_nothing() {
        let mut s = state();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in 0..5 {
            assert_eq!(s.handle_query(Some(MemoryId(m))), QueryAnswer::Yes(MemoryId(m)));
        }
        assert_eq!(s.counter(), 5);
        assert_eq!(s.tick(Some(MemoryId(9)), SimTime::ZERO, &mut rng), TickOutcome::Idle);
        assert_eq!(s.counter(), 5);
    }

    #[test]
    fn tick_sends_query_or_backs_off() {
        let mut s = state();
        s.table = ProbabilityTable::from_weights(&[(B, 1.0), (C, 0.0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = s.tick(Some(MemoryId(3)), SimTime::ZERO, &mut rng);
        assert!(matches!(out, TickOutcome::Query { neighbor: B, memory: MemoryId(3), .. }));
        assert_eq!(s.counter(), 1);
        assert_eq!(s.pending_len(), 1);

        s.table = ProbabilityTable::from_weights(&[(B, 0.0), (C, 0.0)], 1.0);
        assert_eq!(s.tick(Some(MemoryId(4)), SimTime::ZERO, &mut rng), TickOutcome::Backoff);
        assert_eq!(s.counter(), 1);
        assert_eq!(s.pending_len(), 1);
    }

    #[test]
    fn query_condition_is_conjunctive() {
        let mut s = state();
        assert_eq!(s.handle_query(None), QueryAnswer::No);
        for m in 0..5 {
            s.handle_query(Some(MemoryId(m)));
        }
        assert_eq!(s.handle_query(Some(MemoryId(7))), QueryAnswer::No);
    }

    #[test]
    fn replies() {
        let mut s = state();
        s.table = ProbabilityTable::from_weights(&[(B, 1.0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let TickOutcome::Query { query, .. } = s.tick(Some(MemoryId(0)), SimTime::ZERO, &mut rng) else {
            panic!()
        };
        let t = SimTime::from_micros(300);
        assert_eq!(
            s.handle_reply(query, true, t),
            ReplyOutcome::CreateRule { neighbor: B, memory: MemoryId(0) }
        );
        assert_eq!(s.counter(), 1);

        let TickOutcome::Query { query, .. } = s.tick(Some(MemoryId(1)), t, &mut rng) else {
            panic!()
        };
        assert_eq!(s.handle_reply(query, false, t), ReplyOutcome::Released { memory: MemoryId(1) });
        assert_eq!(s.counter(), 1);
    }

    #[test]
    fn late_reply_is_discarded() {
        let mut s = state();
        s.table = ProbabilityTable::from_weights(&[(B, 1.0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let TickOutcome::Query { query, .. } = s.tick(Some(MemoryId(0)), SimTime::ZERO, &mut rng) else {
            panic!()
        };
        let late = SimTime::from_millis(5.0);
        assert_eq!(s.expire_pending(late), vec![MemoryId(0)]);
        assert_eq!(s.counter(), 0);
        assert_eq!(s.handle_reply(query, true, late), ReplyOutcome::Stale);
        assert_eq!(s.counter(), 0);
        assert_eq!(s.pending_len(), 0);
    }

    #[test]
    fn sleep_in_range() {
        let s = state();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d = s.sleep_duration(&mut rng);
            assert!((0.005..=0.015).contains(&d));
        }
    }

    proptest! {
        #[test]
        fn updates_keep_table_normalised(
            weights in prop::collection::vec(0.0f64..1.0, 1..6),
            none in 0.01f64..1.0,
            rewarded in 0usize..6,
            rounds in 1usize..50,
        ) {
            let ids: Vec<(NodeId, f64)> = weights.iter().enumerate().map(|(i, w)| (NodeId(i + 1), *w)).collect();
            let mut t = ProbabilityTable::from_weights(&ids, none);
            let x = NodeId(rewarded % weights.len() + 1);
            for _ in 0..rounds {
                let before = t.get(x).unwrap();
                update_table(&mut t, A, &[A, x], 0.05);
                prop_assert!(t.is_normalised(1e-12));
                // strictly grows while other mass remains
                prop_assert!(t.get(x).unwrap() > before || 1.0 - before < 1e-12);
            }
        }

        #[test]
        fn counter_stays_in_bounds(ops in prop::collection::vec(0u8..4, 1..200), seed in 0u64..1000) {
            let mut s = state();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut queries = vec![];
            let mut t = SimTime::ZERO;
            for op in ops {
                t = t + SimTime::from_micros(100);
                match op {
                    0 => if let TickOutcome::Query { query, .. } = s.tick(Some(MemoryId(0)), t, &mut rng) { queries.push(query) },
                    1 => { s.handle_query(Some(MemoryId(1))); }
                    2 => if let Some(q) = queries.pop() { s.handle_reply(q, rng.random(), t); },
                    _ => if s.counter() > s.pending_len() { s.release() },
                }
                s.expire_pending(t);
                prop_assert!(s.counter() <= s.max_memory_acp);
                prop_assert!(s.pending_len() <= s.counter());
            }
        }
    }
}
