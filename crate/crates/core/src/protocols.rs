//! Entanglement records, coordination messages and the pure parts of the
//! generation, swapping and purification protocols.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bds::{self, BellDiagonalState, NoiseParams};
use crate::hardware::{EpId, MemoryId, NodeId};
use crate::kernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpOrigin {
    /// Pre-generated by the continuous protocol into ACP-class memories.
    Acp,
    /// Produced while serving a request (fresh generation or swapping).
    OnDemand,
}

/// Why an EP stopped existing. Every record ends with exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConsumeReason {
    Delivered,
    Discarded,
    Swapped,
    PurifiedMeasured,
    PurifyFailed,
    Expired,
}

/// What currently holds an EP out of circulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpLock {
    /// Claimed by a request's generation handshake for reuse.
    Reuse(u64),
    /// Kept or measured half of an in-flight purification.
    Purify(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpRecord {
    pub id: EpId,
    pub ends: [(NodeId, MemoryId); 2],
    pub state: BellDiagonalState,
    pub created_at: SimTime,
    pub origin: EpOrigin,
    pub lock: Option<EpLock>,
}

impl EpRecord {
    pub fn nodes(&self) -> (NodeId, NodeId) {
        (self.ends[0].0, self.ends[1].0)
    }

    pub fn spans(&self, a: NodeId, b: NodeId) -> bool {
        let (x, y) = self.nodes();
        (x == a && y == b) || (x == b && y == a)
    }

    pub fn memory_at(&self, n: NodeId) -> Option<MemoryId> {
        self.ends.iter().find(|e| e.0 == n).map(|e| e.1)
    }

    /// The far end as seen from `n`.
    pub fn other_end(&self, n: NodeId) -> (NodeId, MemoryId) {
        if self.ends[0].0 == n {
            self.ends[1]
        } else {
            self.ends[0]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Query,
    ReplyYes,
    ReplyNo,
    EgRequest,
    EgResponse,
    Herald,
    SwapResult,
    PurifyCoord,
    PathNotify,
}

/// Classical message payloads. Ids refer to world-side protocol instances.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Query { query: u64, memory: MemoryId },
    ReplyYes { query: u64, session: u64, memory: MemoryId },
    ReplyNo { query: u64 },
    EgRequest { generation: u64 },
    EgResponse { generation: u64 },
    Herald { generation: u64, success: bool, emitted_at: SimTime },
    SwapResult { request: u64 },
    PurifyCoord { purification: u64 },
    PurifyCoordAck { purification: u64 },
    PathNotify { path: Vec<NodeId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Query { .. } => MessageKind::Query,
            Payload::ReplyYes { .. } => MessageKind::ReplyYes,
            Payload::ReplyNo { .. } => MessageKind::ReplyNo,
            Payload::EgRequest { .. } => MessageKind::EgRequest,
            Payload::EgResponse { .. } => MessageKind::EgResponse,
            Payload::Herald { .. } => MessageKind::Herald,
            Payload::SwapResult { .. } => MessageKind::SwapResult,
            Payload::PurifyCoord { .. } | Payload::PurifyCoordAck { .. } => MessageKind::PurifyCoord,
            Payload::PathNotify { .. } => MessageKind::PathNotify,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    Freshest,
    Random,
}

/// Pick a pre-generated EP for reuse among `candidates` (the live EPs on one
/// link). Locked and on-demand records are skipped.
pub fn check_pregenerated<'a, R: Rng + ?Sized>(
    candidates: impl IntoIterator<Item = &'a EpRecord>,
    policy: SelectionPolicy,
    rng: &mut R,
) -> Option<EpId> {
    let mut free: Vec<&EpRecord> = candidates
        .into_iter()
        .filter(|e| e.origin == EpOrigin::Acp && e.lock.is_none())
        .collect();
    if free.is_empty() {
        return None;
    }
    free.sort_by_key(|e| e.id);
    match policy {
        SelectionPolicy::Freshest => free
            .iter()
            .max_by(|a, b| a.created_at.cmp(&b.created_at).then(b.id.cmp(&a.id)))
            .map(|e| e.id),
        SelectionPolicy::Random => Some(free[rng.random_range(0..free.len())].id),
    }
}

/// Join `left = (a, m)` and `right = (m, b)` at `m`. States must already be
/// brought up to the swap instant.
pub fn swap_records(
    left: &EpRecord,
    right: &EpRecord,
    m: NodeId,
    noise: &NoiseParams,
    id: EpId,
    now: SimTime,
) -> EpRecord {
    assert!(left.memory_at(m).is_some() && right.memory_at(m).is_some());
    let a = left.other_end(m);
    let b = right.other_end(m);
    assert_ne!(a.0, b.0, "swap would produce a self-loop");
    EpRecord {
        id,
        ends: [a, b],
        state: bds::swap(&left.state, &right.state, noise),
        created_at: now,
        origin: EpOrigin::OnDemand,
        lock: None,
    }
}

/// Number of heralded attempts until the first success.
pub fn attempts_until_success<R: Rng + ?Sized>(p: f64, rng: &mut R, cap: u64) -> Option<u64> {
    (1..=cap).find(|_| rng.random::<f64>() < p)
}
