//! Deterministic discrete-event engine.
//!
//! Events are ordered by `(fire_time, seq)` where `seq` is a monotone
//! counter assigned at scheduling time, so ties dispatch FIFO. Cancellation
//! is lazy: a cancelled entry stays in the heap and is skipped on pop.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PS_PER_SECOND: u64 = 1_000_000_000_000;

/// Simulation time in integer picoseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(secs: f64) -> SimTime {
        assert!(secs >= 0.0 && secs.is_finite(), "negative or non-finite time {secs}");
        SimTime((secs * PS_PER_SECOND as f64).round() as u64)
    }

    pub fn from_millis(ms: f64) -> SimTime {
        SimTime::from_secs(ms * 1e-3)
    }

    pub fn from_micros(us: u64) -> SimTime {
        SimTime(us * 1_000_000)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / PS_PER_SECOND as f64
    }

    pub fn as_millis(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_sub(rhs.0).expect("SimTime underflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

/// Handle returned by [`Timeline::schedule`]; used to cancel an event
/// before it is dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

struct Entry<E> {
    time: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunStats {
    pub dispatched: u64,
    pub cancelled_skipped: u64,
}

/// Priority queue of pending events plus the simulation clock.
pub struct Timeline<E> {
    heap: BinaryHeap<Entry<E>>,
    queued: HashSet<u64>,
    cancelled: HashSet<u64>,
    next_seq: u64,
    now: SimTime,
    stats: RunStats,
}

impl<E> Default for Timeline<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Timeline<E> {
    pub fn new() -> Self {
        Timeline {
            heap: BinaryHeap::new(),
            queued: HashSet::new(),
            cancelled: HashSet::new(),
            next_seq: 0,
            now: SimTime::ZERO,
            stats: RunStats::default(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    pub fn pending(&self) -> usize {
        self.queued.len()
    }

    /// Enqueue `payload` at `time`.
    ///
    /// Panics if `time` is earlier than the current clock: scheduling into
    /// the past breaks causality and aborts the run.
    pub fn schedule(&mut self, time: SimTime, payload: E) -> EventHandle {
        assert!(
            time >= self.now,
            "event scheduled in the past: {time} < now {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, payload });
        self.queued.insert(seq);
        EventHandle(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        let t = self.now + delay;
        self.schedule(t, payload)
    }

    /// Returns false if the event was already dispatched or cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.queued.remove(&handle.0) {
            self.cancelled.insert(handle.0);
            true
        } else {
            false
        }
    }

    /// Pop the next live event whose fire time is `<= t_end`, advancing the
    /// clock to it. Returns `None` (and leaves the clock untouched) when no
    /// such event remains.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<(SimTime, u64, E)> {
        loop {
            let top = self.heap.peek()?;
            if top.time > t_end {
                return None;
            }
            let entry = self.heap.pop().expect("peeked");
            if self.cancelled.remove(&entry.seq) {
                self.stats.cancelled_skipped += 1;
                continue;
            }
            self.queued.remove(&entry.seq);
            debug_assert!(entry.time >= self.now);
            self.now = entry.time;
            self.stats.dispatched += 1;
            return Some((entry.time, entry.seq, entry.payload));
        }
    }

    /// Advance the clock to `t` after draining. `t` must not be in the past.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatch every event with fire time `<= t_end` through `handler`,
    /// which may schedule further events. Leaves `now() == t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Timeline<E>, E),
    {
        let before = self.stats;
        while let Some((_, _, ev)) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.advance_to(t_end);
        RunStats {
            dispatched: self.stats.dispatched - before.dispatched,
            cancelled_skipped: self.stats.cancelled_skipped - before.cancelled_skipped,
        }
    }
}

/// What a random stream is used for. Each `(node, purpose)` pair gets its own
/// generator so adding a node does not shift another node's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RngPurpose {
    Sleep,
    Roulette,
    EpSelection,
    Purification,
    Attempt(usize),
    Traffic,
    Topology,
    Swap,
}

impl RngPurpose {
    fn tag(self) -> u64 {
        match self {
            RngPurpose::Sleep => 1,
            RngPurpose::Roulette => 2,
            RngPurpose::EpSelection => 3,
            RngPurpose::Purification => 4,
            RngPurpose::Attempt(peer) => 0x100 + peer as u64,
            RngPurpose::Traffic => 5,
            RngPurpose::Topology => 6,
            RngPurpose::Swap => 7,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from the master seed, an owner index and a purpose.
pub fn derive_seed(master: u64, owner: usize, purpose: RngPurpose) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ owner as u64) ^ purpose.tag())
}

pub type RngStream = ChaCha8Rng;

pub fn rng_stream(master: u64, owner: usize, purpose: RngPurpose) -> RngStream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, owner, purpose))
}

/// Lazily created per-`(owner, purpose)` generators split from one master seed.
pub struct RngStreams {
    master: u64,
    streams: std::collections::BTreeMap<(usize, RngPurpose), RngStream>,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        RngStreams {
            master,
            streams: Default::default(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn get(&mut self, owner: usize, purpose: RngPurpose) -> &mut RngStream {
        let master = self.master;
        self.streams
            .entry((owner, purpose))
            .or_insert_with(|| rng_stream(master, owner, purpose))
    }
}
