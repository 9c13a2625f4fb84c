//! Physical-layer models: memories, fibre links with a midpoint photonic
//! BSM, and classical message latency.

use serde::{Deserialize, Serialize};

use crate::bds::{self, BellDiagonalState, PauliErrorDistribution};
use crate::kernel::{SimTime, PS_PER_SECOND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MemoryId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpId(pub u64);

/// Which pool a memory slot belongs to. ACP may only use `Acp` slots;
/// request serving only uses `Reserved` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotClass {
    Acp,
    Reserved,
}

/// One emissive quantum memory.
#[derive(Debug, Clone)]
pub struct QuantumMemory {
    pub id: MemoryId,
    pub node: NodeId,
    pub class: SlotClass,
    /// EP half currently stored here.
    pub ep: Option<EpId>,
    /// Time decoherence was last applied to the stored qubit.
    pub last_touch: SimTime,
}

impl QuantumMemory {
    pub fn new(id: MemoryId, node: NodeId, class: SlotClass) -> Self {
        QuantumMemory {
            id,
            node,
            class,
            ep: None,
            last_touch: SimTime::ZERO,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ep.is_none()
    }

    /// Bring the stored qubit's share of `state` up to `now`.
    ///
    /// No-op when the memory is empty.
    pub fn touch(
        &mut self,
        state: &mut BellDiagonalState,
        now: SimTime,
        coherence_time: f64,
        dist: &PauliErrorDistribution,
    ) {
        if self.ep.is_none() {
            return;
        }
        assert!(self.last_touch <= now, "memory touched in the past");
        let dt = (now - self.last_touch).as_secs();
        *state = bds::decohere(state, dt, coherence_time, dist);
        self.last_touch = now;
    }
}

/// Midpoint photonic Bell-state-measurement station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsmDevice {
    pub detector_efficiency: f64,
    pub bsm_success: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumLink {
    pub endpoints: (NodeId, NodeId),
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub bsm: BsmDevice,
}

impl QuantumLink {
    pub fn half_length_km(&self) -> f64 {
        self.length_km / 2.0
    }

    pub fn other(&self, n: NodeId) -> NodeId {
        if self.endpoints.0 == n {
            self.endpoints.1
        } else {
            debug_assert_eq!(self.endpoints.1, n);
            self.endpoints.0
        }
    }
}

/// Constants of the classical latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalParams {
    /// Speed of light in fibre, m/s.
    pub light_speed: f64,
    /// Per-intermediate-node forwarding delay, s.
    pub forward_delay: f64,
    /// Processing delay at the end nodes, s.
    pub end_process_delay: f64,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        ClassicalParams {
            light_speed: 2e8,
            forward_delay: 20e-6,
            end_process_delay: 100e-6,
        }
    }
}

/// Fraction of photons surviving `length_km` of fibre.
pub fn transmittance(length_km: f64, attenuation_db_per_km: f64) -> f64 {
    assert!(length_km >= 0.0);
    10f64.powf(-attenuation_db_per_km * length_km / 10.0)
}

/// Probability that one meet-in-the-middle attempt heralds success: both
/// photons must be emitted, survive half the link, and be detected, and the
/// linear-optics BSM must succeed.
pub fn attempt_success_prob(link: &QuantumLink, memory_efficiency: f64) -> f64 {
    let arm = memory_efficiency
        * transmittance(link.half_length_km(), link.attenuation_db_per_km)
        * link.bsm.detector_efficiency;
    link.bsm.bsm_success * arm * arm
}

fn secs_to_ps(s: f64) -> u64 {
    (s * PS_PER_SECOND as f64).round() as u64
}

/// Latency of one classical message over a route of `path_length_m` metres
/// crossing `hops` intermediate nodes.
pub fn classical_latency(path_length_m: f64, hops: usize, params: &ClassicalParams) -> SimTime {
    assert!(path_length_m >= 0.0);
    let flight = secs_to_ps(path_length_m / params.light_speed);
    SimTime(
        flight
            + hops as u64 * secs_to_ps(params.forward_delay)
            + secs_to_ps(params.end_process_delay),
    )
}

/// Photon flight time over `length_km`.
pub fn photon_flight(length_km: f64, params: &ClassicalParams) -> SimTime {
    SimTime(secs_to_ps(length_km * 1e3 / params.light_speed))
}

/// Time from emission until both endpoints hold the midpoint's herald.
pub fn herald_delay(link: &QuantumLink, params: &ClassicalParams) -> SimTime {
    photon_flight(link.half_length_km(), params)
        + classical_latency(link.half_length_km() * 1e3, 0, params)
}

/// Spacing between consecutive emissions on one memory pair: the next
/// attempt waits for the previous herald, and never beats the emission rate.
pub fn emission_cycle(link: &QuantumLink, emission_period: f64, params: &ClassicalParams) -> SimTime {
    herald_delay(link, params).max(SimTime(secs_to_ps(emission_period)))
}
