//! Bell-diagonal-state calculus.
//!
//! A two-qubit Bell-diagonal state is stored as four weights indexed by a
//! Pauli label `P`, where label `P` stands for the Bell state
//! `(P ⊗ I)|Φ+⟩`: `I ↔ Φ+`, `X ↔ Ψ+`, `Y ↔ Ψ−`, `Z ↔ Φ−`. Labels are
//! encoded as two bits `(x, z)` with `I=0b00, X=0b01, Z=0b10, Y=0b11`, so
//! composing two Paulis (up to phase) is a bitwise XOR of their indices.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of each Pauli label in the weight array.
pub const I: usize = 0;
pub const X: usize = 1;
pub const Z: usize = 2;
pub const Y: usize = 3;

/// Storage order is `[I, X, Z, Y]` so that index XOR is Pauli composition.
/// Public accessors expose the conventional `(λ_I, λ_X, λ_Y, λ_Z)` order.
const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BellDiagonalState {
    w: [f64; 4],
}

impl BellDiagonalState {
    pub const PERFECT: BellDiagonalState = BellDiagonalState { w: [1.0, 0.0, 0.0, 0.0] };
    pub const MAXIMALLY_MIXED: BellDiagonalState = BellDiagonalState { w: [0.25; 4] };

    /// Build from weights in `(λ_I, λ_X, λ_Y, λ_Z)` order.
    ///
    /// Panics if any weight is outside `[0, 1]` or the sum is off by more
    /// than 1e-9; small rounding is renormalised away.
    pub fn new(l_i: f64, l_x: f64, l_y: f64, l_z: f64) -> Self {
        Self::from_indexed([l_i, l_x, l_z, l_y])
    }

    /// Build from weights in internal `[I, X, Z, Y]` index order.
    pub fn from_indexed(w: [f64; 4]) -> Self {
        let sum: f64 = w.iter().sum();
        assert!(
            w.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)) && (sum - 1.0).abs() < 1e-9,
            "invalid Bell-diagonal weights {w:?}"
        );
        Self::renormalised(w)
    }

    /// Werner state of fidelity `f`: remaining weight spread evenly.
    pub fn werner(f: f64) -> Self {
        let r = (1.0 - f) / 3.0;
        Self::new(f, r, r, r)
    }

    fn renormalised(mut w: [f64; 4]) -> Self {
        for v in w.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= sum;
        }
        BellDiagonalState { w }
    }

    pub fn fidelity(&self) -> f64 {
        self.w[I]
    }

    /// Weights in `(λ_I, λ_X, λ_Y, λ_Z)` order.
    pub fn weights(&self) -> [f64; 4] {
        [self.w[I], self.w[X], self.w[Y], self.w[Z]]
    }

    /// Weights in internal index order (`[I, X, Z, Y]`).
    pub fn indexed(&self) -> [f64; 4] {
        self.w
    }

    pub fn weight(&self, label: usize) -> f64 {
        self.w[label]
    }

    pub fn is_normalised(&self) -> bool {
        (self.w.iter().sum::<f64>() - 1.0).abs() <= NORM_TOL && self.w.iter().all(|&v| v >= 0.0)
    }

    pub fn max_abs_diff(&self, other: &BellDiagonalState) -> f64 {
        self.w
            .iter()
            .zip(other.w.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Random bilateral rotation: Werner state with the same fidelity.
    pub fn twirl(&self) -> Self {
        Self::werner(self.fidelity())
    }

    /// Mix toward the maximally mixed state, keeping weight `keep`.
    pub fn depolarise(&self, keep: f64) -> Self {
        let mut w = [0.0; 4];
        for (k, v) in w.iter_mut().enumerate() {
            *v = keep * self.w[k] + (1.0 - keep) * 0.25;
        }
        Self::renormalised(w)
    }
}

impl fmt::Display for BellDiagonalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.weights();
        write!(f, "({a:.6}, {b:.6}, {c:.6}, {d:.6})")
    }
}

/// Probability distribution of single-qubit X, Y, Z errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PauliErrorDistribution {
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
}

impl PauliErrorDistribution {
    pub const UNIFORM: PauliErrorDistribution = PauliErrorDistribution {
        p_x: 1.0 / 3.0,
        p_y: 1.0 / 3.0,
        p_z: 1.0 / 3.0,
    };

    pub fn new(p_x: f64, p_y: f64, p_z: f64) -> Option<Self> {
        let d = PauliErrorDistribution { p_x, p_y, p_z };
        d.is_valid().then_some(d)
    }

    pub fn is_valid(&self) -> bool {
        [self.p_x, self.p_y, self.p_z].iter().all(|&p| p >= 0.0)
            && (self.p_x + self.p_y + self.p_z - 1.0).abs() <= 1e-12
    }

    /// Weights of the Pauli channel accumulated over `dt` seconds when each
    /// Pauli `P` strikes at rate `p_P / coherence_time`.
    ///
    /// The channel's Pauli-transfer eigenvalues are `λ_σ = exp(−2t Σ r_P)`
    /// over the Paulis `P` that anticommute with `σ`, which makes the family
    /// closed under composition in `dt`.
    pub fn channel_weights(&self, dt: f64, coherence_time: f64) -> [f64; 4] {
        let mut w = [0.0; 4];
        if dt <= 0.0 || coherence_time.is_infinite() {
            w[I] = 1.0;
            return w;
        }
        let s = dt / coherence_time;
        let lx = (-2.0 * s * (self.p_y + self.p_z)).exp();
        let ly = (-2.0 * s * (self.p_x + self.p_z)).exp();
        let lz = (-2.0 * s * (self.p_x + self.p_y)).exp();
        w[I] = (1.0 + lx + ly + lz) / 4.0;
        w[X] = (1.0 + lx - ly - lz) / 4.0;
        w[Y] = (1.0 - lx + ly - lz) / 4.0;
        w[Z] = (1.0 - lx - ly + lz) / 4.0;
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub gate_fidelity: f64,
    pub measure_fidelity: f64,
    /// Memory coherence time in seconds.
    pub coherence_time: f64,
}

impl NoiseParams {
    pub const IDEAL: NoiseParams = NoiseParams {
        gate_fidelity: 1.0,
        measure_fidelity: 1.0,
        coherence_time: f64::INFINITY,
    };

    pub fn is_valid(&self) -> bool {
        (self.gate_fidelity > 0.0 && self.gate_fidelity <= 1.0)
            && (self.measure_fidelity > 0.0 && self.measure_fidelity <= 1.0)
            && self.coherence_time > 0.0
    }

    /// Weight kept by the swap's depolarising noise: one two-qubit gate and
    /// two single-qubit measurements.
    pub fn swap_weight(&self) -> f64 {
        self.gate_fidelity * self.measure_fidelity * self.measure_fidelity
    }
}

/// XOR convolution over Pauli labels: `c_k = Σ_{i⊕j=k} a_i b_j`.
fn xor_convolve(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let mut c = [0.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i ^ j] += a[i] * b[j];
        }
    }
    c
}

/// Fresh link pair: fidelity `f0`, remaining weight distributed by `dist`.
pub fn initial_link_state(f0: f64, dist: &PauliErrorDistribution) -> BellDiagonalState {
    assert!(f0 > 0.25 - 1e-12 && f0 <= 1.0, "initial fidelity {f0} out of range");
    let e = 1.0 - f0;
    BellDiagonalState::new(f0, e * dist.p_x, e * dist.p_y, e * dist.p_z)
}

/// Probability that one memory qubit suffers any Pauli error over `dt`.
pub fn decoherence_probability(dt: f64, coherence_time: f64, dist: &PauliErrorDistribution) -> f64 {
    1.0 - dist.channel_weights(dt, coherence_time)[I]
}

/// Time-dependent single-qubit Pauli noise on one half of the pair.
pub fn decohere(
    s: &BellDiagonalState,
    dt: f64,
    coherence_time: f64,
    dist: &PauliErrorDistribution,
) -> BellDiagonalState {
    assert!(dt >= 0.0, "negative decoherence interval {dt}");
    if dt == 0.0 || coherence_time.is_infinite() {
        return *s;
    }
    let w = dist.channel_weights(dt, coherence_time);
    BellDiagonalState::renormalised(xor_convolve(&w, &s.w))
}

/// Bell-state measurement on the middle qubits of `a = (x, m)` and
/// `b = (m, y)`, followed by Pauli-frame correction. Gate and measurement
/// noise depolarise the output with weight `gate · measure²`.
pub fn swap(a: &BellDiagonalState, b: &BellDiagonalState, noise: &NoiseParams) -> BellDiagonalState {
    let ideal = xor_convolve(&a.w, &b.w);
    BellDiagonalState::renormalised(ideal).depolarise(noise.swap_weight())
}

/// Analytic result of one purification round, before sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurifyAnalysis {
    pub p_succ: f64,
    pub out: BellDiagonalState,
}

/// Bilateral-CNOT purification with a coincidence test.
///
/// The kept pair controls, the measured pair is the target and is read out
/// in the Z basis on both sides. The test passes when both outcomes agree,
/// which for noiseless readout means the X bits of the two labels agree
/// (groups `{I, Z}` and `{X, Y}`). Gate noise depolarises each input with
/// weight `gate_fidelity`; each side's readout bit flips with probability
/// `1 − measure_fidelity`.
pub fn purify_analysis(
    kept: &BellDiagonalState,
    meas: &BellDiagonalState,
    noise: &NoiseParams,
) -> PurifyAnalysis {
    let k = kept.depolarise(noise.gate_fidelity).w;
    let m = meas.depolarise(noise.gate_fidelity).w;

    // pass[l] / fail[l]: unnormalised kept weight with output label l when
    // the true parity is even / odd.
    let mut pass = [0.0; 4];
    let mut fail = [0.0; 4];
    for (i, ki) in k.iter().enumerate() {
        for (j, mj) in m.iter().enumerate() {
            // Bilateral CNOT: kept z-bit picks up the target's z-bit; the
            // target's x-bit picks up the control's x-bit.
            let out = i ^ (j & 0b10);
            if (i ^ j) & 0b01 == 0 {
                pass[out] += ki * mj;
            } else {
                fail[out] += ki * mj;
            }
        }
    }
    let f = noise.measure_fidelity;
    let agree_even = f * f + (1.0 - f) * (1.0 - f);
    let agree_odd = 2.0 * f * (1.0 - f);
    let mut w = [0.0; 4];
    for l in 0..4 {
        w[l] = agree_even * pass[l] + agree_odd * fail[l];
    }
    let p_succ: f64 = w.iter().sum();
    let out = if p_succ > 0.0 {
        BellDiagonalState::renormalised(w)
    } else {
        BellDiagonalState::MAXIMALLY_MIXED
    };
    PurifyAnalysis { p_succ, out }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurifyOutcome {
    pub success: bool,
    pub out: Option<BellDiagonalState>,
    pub p_succ: f64,
}

/// One sampled purification round. On failure both inputs are lost.
pub fn purify<R: Rng + ?Sized>(
    kept: &BellDiagonalState,
    meas: &BellDiagonalState,
    noise: &NoiseParams,
    rng: &mut R,
) -> PurifyOutcome {
    let a = purify_analysis(kept, meas, noise);
    let success = rng.random::<f64>() < a.p_succ;
    PurifyOutcome {
        success,
        out: success.then_some(a.out),
        p_succ: a.p_succ,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    const U: PauliErrorDistribution = PauliErrorDistribution::UNIFORM;

    fn close(a: &BellDiagonalState, expect: [f64; 4], tol: f64) {
        let got = a.weights();
        for k in 0..4 {
            assert!(
                (got[k] - expect[k]).abs() <= tol,
                "component {k}: got {got:?}, expected {expect:?}"
            );
        }
    }

    fn table1() -> NoiseParams {
        NoiseParams {
            gate_fidelity: 0.99,
            measure_fidelity: 0.99,
            coherence_time: 2.0,
        }
    }

    #[test]
    fn initial_states() {
        close(&initial_link_state(1.0, &U), [1.0, 0.0, 0.0, 0.0], 0.0);
        close(
            &initial_link_state(0.95, &U),
            [0.95, 1.0 / 60.0, 1.0 / 60.0, 1.0 / 60.0],
            1e-15,
        );
        close(&initial_link_state(0.25, &U), [0.25; 4], 1e-15);
    }

    #[test]
    fn decohere_cases() {
        let s = initial_link_state(0.95, &U);
        assert_eq!(decohere(&s, 0.0, 2.0, &U), s);
        let mixed = BellDiagonalState::MAXIMALLY_MIXED;
        close(&decohere(&mixed, 0.7, 2.0, &U), [0.25; 4], 1e-15);
        // Frozen from the Lindblad-integration oracle (see oracle tests).
        close(
            &decohere(&s, 0.1, 2.0, &U),
            [0.904855, 0.031715, 0.031715, 0.031715],
            5e-6,
        );
    }

    #[test]
    fn decohere_tends_to_maximally_mixed() {
        let s = decohere(&BellDiagonalState::PERFECT, 1e3, 2.0, &U);
        close(&s, [0.25; 4], 1e-12);
    }

    #[test]
    fn swap_cases() {
        let p = BellDiagonalState::PERFECT;
        close(&swap(&p, &p, &NoiseParams::IDEAL), [1.0, 0.0, 0.0, 0.0], 1e-15);
        let a = BellDiagonalState::new(0.9, 0.1, 0.0, 0.0);
        close(&swap(&a, &a, &NoiseParams::IDEAL), [0.82, 0.18, 0.0, 0.0], 1e-12);
        let noisy = swap(&a, &a, &table1());
        close(&noisy, [0.803070, 0.182079, 0.007425, 0.007425], 5e-6);
        assert!((table1().swap_weight() - 0.970299).abs() < 1e-12);
    }

    #[test]
    fn purify_perfect_inputs() {
        let p = BellDiagonalState::PERFECT;
        let a = purify_analysis(&p, &p, &NoiseParams::IDEAL);
        assert!((a.p_succ - 1.0).abs() < 1e-15);
        close(&a.out, [1.0, 0.0, 0.0, 0.0], 1e-15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let o = purify(&p, &p, &NoiseParams::IDEAL, &mut rng);
        assert!(o.success);
    }

    #[test]
    fn purify_matches_bbpssw_recurrence_for_werner() {
        for f in [0.55, 0.7, 0.8, 0.95] {
            let w = BellDiagonalState::werner(f);
            let a = purify_analysis(&w, &w, &NoiseParams::IDEAL);
            let e = (1.0 - f) / 3.0;
            let p = f * f + 2.0 * f * e + 5.0 * e * e;
            let f2 = (f * f + e * e) / p;
            assert!((a.p_succ - p).abs() < 1e-12);
            assert!((a.out.fidelity() - f2).abs() < 1e-12);
        }
        let a = purify_analysis(
            &BellDiagonalState::werner(0.8),
            &BellDiagonalState::werner(0.8),
            &NoiseParams::IDEAL,
        );
        assert!((a.p_succ - 0.768889).abs() < 1e-6);
        assert!((a.out.fidelity() - 0.838151).abs() < 1e-6);
    }

    #[test]
    fn purify_failure_sampling_is_seeded() {
        let w = BellDiagonalState::werner(0.6);
        let draws = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..32)
                .map(|_| purify(&w, &w, &table1(), &mut rng).success)
                .collect::<Vec<_>>()
        };
        assert_eq!(draws(3), draws(3));
        assert!(draws(3).iter().any(|s| !s));
    }

    fn arb_state() -> impl Strategy<Value = BellDiagonalState> {
        prop::array::uniform4(0.0f64..1.0).prop_filter_map("non-zero", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| BellDiagonalState::from_indexed(w.map(|v| v / s)))
        })
    }

    proptest! {
        #[test]
        fn ops_preserve_normalisation(a in arb_state(), b in arb_state(), dt in 0.0f64..5.0) {
            prop_assert!(decohere(&a, dt, 2.0, &U).is_normalised());
            prop_assert!(swap(&a, &b, &table1()).is_normalised());
            let pa = purify_analysis(&a, &b, &table1());
            prop_assert!(pa.out.is_normalised());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&pa.p_succ));
        }

        #[test]
        fn decohere_is_a_semigroup(a in arb_state(), t1 in 0.0f64..3.0, t2 in 0.0f64..3.0) {
            let two = decohere(&decohere(&a, t1, 2.0, &U), t2, 2.0, &U);
            let one = decohere(&a, t1 + t2, 2.0, &U);
            prop_assert!(two.max_abs_diff(&one) <= 1e-12);
        }

        #[test]
        fn swap_commutes(a in arb_state(), b in arb_state()) {
            prop_assert!(swap(&a, &b, &table1()).max_abs_diff(&swap(&b, &a, &table1())) <= 1e-15);
        }
    }
}
