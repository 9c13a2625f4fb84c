//! Exact density-matrix reference used to validate the Bell-diagonal
//! analytics in [`crate::bds`].
//!
//! Nothing here is used by the simulator itself. States are expanded into
//! full 4×4 (two pairs: 16×16) complex matrices, the physical process is
//! applied gate by gate, and the result is projected back onto the Bell
//! basis. Qubit 0 is the most significant bit of the basis index.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::bds::{self, BellDiagonalState, NoiseParams, PauliErrorDistribution};

type Mat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

fn pauli(label: usize) -> Mat {
    let i = Complex64::new(0.0, 1.0);
    match label {
        bds::I => Mat::identity(2, 2),
        bds::X => Mat::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]),
        bds::Y => Mat::from_row_slice(2, 2, &[ZERO, -i, i, ZERO]),
        bds::Z => Mat::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]),
        _ => unreachable!("Pauli label {label}"),
    }
}

fn kron_all(ms: &[Mat]) -> Mat {
    ms.iter()
        .skip(1)
        .fold(ms[0].clone(), |acc, m| acc.kronecker(m))
}

/// `(P ⊗ I)|Φ+⟩` as a column vector.
fn bell_vector(label: usize) -> Mat {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let phi = Mat::from_column_slice(4, 1, &[h.into(), ZERO, ZERO, h.into()]);
    kron_all(&[pauli(label), Mat::identity(2, 2)]) * phi
}

fn projector(v: &Mat) -> Mat {
    v * v.adjoint()
}

pub fn density_matrix(s: &BellDiagonalState) -> Mat {
    let w = s.indexed();
    (0..4).fold(Mat::zeros(4, 4), |acc, k| {
        acc + projector(&bell_vector(k)) * Complex64::from(w[k])
    })
}

/// Bell-basis diagonal of a two-qubit density matrix, in index order.
/// Also returns the largest off-diagonal Bell-basis magnitude.
pub fn bell_diagonal(rho: &Mat) -> ([f64; 4], f64) {
    let vs: Vec<Mat> = (0..4).map(bell_vector).collect();
    let mut diag = [0.0; 4];
    let mut off: f64 = 0.0;
    for (a, va) in vs.iter().enumerate() {
        for (b, vb) in vs.iter().enumerate() {
            let e = (va.adjoint() * rho * vb)[(0, 0)];
            if a == b {
                diag[a] = e.re;
            } else {
                off = off.max(e.norm());
            }
        }
    }
    (diag, off)
}

fn depolarise_matrix(rho: &Mat, keep: f64) -> Mat {
    let n = rho.nrows();
    rho * Complex64::from(keep) + Mat::identity(n, n) * Complex64::from((1.0 - keep) / n as f64)
}

/// Lindblad generator for Pauli noise on qubit 0 of a pair.
fn lindblad(rho: &Mat, ops: &[(f64, Mat)]) -> Mat {
    ops.iter().fold(Mat::zeros(4, 4), |acc, (rate, l)| {
        acc + (l * rho * l.adjoint() - rho) * Complex64::from(*rate)
    })
}

/// Integrate single-qubit Pauli decoherence with classical RK4.
pub fn decohere(
    s: &BellDiagonalState,
    dt: f64,
    coherence_time: f64,
    dist: &PauliErrorDistribution,
    steps: usize,
) -> [f64; 4] {
    let mut rho = density_matrix(s);
    if dt > 0.0 {
        let id2 = Mat::identity(2, 2);
        let ops: Vec<(f64, Mat)> = [(bds::X, dist.p_x), (bds::Y, dist.p_y), (bds::Z, dist.p_z)]
            .into_iter()
            .map(|(l, p)| (p / coherence_time, kron_all(&[pauli(l), id2.clone()])))
            .collect();
        let h = dt / steps as f64;
        let hc = Complex64::from(h);
        for _ in 0..steps {
            let k1 = lindblad(&rho, &ops);
            let k2 = lindblad(&(&rho + &k1 * (hc * 0.5)), &ops);
            let k3 = lindblad(&(&rho + &k2 * (hc * 0.5)), &ops);
            let k4 = lindblad(&(&rho + &k3 * hc), &ops);
            rho += (k1 + k2 * Complex64::from(2.0) + k3 * Complex64::from(2.0) + k4) * (hc / 6.0);
        }
    }
    bell_diagonal(&rho).0
}

/// Permutation matrix reordering qubits: output qubit `i` is input qubit `perm[i]`.
fn permute_qubits(n: usize, perm: &[usize]) -> Mat {
    let dim = 1 << n;
    let mut p = Mat::zeros(dim, dim);
    for src in 0..dim {
        let mut dst = 0;
        for (i, &from) in perm.iter().enumerate() {
            let bit = (src >> (n - 1 - from)) & 1;
            dst |= bit << (n - 1 - i);
        }
        p[(dst, src)] = ONE;
    }
    p
}

/// Trace out the last two qubits of a four-qubit matrix.
fn trace_last_two(rho: &Mat) -> Mat {
    let mut out = Mat::zeros(4, 4);
    for a in 0..4 {
        for b in 0..4 {
            let mut acc = ZERO;
            for m in 0..4 {
                acc += rho[(a * 4 + m, b * 4 + m)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// Bell-state measurement on the middle qubits of `(x, m1) ⊗ (m2, y)`,
/// with a Pauli-frame correction on `x`, then output depolarisation.
pub fn swap(a: &BellDiagonalState, b: &BellDiagonalState, noise: &NoiseParams) -> [f64; 4] {
    let rho = density_matrix(a).kronecker(&density_matrix(b));
    // reorder [x, m1, m2, y] -> [x, y, m1, m2]
    let perm = permute_qubits(4, &[0, 3, 1, 2]);
    let rho = &perm * rho * perm.transpose();
    let id4 = Mat::identity(4, 4);
    let mut out = Mat::zeros(4, 4);
    for k in 0..4 {
        let proj = id4.kronecker(&projector(&bell_vector(k)));
        let post = trace_last_two(&(&proj * &rho * &proj));
        let corr = kron_all(&[pauli(k), Mat::identity(2, 2)]);
        out += &corr * post * corr.adjoint();
    }
    let out = depolarise_matrix(&out, noise.swap_weight());
    bell_diagonal(&out).0
}

fn cnot(n: usize, control: usize, target: usize) -> Mat {
    let dim = 1 << n;
    let mut u = Mat::zeros(dim, dim);
    for src in 0..dim {
        let c = (src >> (n - 1 - control)) & 1;
        let dst = if c == 1 { src ^ (1 << (n - 1 - target)) } else { src };
        u[(dst, src)] = ONE;
    }
    u
}

/// Result of the purification circuit: success probability and the
/// Bell-diagonal weights of the kept pair given a passed test.
pub fn purify(
    kept: &BellDiagonalState,
    meas: &BellDiagonalState,
    noise: &NoiseParams,
) -> (f64, [f64; 4]) {
    let rk = depolarise_matrix(&density_matrix(kept), noise.gate_fidelity);
    let rm = depolarise_matrix(&density_matrix(meas), noise.gate_fidelity);
    // qubits: [k_A, k_B, m_A, m_B]
    let rho = rk.kronecker(&rm);
    let u = cnot(4, 0, 2) * cnot(4, 1, 3);
    let rho = &u * rho * u.adjoint();
    let f = noise.measure_fidelity;
    let mut acc = Mat::zeros(4, 4);
    for c_a in 0..2 {
        for c_b in 0..2 {
            let idx = c_a * 2 + c_b;
            let mut proj_m = Mat::zeros(4, 4);
            proj_m[(idx, idx)] = ONE;
            let proj = Mat::identity(4, 4).kronecker(&proj_m);
            let post = trace_last_two(&(&proj * &rho * &proj));
            let agree = if c_a == c_b {
                f * f + (1.0 - f) * (1.0 - f)
            } else {
                2.0 * f * (1.0 - f)
            };
            acc += post * Complex64::from(agree);
        }
    }
    let p = acc.trace().re;
    let (mut w, _) = bell_diagonal(&acc);
    for v in w.iter_mut() {
        *v /= p;
    }
    (p, w)
}

/// Operation to check against the reference.
#[derive(Debug, Clone, Copy)]
pub enum OracleCase {
    Decohere {
        state: BellDiagonalState,
        dt: f64,
        coherence_time: f64,
        dist: PauliErrorDistribution,
    },
    Swap {
        a: BellDiagonalState,
        b: BellDiagonalState,
        noise: NoiseParams,
    },
    Purify {
        kept: BellDiagonalState,
        meas: BellDiagonalState,
        noise: NoiseParams,
    },
}

fn max_dev(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// RK4 steps used by [`oracle_validate`] for decoherence; the step error
/// scales as `(dt/T)^5 / steps^4`.
pub const DECOHERE_STEPS: usize = 400;

/// Largest per-component deviation between the analytic result and the
/// density-matrix reference. For purification the success probability is
/// included in the comparison.
pub fn oracle_validate(case: &OracleCase) -> f64 {
    match *case {
        OracleCase::Decohere {
            state,
            dt,
            coherence_time,
            dist,
        } => {
            let analytic = bds::decohere(&state, dt, coherence_time, &dist).indexed();
            let reference = decohere(&state, dt, coherence_time, &dist, DECOHERE_STEPS);
            max_dev(&analytic, &reference)
        }
        OracleCase::Swap { a, b, noise } => {
            max_dev(&bds::swap(&a, &b, &noise).indexed(), &swap(&a, &b, &noise))
        }
        OracleCase::Purify { kept, meas, noise } => {
            let analytic = bds::purify_analysis(&kept, &meas, &noise);
            let (p, w) = purify(&kept, &meas, &noise);
            max_dev(&analytic.out.indexed(), &w).max((analytic.p_succ - p).abs())
        }
    }
}
