use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use acp_core::bds::{self, BellDiagonalState, NoiseParams, PauliErrorDistribution};
use acp_core::oracle::{oracle_validate, OracleCase};

fn bench_bds(c: &mut Criterion) {
    let dist = PauliErrorDistribution::UNIFORM;
    let noise = NoiseParams {
        gate_fidelity: 0.99,
        measure_fidelity: 0.99,
        coherence_time: 2.0,
    };
    let a = bds::initial_link_state(0.95, &dist);
    let b = BellDiagonalState::werner(0.9);
    c.bench_function("decohere", |bch| bch.iter(|| bds::decohere(black_box(&a), 0.1, 2.0, &dist)));
    c.bench_function("swap", |bch| bch.iter(|| bds::swap(black_box(&a), black_box(&b), &noise)));
    c.bench_function("purify_analysis", |bch| {
        bch.iter(|| bds::purify_analysis(black_box(&a), black_box(&b), &noise))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("purify_sampled", |bch| bch.iter(|| bds::purify(black_box(&a), &b, &noise, &mut rng)));
    let case = OracleCase::Purify { kept: a, meas: b, noise };
    c.bench_function("oracle_purify", |bch| bch.iter(|| oracle_validate(black_box(&case))));
}

criterion_group!(benches, bench_bds);
criterion_main!(benches);
