use criterion::{criterion_group, criterion_main, Criterion};

use acp_core::scenario::{run_scenario, BuiltinTopology, Scenario, ScenarioConfig, Strategy, Switch};

fn scenario(topology: BuiltinTopology, strategy: Strategy, purify: bool, duration_s: f64) -> Scenario {
    let mut c = ScenarioConfig::builtin(topology, strategy);
    c.duration_s = duration_s;
    c.seed = 1;
    if purify {
        c.purification = Switch::On;
    }
    Scenario::new(c).expect("builtin scenario")
}

fn bench_scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);
    for (name, sc) in [
        ("two_node_odo_10s", scenario(BuiltinTopology::TwoNode, Strategy::Odo, false, 10.0)),
        ("two_node_acp_10s", scenario(BuiltinTopology::TwoNode, Strategy::Acp, false, 10.0)),
        ("two_node_acp_purify_10s", scenario(BuiltinTopology::TwoNode, Strategy::Acp, true, 10.0)),
        ("bottleneck_acp_10s", scenario(BuiltinTopology::Bottleneck20, Strategy::Acp, false, 10.0)),
        ("as_graph_acp_10s", scenario(BuiltinTopology::AsGraph, Strategy::Acp, false, 10.0)),
    ] {
        g.bench_function(name, |b| b.iter(|| run_scenario(&sc)));
    }
    g.finish();
}

criterion_group!(benches, bench_scenarios);
criterion_main!(benches);
