//! Requests, traffic, scenario configuration, the run driver and CSV output.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, OutputError};
use crate::hardware::{BsmDevice, NodeId};
use crate::kernel::{rng_stream, RngPurpose, SimTime};
use crate::protocols::SelectionPolicy;
use crate::sim::{Audit, RequestOutcome, SimParams, World, WorldConfig};
use crate::topology::{builtin, ForwardingTable, LinkSpec, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Generate only after a request starts.
    Odo,
    /// Continuous generation with a frozen uniform neighbour table.
    Ucp,
    /// Continuous generation with adaptive tables.
    Acp,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Odo => "odo",
            Strategy::Ucp => "ucp",
            Strategy::Acp => "acp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    #[default]
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub initiator: NodeId,
    pub responder: NodeId,
    pub arrival: SimTime,
    pub start: SimTime,
    pub end: SimTime,
    pub num_eps: u32,
    pub fidelity_threshold: f64,
}

/// Request probabilities over ordered `(initiator, responder)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMatrix {
    size: usize,
    /// Non-zero entries in row-major order.
    entries: Vec<(NodeId, NodeId, f64)>,
}

impl TrafficMatrix {
    /// Validates and normalises a dense matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, String> {
        let size = rows.len();
        let mut entries = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(format!("row {i} has {} entries, expected {size}", row.len()));
            }
            for (j, &p) in row.iter().enumerate() {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(format!("entry [{i},{j}] = {p} is negative"));
                }
                if i == j && p != 0.0 {
                    return Err(format!("diagonal entry [{i},{i}] must be zero"));
                }
                if p > 0.0 {
                    entries.push((NodeId(i), NodeId(j), p));
                }
            }
        }
        Self::from_entries(size, entries)
    }

    /// Equal weight on each listed pair.
    pub fn uniform_pairs(size: usize, pairs: &[(NodeId, NodeId)]) -> Result<Self, String> {
        let mut ps: Vec<(NodeId, NodeId)> = pairs.to_vec();
        ps.sort();
        ps.dedup();
        if ps.iter().any(|(a, b)| a == b || a.0 >= size || b.0 >= size) {
            return Err("pairs must join two distinct known nodes".into());
        }
        Self::from_entries(size, ps.into_iter().map(|(a, b)| (a, b, 1.0)).collect())
    }

    fn from_entries(size: usize, mut entries: Vec<(NodeId, NodeId, f64)>) -> Result<Self, String> {
        let total: f64 = entries.iter().map(|e| e.2).sum();
        if !(total > 0.0) {
            return Err("traffic matrix has no positive entry".into());
        }
        for e in entries.iter_mut() {
            e.2 /= total;
        }
        Ok(TrafficMatrix { size, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 == i && e.1 == j)
            .map_or(0.0, |e| e.2)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (NodeId, NodeId) {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for &(i, j, p) in &self.entries {
            acc += p;
            if u < acc {
                return (i, j);
            }
        }
        let last = self.entries.last().expect("non-empty");
        (last.0, last.1)
    }
}

/// Fixed offsets that place a request's window after its arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestTiming {
    pub arrival_rate_hz: f64,
    /// Arrival to start, s.
    pub start_offset_s: f64,
    /// Start to end, s.
    pub window_s: f64,
    pub fidelity_threshold: f64,
}

impl Default for RequestTiming {
    fn default() -> Self {
        RequestTiming {
            arrival_rate_hz: 10.0,
            start_offset_s: 10e-3,
            window_s: 95e-3,
            fidelity_threshold: 0.5,
        }
    }
}

pub fn sample_request<R: Rng + ?Sized>(tm: &TrafficMatrix, rng: &mut R, index: u64, timing: &RequestTiming) -> Request {
    let (initiator, responder) = tm.sample(rng);
    let arrival = SimTime::from_secs(index as f64 / timing.arrival_rate_hz);
    let start = arrival + SimTime::from_secs(timing.start_offset_s);
    Request {
        id: index,
        initiator,
        responder,
        arrival,
        start,
        end: start + SimTime::from_secs(timing.window_s),
        num_eps: 1,
        fidelity_threshold: timing.fidelity_threshold,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub request_id: u64,
    pub initiator: String,
    pub responder: String,
    pub start_s: f64,
    /// Time to serve, s; `None` when unserved.
    pub tts_s: Option<f64>,
    pub fidelity: Option<f64>,
    /// Links on the serving path.
    pub path_hops: usize,
    pub strategy: Strategy,
}

impl MetricsRecord {
    pub fn served(&self) -> bool {
        self.tts_s.is_some()
    }
}

/// `tts = completion − start` when served inside the request window.
pub fn record_metrics(
    request: &Request,
    completion: Option<(SimTime, f64)>,
    path_hops: usize,
    strategy: Strategy,
    topo: &Topology,
) -> MetricsRecord {
    let served = completion.filter(|(t, _)| *t >= request.start && *t <= request.end);
    MetricsRecord {
        request_id: request.id,
        initiator: topo.name(request.initiator).to_string(),
        responder: topo.name(request.responder).to_string(),
        start_s: request.start.as_secs(),
        tts_s: served.map(|(t, _)| (t - request.start).as_secs()),
        fidelity: served.map(|(_, f)| f),
        path_hops,
        strategy,
    }
}

// ---- configuration ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinTopology {
    TwoNode,
    Bottleneck20,
    AsGraph,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub builtin: Option<BuiltinTopology>,
    pub nodes: Option<Vec<String>>,
    pub links: Option<Vec<LinkSpec>>,
    /// Size of the generated AS-like graph.
    pub as_nodes: Option<usize>,
    /// Links each new node brings in the AS-like construction.
    pub as_attach: Option<usize>,
    /// Graph seed of the AS-like graph; defaults to `AS_SEED`.
    pub as_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficGenerator {
    /// Every ordered pair of distinct nodes.
    Uniform,
    /// Every ordered pair whose route has exactly `hops` links.
    HopCount,
}

/// One traffic phase. Exactly one of `matrix`, `pairs`, `sources` +
/// `destinations`, or `generator` describes it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    #[serde(default)]
    pub active_from_s: f64,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub pairs: Option<Vec<[String; 2]>>,
    pub sources: Option<Vec<String>>,
    pub destinations: Option<Vec<String>>,
    pub generator: Option<TrafficGenerator>,
    pub hops: Option<usize>,
    /// Keep only this many generated pairs, picked with the topology seed.
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: TopologySpec,
    pub strategy: Strategy,
    #[serde(default)]
    pub purification: Switch,
    #[serde(default)]
    pub selection_policy: SelectionPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_window")]
    pub summary_window_s: f64,
    #[serde(default)]
    pub request: RequestTiming,
    /// Optional: built-in topologies bring their own traffic.
    #[serde(default)]
    pub traffic: Vec<TrafficSpec>,
    #[serde(default)]
    pub params: SimParams,
}

fn default_duration() -> f64 {
    100.0
}

fn default_window() -> f64 {
    10.0
}

impl ScenarioConfig {
    /// Built-in topology with default parameters.
    pub fn builtin(topology: BuiltinTopology, strategy: Strategy) -> Self {
        ScenarioConfig {
            topology: TopologySpec {
                builtin: Some(topology),
                ..Default::default()
            },
            strategy,
            purification: Switch::Off,
            selection_policy: SelectionPolicy::Freshest,
            seed: 0,
            duration_s: default_duration(),
            summary_window_s: default_window(),
            request: RequestTiming::default(),
            traffic: Vec::new(),
            params: SimParams::default(),
        }
    }
}

/// A validated, ready-to-run scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub topology: Topology,
    /// `(active from, matrix)`, sorted by activation time.
    pub traffic: Vec<(SimTime, TrafficMatrix)>,
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// 1-based line of the first `key = ...` assignment in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(leaf)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

pub fn parse_config(text: &str) -> Result<Scenario, ConfigError> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    Scenario::new(config).map_err(|e| match e {
        ConfigError::Invalid { key, reason } => match key_line(text, &key) {
            Some(line) => ConfigError::Invalid {
                key: key.clone(),
                reason: format!("{reason} (line {line})"),
            },
            None => ConfigError::Invalid { key, reason },
        },
        other => other,
    })
}

pub fn load_config(path: &Path) -> Result<Scenario, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        if config.strategy == Strategy::Odo && config.purification == Switch::On {
            return Err(invalid("purification", "odo does not purify; set purification = \"off\""));
        }
        config
            .params
            .validate()
            .map_err(|(k, r)| invalid(&format!("params.{k}"), r))?;
        if !(config.duration_s > 0.0) {
            return Err(invalid("duration_s", "must be positive"));
        }
        if !(config.summary_window_s > 0.0) {
            return Err(invalid("summary_window_s", "must be positive"));
        }
        let t = &config.request;
        if !(t.arrival_rate_hz > 0.0) {
            return Err(invalid("request.arrival_rate_hz", "must be positive"));
        }
        if !(t.start_offset_s > 0.0 && t.window_s > 0.0) {
            return Err(invalid("request.window_s", "start offset and window must be positive"));
        }
        if !(0.0..1.0).contains(&t.fidelity_threshold) {
            return Err(invalid("request.fidelity_threshold", "must lie in [0, 1)"));
        }
        let topology = build_topology(&config)?;
        let routes = ForwardingTable::build(&topology)?;
        let specs = if config.traffic.is_empty() {
            default_traffic(&config)?
        } else {
            config.traffic.clone()
        };
        let mut traffic = Vec::new();
        for spec in &specs {
            if !(spec.active_from_s >= 0.0) {
                return Err(invalid("traffic.active_from_s", "must be non-negative"));
            }
            traffic.push((SimTime::from_secs(spec.active_from_s), build_traffic(spec, &topology, &routes, topology_seed(&config))?));
        }
        traffic.sort_by_key(|t| t.0);
        if traffic[0].0 > SimTime::ZERO {
            return Err(invalid("traffic.active_from_s", "the first phase must start at 0"));
        }
        Ok(Scenario {
            config,
            topology,
            traffic,
        })
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            strategy: self.config.strategy,
            purification: self.config.purification == Switch::On,
            policy: self.config.selection_policy,
            seed: self.config.seed,
        }
    }

    /// Traffic matrix in force at `t`.
    pub fn traffic_at(&self, t: SimTime) -> &TrafficMatrix {
        &self.traffic.iter().rev().find(|(from, _)| *from <= t).expect("phase at 0").1
    }

    pub fn request_count(&self) -> u64 {
        (self.config.duration_s * self.config.request.arrival_rate_hz - 1e-9).ceil().max(0.0) as u64
    }

    /// The complete request sequence; sampling depends only on the seed.
    pub fn requests(&self) -> Vec<Request> {
        let mut rng = rng_stream(self.config.seed, 0, RngPurpose::Traffic);
        (0..self.request_count())
            .map(|k| {
                let arrival = SimTime::from_secs(k as f64 / self.config.request.arrival_rate_hz);
                sample_request(self.traffic_at(arrival), &mut rng, k, &self.config.request)
            })
            .collect()
    }
}

/// Links per new node in the builtin AS-like graph.
pub const AS_ATTACH: usize = 4;
/// Graph seed of the builtin AS-like graph when `as_seed` is not given.
pub const AS_SEED: u64 = 1;

fn build_topology(config: &ScenarioConfig) -> Result<Topology, ConfigError> {
    let p = &config.params;
    let spec = &config.topology;
    let (names, links) = match (spec.builtin, &spec.nodes, &spec.links) {
        (Some(b), None, None) => match b {
            BuiltinTopology::TwoNode => builtin::two_node(p.link_km),
            BuiltinTopology::Bottleneck20 => builtin::bottleneck20(p.link_km),
            BuiltinTopology::AsGraph => builtin::as_graph(
                spec.as_nodes.unwrap_or(50),
                spec.as_attach.unwrap_or(AS_ATTACH),
                topology_seed(config),
                p.link_km,
            ),
        },
        (None, Some(n), Some(l)) => (n.clone(), l.clone()),
        _ => {
            return Err(invalid(
                "topology",
                "give either `builtin` or both `nodes` and `links`",
            ))
        }
    };
    if spec.as_nodes.is_some_and(|n| n < 5) {
        return Err(invalid("topology.as_nodes", "needs at least 5 nodes"));
    }
    let bsm = BsmDevice {
        detector_efficiency: p.detector_efficiency,
        bsm_success: p.bsm_success,
    };
    let topo = Topology::new(names, &links, p.attenuation_db_per_km, bsm)?;
    if topo.len() < 2 {
        return Err(invalid("topology", "needs at least two nodes"));
    }
    Ok(topo)
}

/// Before the switch the first left leaf talks to the first right leaf;
/// afterwards the second pair takes over.
pub fn bottleneck_groups() -> [(Vec<String>, Vec<String>); 2] {
    let g = |i: usize| (vec![builtin::left_leaf(i)], vec![builtin::right_leaf(i)]);
    [g(0), g(1)]
}

fn default_traffic(config: &ScenarioConfig) -> Result<Vec<TrafficSpec>, ConfigError> {
    match config.topology.builtin {
        Some(BuiltinTopology::TwoNode) => Ok(vec![TrafficSpec {
            generator: Some(TrafficGenerator::Uniform),
            ..Default::default()
        }]),
        Some(BuiltinTopology::Bottleneck20) => {
            let [a, b] = bottleneck_groups();
            Ok(vec![
                TrafficSpec {
                    sources: Some(a.0),
                    destinations: Some(a.1),
                    ..Default::default()
                },
                TrafficSpec {
                    active_from_s: config.duration_s / 2.0,
                    sources: Some(b.0),
                    destinations: Some(b.1),
                    ..Default::default()
                },
            ])
        }
        Some(BuiltinTopology::AsGraph) => Ok(vec![TrafficSpec {
            generator: Some(TrafficGenerator::HopCount),
            hops: Some(4),
            ..Default::default()
        }]),
        None => Err(invalid("traffic", "explicit topologies need a traffic section")),
    }
}

fn topology_seed(config: &ScenarioConfig) -> u64 {
    config.topology.as_seed.unwrap_or(AS_SEED)
}

fn build_traffic(
    spec: &TrafficSpec,
    topo: &Topology,
    routes: &ForwardingTable,
    seed: u64,
) -> Result<TrafficMatrix, ConfigError> {
    let lookup = |n: &String| topo.node(n).ok_or_else(|| invalid("traffic", format!("unknown node {n:?}")));
    let forms = [
        spec.matrix.is_some(),
        spec.pairs.is_some(),
        spec.sources.is_some() || spec.destinations.is_some(),
        spec.generator.is_some(),
    ];
    if forms.iter().filter(|f| **f).count() != 1 {
        return Err(invalid(
            "traffic",
            "each phase needs exactly one of matrix, pairs, sources/destinations, generator",
        ));
    }
    let n = topo.len();
    let result = if let Some(rows) = &spec.matrix {
        TrafficMatrix::from_rows(rows)
            .and_then(|m| if m.size() == n { Ok(m) } else { Err(format!("matrix must be {n}x{n}")) })
    } else if let Some(pairs) = &spec.pairs {
        let ps = pairs
            .iter()
            .map(|[a, b]| Ok((lookup(a)?, lookup(b)?)))
            .collect::<Result<Vec<_>, ConfigError>>()?;
        TrafficMatrix::uniform_pairs(n, &ps)
    } else if let (Some(src), Some(dst)) = (&spec.sources, &spec.destinations) {
        let s = src.iter().map(lookup).collect::<Result<Vec<_>, _>>()?;
        let d = dst.iter().map(lookup).collect::<Result<Vec<_>, _>>()?;
        let ps: Vec<_> = s.iter().flat_map(|a| d.iter().map(move |b| (*a, *b))).collect();
        TrafficMatrix::uniform_pairs(n, &ps)
    } else if spec.sources.is_some() || spec.destinations.is_some() {
        return Err(invalid("traffic", "sources and destinations go together"));
    } else {
        let all = topo.nodes().flat_map(|a| topo.nodes().map(move |b| (a, b))).filter(|(a, b)| a != b);
        let mut ps: Vec<_> = match spec.generator.expect("one form present") {
            TrafficGenerator::Uniform => all.collect(),
            TrafficGenerator::HopCount => {
                let hops = spec.hops.ok_or_else(|| invalid("traffic.hops", "hop_count needs `hops`"))?;
                all.filter(|&(a, b)| routes.path(a, b).len() == hops + 1).collect()
            }
        };
        if let Some(k) = spec.max_pairs {
            if k == 0 {
                return Err(invalid("traffic.max_pairs", "must be positive"));
            }
            let mut rng = rng_stream(seed, 1, RngPurpose::Traffic);
            ps = ps.choose_multiple(&mut rng, k).copied().collect();
        }
        TrafficMatrix::uniform_pairs(n, &ps)
    };
    result.map_err(|r| invalid("traffic", r))
}

// ---- running ----------------------------------------------------------------

pub struct ScenarioResult {
    pub records: Vec<MetricsRecord>,
    pub audit: Audit,
    pub conservation_ok: bool,
    pub live_eps_at_end: usize,
}

pub fn run_scenario(sc: &Scenario) -> ScenarioResult {
    let mut world = World::new(sc.topology.clone(), sc.config.params.clone(), sc.world_config())
        .expect("scenario validated its topology");
    let requests = sc.requests();
    let t_end = requests.iter().map(|r| r.end).max().unwrap_or(SimTime::ZERO);
    for r in requests {
        world.submit(r);
    }
    world.run_until(t_end);
    world.finish();
    let mut outcomes: Vec<RequestOutcome> = world.take_outcomes();
    outcomes.sort_by_key(|o| o.request.id);
    let records = outcomes
        .iter()
        .map(|o| record_metrics(&o.request, o.served, o.path.len() - 1, sc.config.strategy, &sc.topology))
        .collect();
    ScenarioResult {
        records,
        conservation_ok: world.conservation_holds(),
        live_eps_at_end: world.live_eps(),
        audit: world.audit,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub mean_tts_ms: Option<f64>,
    pub mean_fidelity: Option<f64>,
    pub served_fraction: f64,
}

/// Aggregate records into windows by request start time.
pub fn summarize(records: &[MetricsRecord], window_s: f64) -> Vec<SummaryRow> {
    let Some(last) = records.iter().map(|r| r.start_s).reduce(f64::max) else {
        return Vec::new();
    };
    let windows = (last / window_s).floor() as usize + 1;
    (0..windows)
        .filter_map(|k| {
            let (lo, hi) = (k as f64 * window_s, (k + 1) as f64 * window_s);
            let inside: Vec<&MetricsRecord> = records.iter().filter(|r| r.start_s >= lo && r.start_s < hi).collect();
            if inside.is_empty() {
                return None;
            }
            let served: Vec<&&MetricsRecord> = inside.iter().filter(|r| r.served()).collect();
            let mean = |f: &dyn Fn(&MetricsRecord) -> f64| {
                (!served.is_empty()).then(|| served.iter().map(|r| f(r)).sum::<f64>() / served.len() as f64)
            };
            Some(SummaryRow {
                window_start_s: lo,
                window_end_s: hi,
                mean_tts_ms: mean(&|r| r.tts_s.expect("served") * 1e3),
                mean_fidelity: mean(&|r| r.fidelity.expect("served")),
                served_fraction: served.len() as f64 / inside.len() as f64,
            })
        })
        .collect()
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{x:.digits$}"))
}

pub fn write_requests_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "request_id",
        "initiator",
        "responder",
        "start_s",
        "served",
        "tts_ms",
        "fidelity",
        "path_hops",
        "strategy",
    ])?;
    for r in records {
        w.write_record([
            r.request_id.to_string(),
            r.initiator.clone(),
            r.responder.clone(),
            format!("{:.6}", r.start_s),
            u8::from(r.served()).to_string(),
            opt(r.tts_s.map(|t| t * 1e3), 6),
            opt(r.fidelity, 6),
            r.path_hops.to_string(),
            r.strategy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| OutputError::Csv(e.into()))?;
    Ok(())
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["window_start_s", "window_end_s", "mean_tts_ms", "mean_fidelity", "served_fraction"])?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.window_start_s),
            format!("{:.3}", r.window_end_s),
            opt(r.mean_tts_ms, 6),
            opt(r.mean_fidelity, 6),
            format!("{:.4}", r.served_fraction),
        ])?;
    }
    w.flush().map_err(|e| OutputError::Csv(e.into()))?;
    Ok(())
}

/// Write `requests.csv`, `summary.csv` and the resolved `params.toml` into `dir`.
pub fn write_outputs(sc: &Scenario, result: &ScenarioResult, dir: &Path) -> Result<(), OutputError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OutputError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let req = dir.join("requests.csv");
    write_requests_csv(&result.records, fs::File::create(&req).map_err(io(&req))?)?;
    let sum = dir.join("summary.csv");
    let rows = summarize(&result.records, sc.config.summary_window_s);
    write_summary_csv(&rows, fs::File::create(&sum).map_err(io(&sum))?)?;
    let echo = dir.join("params.toml");
    fs::write(&echo, resolved_config(sc)).map_err(io(&echo))?;
    Ok(())
}

/// The effective configuration, defaults filled in.
pub fn resolved_config(sc: &Scenario) -> String {
    toml::to_string(&sc.config).expect("config serialises")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node_topo() -> Topology {
        let (n, l) = builtin::two_node(10.0);
        Topology::new(n, &l, 0.2, BsmDevice { detector_efficiency: 0.95, bsm_success: 0.5 }).unwrap()
    }

    #[test]
    fn two_node_uniform_sampling() {
        let tm = TrafficMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = RequestTiming::default();
        let n = 10_000;
        let forward = (0..n)
            .filter(|&k| sample_request(&tm, &mut rng, k, &t).initiator == NodeId(0))
            .count();
        assert!((forward as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn request_window_offsets() {
        let tm = TrafficMatrix::uniform_pairs(2, &[(NodeId(0), NodeId(1))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_request(&tm, &mut rng, 0, &RequestTiming::default());
        assert_eq!(r.arrival, SimTime::ZERO);
        assert_eq!(r.start, SimTime::from_millis(10.0));
        assert_eq!(r.end, SimTime::from_millis(105.0));
        assert_eq!((r.num_eps, r.fidelity_threshold), (1, 0.5));
        let r = sample_request(&tm, &mut rng, 7, &RequestTiming::default());
        assert_eq!(r.arrival, SimTime::from_millis(700.0));
    }

    #[test]
    fn matrix_validation() {
        assert!(TrafficMatrix::from_rows(&[vec![0.5, 0.5], vec![0.0, 0.0]]).is_err());
        assert!(TrafficMatrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
        assert!(TrafficMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
        let m = TrafficMatrix::from_rows(&[vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap();
        assert!((m.get(NodeId(0), NodeId(1)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bottleneck_traffic_crosses_left_to_right() {
        let sc = Scenario::new(ScenarioConfig::builtin(BuiltinTopology::Bottleneck20, Strategy::Odo)).unwrap();
        assert_eq!(sc.traffic.len(), 2);
        for r in sc.requests() {
            assert!(sc.topology.name(r.initiator).starts_with('l'));
            assert!(sc.topology.name(r.responder).starts_with('r'));
        }
        let first = sc.traffic_at(SimTime::ZERO);
        let second = sc.traffic_at(SimTime::from_secs(60.0));
        assert!(first.pairs().all(|(a, b, _)| second.get(a, b) == 0.0));
    }

    #[test]
    fn as_traffic_is_exactly_four_links() {
        let sc = Scenario::new(ScenarioConfig::builtin(BuiltinTopology::AsGraph, Strategy::Odo)).unwrap();
        let routes = ForwardingTable::build(&sc.topology).unwrap();
        let tm = &sc.traffic[0].1;
        assert!(tm.pairs().count() > 0);
        for (a, b, _) in tm.pairs() {
            assert_eq!(routes.path(a, b).len(), 5);
        }
    }

    #[test]
    fn metrics_tts() {
        let topo = two_node_topo();
        let req = Request {
            id: 3,
            initiator: NodeId(0),
            responder: NodeId(1),
            arrival: SimTime::from_secs(0.9),
            start: SimTime::from_secs(1.0),
            end: SimTime::from_secs(1.5),
            num_eps: 1,
            fidelity_threshold: 0.5,
        };
        let m = record_metrics(&req, Some((SimTime::from_secs(1.2), 0.9)), 1, Strategy::Acp, &topo);
        assert!((m.tts_s.unwrap() - 0.2).abs() < 1e-12);
        let m = record_metrics(&req, Some((req.start, 0.9)), 1, Strategy::Acp, &topo);
        assert_eq!(m.tts_s, Some(0.0));
        let m = record_metrics(&req, None, 1, Strategy::Acp, &topo);
        assert!(!m.served() && m.fidelity.is_none());
        let rows = summarize(&[m], 10.0);
        assert_eq!(rows[0].mean_tts_ms, None);
        assert_eq!(rows[0].served_fraction, 0.0);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let sc = parse_config("strategy = \"acp\"\n[topology]\nbuiltin = \"two_node\"\n").unwrap();
        assert_eq!(sc.config.params, SimParams::default());
        assert_eq!(sc.config.purification, Switch::Off);
        assert_eq!(sc.request_count(), 1000);
    }

    #[test]
    fn odo_with_purification_rejected() {
        let err = parse_config("strategy = \"odo\"\npurification = \"on\"\n[topology]\nbuiltin = \"two_node\"\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("purification") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse_config("strategy = \"acp\"\ncolour = 1\n[topology]\nbuiltin = \"two_node\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("colour") && msg.contains("line 2"), "{msg}");
        let err = parse_config("strategy = \"acp\"\n[topology]\nbuiltin = \"two_node\"\n[params]\ncoherence = 1\n")
            .unwrap_err();
        assert!(err.to_string().contains("coherence"));
    }

    #[test]
    fn overrides_reach_the_echo() {
        let sc = parse_config("strategy = \"acp\"\n[topology]\nbuiltin = \"two_node\"\n[params]\ncoherence_time = 1.0\n")
            .unwrap();
        assert_eq!(sc.config.params.coherence_time, 1.0);
        assert!(resolved_config(&sc).contains("coherence_time = 1.0"));
    }

    #[test]
    fn explicit_topology_and_pairs() {
        let text = r#"
strategy = "odo"
[topology]
nodes = ["a", "b", "c"]
links = [{ a = "a", b = "b", km = 10.0 }, { a = "b", b = "c", km = 10.0 }]
[[traffic]]
pairs = [["a", "c"]]
"#;
        let sc = parse_config(text).unwrap();
        let r = &sc.requests()[0];
        assert_eq!(sc.topology.name(r.initiator), "a");
        let bad = text.replace("[\"a\", \"c\"]", "[\"a\", \"z\"]");
        assert!(parse_config(&bad).is_err());
    }
}
