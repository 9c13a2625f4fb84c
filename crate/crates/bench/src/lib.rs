//! Criterion benchmarks for `acp-core`; see `benches/`.
