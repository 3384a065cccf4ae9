//! Criterion benchmarks for the estimation and interval pipeline; see `benches/`.
