//! Criterion benchmarks for the telemetry pipeline live in `benches/`.
