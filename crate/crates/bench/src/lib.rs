//! Criterion benchmarks for the simulator and cost model; see `benches/`.
