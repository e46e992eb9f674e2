//! Criterion benchmarks for rotnav kernels live under `benches/`.
