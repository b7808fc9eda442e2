//! Criterion benchmarks for the training kernels; see `benches/kernels.rs`.
