//! Criterion benchmarks of the forward pass; see `benches/forward.rs`.
