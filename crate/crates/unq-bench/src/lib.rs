//! Criterion benchmarks for the quantization library. See `benches/`.
