//! Criterion benchmarks for `nfm-core`; see `benches/`.
