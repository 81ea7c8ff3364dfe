//! Criterion benchmarks for `nesyarith` live in `benches/`; run them with
//! `cargo bench -p nesyarith-bench`.
