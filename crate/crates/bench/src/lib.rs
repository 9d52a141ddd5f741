//! Benchmarks live in `benches/`; run them with `cargo bench -p persalign-bench`.
