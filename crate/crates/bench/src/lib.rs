//! Benchmarks for the training and decoding hot paths; see `benches/`.
