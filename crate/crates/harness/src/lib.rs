//! Sequence loading, synthetic sequences, evaluation, oracle self-checks
//! and the `sdt` command line.

pub mod dataset;
pub mod dump;
pub mod error;
pub mod eval;
pub mod run;
pub mod selftest;
pub mod synth;
