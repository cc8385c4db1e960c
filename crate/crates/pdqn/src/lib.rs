//! Experiment runner for the `pdqn-core` consensus optimizers.
//!
//! Adds what the core leaves out: a thread-pool [`exec::Parallel`]
//! executor, JSON experiment configs, versioned CSV traces with a parser,
//! dependency-free SVG charts and the command implementations behind the
//! `pdqn` binary.

pub mod config;
pub mod exec;
pub mod experiments;
pub mod io;
pub mod svg;

pub use pdqn_core as core;
