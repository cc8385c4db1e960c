//! Decentralized consensus optimization with a primal-dual quasi-Newton
//! method, first- and second-order baselines, and a locality-enforcing
//! synchronous network simulator.
//!
//! The crate is `no_std` with `alloc`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod algorithms;
pub mod diagnostics;
pub mod linalg;
pub mod network;
pub mod problems;
pub mod quasi_newton;
pub mod rate;
pub mod simulator;
