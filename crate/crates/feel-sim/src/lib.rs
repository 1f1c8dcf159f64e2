//! Deterministic simulator of federated edge learning over a wireless
//! uplink.
//!
//! Devices train locally and ship compressed model differences to a
//! base station each round. A globally shared sparsification mask lets
//! the scheduled devices aggregate their most important coordinates
//! analog over-the-air, while per-device local masks travel digitally
//! over orthogonal sub-channels under a joint slot and average-power
//! budget. Digital-only baselines (same sparsification over digital
//! links, and plain per-device top-k) run on the same machinery for
//! resource-accounting comparisons.
//!
//! Everything is driven by one master seed through context-keyed
//! streams: identical configurations produce bit-identical runs, with
//! or without the `parallel` feature.

// `!(x > 0.0)` guards reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod channel;
pub mod compression;
pub mod config;
pub mod error;
pub mod learning;
pub mod math;
pub mod par;
pub mod report;
pub mod runner;
pub mod verify;

pub use error::{Result, SimError};
