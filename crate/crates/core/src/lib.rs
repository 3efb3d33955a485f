// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale arithmetic transformer with a causal-analysis toolkit:
//! activation patching, faithfulness under mean ablation, linear probes,
//! neuron-level heuristic classification, knockouts, and training timelines.

pub mod data;
pub mod error;
pub mod heuristics;
pub mod interp;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod trainer;
pub mod vocab;

pub use error::{ForgeError, Result};
