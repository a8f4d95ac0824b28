//! Parallel context encoding for a small byte-level transformer: layout of
//! segmented contexts, scheme-aware inference, selective attention over
//! context pieces and the attention statistics used to study them.

pub mod cli;
pub mod engine;
pub mod error;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod selection;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
