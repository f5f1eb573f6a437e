//! Dynamic task vector grouping for multi-task soft prompt transfer.
//!
//! Stage 1 tunes a soft prompt per task on a frozen toy model and keeps the
//! displacement from the shared initialization (the task prompt vector).
//! Stage 2 trains a target task while, at every step, regrouping the source
//! vectors by target similarity and knowledge consistency and merging the
//! rescaled selection into the prompt.

pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grouping;
pub mod merging;
pub mod numkit;
pub mod store_io;
pub mod testbed;
pub mod tpv;
pub mod transfer;

pub use error::{Error, Result};
