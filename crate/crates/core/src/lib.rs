//! Trace-driven performance prediction for distributed deep-learning training.
//!
//! The crate is organised as a pipeline:
//!
//! * [`trace`] defines the device-API trace schema and its validation rules,
//!   [`format`] its line-delimited text encoding.
//! * [`frontend`] synthesises per-worker traces for 3D-parallel transformer
//!   training, standing in for an interposing device emulator.
//! * [`collator`] deduplicates workers and merges per-worker traces into a
//!   [`collator::JobTrace`] with every collective matched across ranks.
//! * [`estimator`] annotates kernels and collectives with predicted durations.
//! * [`sim`] replays the annotated job on a discrete-event engine.
//! * [`search`] explores training-configuration lattices using [`pipeline`]
//!   as the evaluator.
//!
//! The crate is `no_std` and only needs `alloc`; file IO, thread pools and the
//! command-line driver live in the `dltsim` crate.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cluster;
pub mod collator;
pub mod estimator;
pub mod format;
pub mod frontend;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod sim;
pub mod trace;

mod math;

/// Simulated time and durations, in integer nanoseconds.
pub type Nanos = u64;

/// Global rank of a worker (one worker drives one device).
pub type Rank = u32;
