//! Dynamic ensemble orchestration.
//!
//! A manager coordinates a pool of workers that run pluggable generator and
//! simulator functions. Generators produce candidate inputs, simulators
//! evaluate them, and an allocator decides which worker gets which piece of
//! work. Around that core sit:
//!
//! * [`history`]: the tabular record of every generated and evaluated point.
//! * [`resources`]: platform/node detection, resource sets and the CPU/GPU
//!   slot scheduler.
//! * [`executor`]: portable MPI launch lines and external task lifecycle.
//! * [`runtime`]: the manager loop, worker loop and persistent-generator
//!   protocol.
//! * [`surrogate`]: exact Gaussian-process regression.
//! * [`gp_generator`]: the online active-learning generator built on it.
//! * [`app`]: configuration, bundled user functions and the CLI.

pub mod app;
pub mod executor;
pub mod gp_generator;
pub mod history;
pub mod resources;
pub mod runtime;
pub mod surrogate;

pub use history::{EnsembleRecord, History, HistoryError, NewPoint};
pub use runtime::{run_ensemble, CompletionFlag, EnsembleError};
