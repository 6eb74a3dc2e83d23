//! Compile-time remote-memory offloading for computation graphs.
//!
//! The pipeline takes a [`graph::GraphProgram`], finds tensors worth moving
//! to a remote memory pool ([`memory`]), rewrites the graph with explicit
//! Prefetch/Store/Detach operators ([`insertion`]), places those operators
//! in the execution order to hide transfer latency ([`refine`]) and checks
//! the result on a discrete-event model of a device + remote-pool machine
//! ([`sim`]).

pub mod alloc;
pub mod error;
pub mod graph;
pub mod insertion;
pub mod machine;
pub mod memory;
pub mod oracle;
pub mod pipeline;
pub mod refine;
pub mod sim;
pub mod trace;
pub mod workloads;

pub use error::{Error, Result};
