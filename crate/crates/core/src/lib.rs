//! SlideMamba: a dual-branch model over whole-slide tile graphs.
//!
//! A GIN message-passing branch captures local structure, a selective
//! state-space branch scans the tiles as a sequence for slide-wide context,
//! and every block fuses the two with a weight derived from each branch's
//! normalized softmax entropy. The crate also ships the graph builder, a
//! planted-signal synthetic dataset generator, baselines and a
//! cross-validated training harness.

pub mod diffcore;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod model;
pub mod ssm;
pub mod synth;

pub use error::{Error, Result};
