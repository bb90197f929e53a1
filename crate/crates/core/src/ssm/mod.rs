//! Long-range branch: zero-order-hold discretized, input-selective diagonal
//! state-space layer with sequential and work-efficient parallel scans.

mod discretize;
pub mod scan;
mod selective;

pub use discretize::{discretize, SMALL_Z};
pub use scan::{parallel_scan, parallel_scan_lanes, sequential_scan, sequential_scan_lanes, ScanKind};
pub use selective::{invert_permutation, mamba_branch_forward, selective_scan, SelectiveSsmParams, DELTA_INIT_RANGE};
