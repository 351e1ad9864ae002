//! Selective state-space sequence layers.

pub mod block;
pub mod scan;

pub use block::{MambaBlockParams, MambaConfig, ResMambaBlock, ResMambaWeights};
pub use scan::{
    discretize, selective_scan_backward, selective_scan_fast, selective_scan_fast_cached, selective_scan_ref,
    Discretization, ScanCache, ScanGrads, ScanInputs, ScanShape, SCAN_CHUNK,
};
