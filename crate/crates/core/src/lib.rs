//! Dynamic-graph snapshot storage, overlap-aware multi-snapshot GNN kernels
//! with a memory-access cost model, a layer-0 aggregation reuse cache, a
//! partition-size tuner and a discrete-event training pipeline simulator.

pub mod dtdg;
pub mod error;
pub mod matrix;
pub mod overlap;
pub mod sliced;
pub mod kernel;
pub mod reuse;
pub mod sim;
pub mod tuner;
