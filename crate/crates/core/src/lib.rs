//! Market clearing for islanded radial distribution feeders.

pub mod doe;
pub mod grid;
pub mod market;
pub mod prosumer;
pub mod qp;
pub mod scenario;
mod serde_matrix;
