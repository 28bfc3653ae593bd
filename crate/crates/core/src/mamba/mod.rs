//! Traj-Mamba encoder: selective scan, blocks and the stacked model.

pub mod block;
pub mod model;
pub mod scan;

pub use block::{BlockDims, SsmParams, TrajMambaBlock};
pub use model::{TrajMamba, TrajMambaConfig};
pub use scan::{discretize, traj_ssm, traj_ssm_blocked, traj_ssm_reference, ScanMode, SsmInputs};
