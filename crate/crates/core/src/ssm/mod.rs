//! Selective state-space scans over TPV planes.

mod block;
mod layer;
pub mod scan;
mod unfold;

pub use block::{plane_ssm_block_on, selective_params, selective_params_on, ssm_scan, ssm_scan_on, BlockVars, SsmBlockParams};
pub use layer::{SsmConfig, TimeEmbedding, TpvSsmLayer, BRANCHES};
pub use scan::discretize;
pub use unfold::{fold_plane, inverse_permutation, unfold_plane, Direction, DirectionalSequences};
