//! Epoch-ramped voxel dropout applied to input features during training.
//!
//! The ramp value is the *drop* probability: it starts at zero and grows
//! linearly to `beta / 100` at the last epoch, and each voxel is kept with
//! probability `1 − p_drop`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::VoxelFeatureGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSchedule {
    pub enabled: bool,
    /// Cap of the drop rate, in percent.
    pub beta: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            beta: 25.0,
        }
    }
}

impl MaskSchedule {
    pub fn p_drop(&self, epoch: f64, total_epochs: usize) -> Result<f64> {
        if !self.enabled {
            mask_schedule(epoch, total_epochs, 0.0)
        } else {
            mask_schedule(epoch, total_epochs, self.beta)
        }
    }
}

/// `p_drop = (beta / 100) · (epoch / total_epochs)`. `epoch` may be
/// fractional so the ramp can advance within a pass.
pub fn mask_schedule(epoch: f64, total_epochs: usize, beta: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::contract("total epochs must be at least 1"));
    }
    if !(0.0..=total_epochs as f64).contains(&epoch) {
        return Err(Error::contract(format!("epoch {epoch} exceeds total {total_epochs}")));
    }
    if !(0.0..=100.0).contains(&beta) {
        return Err(Error::contract(format!("beta {beta} outside [0, 100]")));
    }
    Ok(beta / 100.0 * (epoch / total_epochs as f64))
}

/// Per-voxel keep indicators: `true` with probability `1 − p_drop`.
pub fn keep_mask(num_voxels: usize, p_drop: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::contract(format!("p_drop {p_drop} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_voxels).map(|_| rng.random::<f64>() >= p_drop).collect())
}

/// Zeroes whole voxels (all channels) of `input` independently with
/// probability `p_drop`.
pub fn apply_mask(input: &VoxelFeatureGrid, p_drop: f64, seed: u64) -> Result<VoxelFeatureGrid> {
    let keep = keep_mask(input.num_voxels(), p_drop, seed)?;
    let mut out = input.clone();
    for (i, k) in keep.into_iter().enumerate() {
        if !k {
            out.voxel_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}
