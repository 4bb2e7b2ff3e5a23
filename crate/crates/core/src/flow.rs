//! Straight-path flow primitives: interpolation, target velocity, the
//! regression loss and the Euler sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::VoxelFeatureGrid;

/// Distribution of the training time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    Fixed(f64),
}

/// Which features the occupancy head is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOn {
    /// The masked input itself; no gradient reaches the velocity net.
    MaskedInput,
    /// `V0 + v(V0, 0)`, a single Euler step.
    OneStep,
    /// The full `n_euler_steps` integration, differentiated end to end.
    FullIntegration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub n_euler_steps: usize,
    pub t_sampling: TimeSampling,
    pub flow_weight: f64,
    pub ce_weight: f64,
    pub head_on: HeadOn,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_euler_steps: 4,
            t_sampling: TimeSampling::Uniform,
            flow_weight: 1.0,
            ce_weight: 1.0,
            head_on: HeadOn::OneStep,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_euler_steps == 0 {
            return Err(Error::Config("flow.n_euler_steps must be at least 1".into()));
        }
        if !(self.flow_weight >= 0.0 && self.ce_weight >= 0.0) {
            return Err(Error::Config("flow loss weights must be non-negative".into()));
        }
        if let TimeSampling::Fixed(t) = self.t_sampling {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("flow.t_sampling fixed time {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, a: &VoxelFeatureGrid, b: &VoxelFeatureGrid) -> Result<()> {
    if a.shape4() != b.shape4() {
        return Err(Error::Shape {
            op,
            lhs: a.shape4().to_vec(),
            rhs: b.shape4().to_vec(),
        });
    }
    Ok(())
}

fn zip_grid(a: &VoxelFeatureGrid, b: &VoxelFeatureGrid, f: impl Fn(f64, f64) -> f64) -> VoxelFeatureGrid {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    VoxelFeatureGrid::from_vec(a.dims(), a.channels(), data).expect("shape checked")
}

/// `V_t = t·V1 + (1 − t)·V0`.
pub fn otp_interpolate(v0: &VoxelFeatureGrid, v1: &VoxelFeatureGrid, t: f64) -> Result<VoxelFeatureGrid> {
    check_pair("otp_interpolate", v0, v1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    Ok(zip_grid(v0, v1, |a, b| t * b + (1.0 - t) * a))
}

pub fn target_velocity(v0: &VoxelFeatureGrid, v1: &VoxelFeatureGrid) -> Result<VoxelFeatureGrid> {
    check_pair("target_velocity", v0, v1)?;
    Ok(zip_grid(v0, v1, |a, b| b - a))
}

/// Mean squared error between a predicted velocity and `V1 − V0`.
pub fn flow_loss(pred: &VoxelFeatureGrid, v0: &VoxelFeatureGrid, v1: &VoxelFeatureGrid) -> Result<f64> {
    check_pair("flow_loss", pred, v0)?;
    check_pair("flow_loss", v0, v1)?;
    let n = pred.data().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(v0.data().iter().zip(v1.data()))
        .map(|(p, (a, b))| {
            let d = p - (b - a);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// `V ← V + (1/n)·v(V, i/n)` for `i = 0..n`.
pub fn euler_integrate<F>(v0: &VoxelFeatureGrid, n_steps: usize, mut velocity: F) -> Result<VoxelFeatureGrid>
where
    F: FnMut(&VoxelFeatureGrid, f64) -> Result<VoxelFeatureGrid>,
{
    if n_steps == 0 {
        return Err(Error::contract("euler integration needs at least one step"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut v = v0.clone();
    for i in 0..n_steps {
        let t = i as f64 / n_steps as f64;
        let vel = velocity(&v, t)?;
        check_pair("euler_integrate", &v, &vel)?;
        for (x, d) in v.data_mut().iter_mut().zip(vel.data()) {
            *x += dt * d;
        }
    }
    Ok(v)
}
