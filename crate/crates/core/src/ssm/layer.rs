use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::block::{plane_ssm_block_on, BlockVars, SsmBlockParams};
use crate::tpv::TpvTriplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    /// Diagonal state size per channel.
    pub state_size: usize,
    /// Plane SSM blocks per branch.
    pub depth: usize,
    /// Use one parameter set for all three plane branches.
    pub share_branches: bool,
    pub norm_eps: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        Self {
            state_size: 8,
            depth: 2,
            share_branches: false,
            norm_eps: 1e-5,
        }
    }
}

/// Sinusoidal features of a flow time `t ∈ [0, 1]`, each in `[−1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let half = self.dim.div_ceil(2).max(1);
        (0..self.dim)
            .map(|i| {
                let k = i / 2;
                // Angular frequencies from 1 to 1000 rad per unit time.
                let freq = (1000f64.ln() * k as f64 / half as f64).exp();
                if i % 2 == 0 {
                    (t * freq).sin()
                } else {
                    (t * freq).cos()
                }
            })
            .collect()
    }
}

pub const BRANCHES: [&str; 3] = ["xy", "yz", "zx"];

/// Three parallel stacks of Plane SSM blocks, one per TPV plane, conditioned
/// on the flow time. Parameters live in a [`ParamStore`] under
/// `tpv_ssm.<branch>.…`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpvSsmLayer {
    pub channels: usize,
    pub config: SsmConfig,
}

impl TpvSsmLayer {
    pub fn new(channels: usize, config: SsmConfig) -> Result<Self> {
        if channels == 0 || config.state_size == 0 {
            return Err(Error::contract("channels and state size must be positive"));
        }
        Ok(Self { channels, config })
    }

    fn branch_prefix(&self, branch: usize) -> String {
        if self.config.share_branches {
            "tpv_ssm.shared".to_string()
        } else {
            format!("tpv_ssm.{}", BRANCHES[branch])
        }
    }

    fn prefixes(&self) -> Vec<String> {
        let n = if self.config.share_branches { 1 } else { 3 };
        (0..n).map(|b| self.branch_prefix(b)).collect()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let c = self.channels;
        let mut store = ParamStore::new();
        for prefix in self.prefixes() {
            store.insert(
                format!("{prefix}.time_w"),
                Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), rng).with_requires_grad(true),
            );
            store.insert(format!("{prefix}.time_b"), Tensor::zeros(&[c]).with_requires_grad(true));
            for d in 0..self.config.depth {
                SsmBlockParams::init(c, self.config.state_size, rng).register(&mut store, &format!("{prefix}.block{d}"));
            }
        }
        store
    }

    /// Maps a TPV triplet at time `t` to its velocity triplet.
    pub fn forward_on(&self, tape: &mut Tape, binding: &Binding, planes: [Var; 3], t: f64) -> Result<[Var; 3]> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
        }
        let c = self.channels;
        let sinus = tape.constant(Tensor::from_vec(vec![1, c], TimeEmbedding { dim: c }.embed(t))?);
        let mut out = planes;
        for (b, plane) in planes.into_iter().enumerate() {
            let shape = tape.shape(plane).to_vec();
            let (rows, cols) = match shape[..] {
                [r, co, ch] if ch == c => (r, co),
                _ => {
                    return Err(Error::Shape {
                        op: "tpv_ssm_layer",
                        lhs: shape,
                        rhs: vec![c],
                    })
                }
            };
            let prefix = self.branch_prefix(b);
            let tw = binding.var(&format!("{prefix}.time_w"))?;
            let tb = binding.var(&format!("{prefix}.time_b"))?;
            let temb = tape.matmul(sinus, tw)?;
            let temb = tape.add_bias(temb, tb)?;

            let mut x = tape.reshape(plane, &[rows * cols, c])?;
            for d in 0..self.config.depth {
                let vars = BlockVars::bind(binding, &format!("{prefix}.block{d}"))?;
                x = plane_ssm_block_on(tape, x, rows, cols, temb, &vars, self.config.norm_eps)?;
            }
            out[b] = tape.reshape(x, &[rows, cols, c])?;
        }
        Ok(out)
    }

    /// Value-level forward pass.
    pub fn forward(&self, params: &ParamStore, planes: &TpvTriplet, t: f64) -> Result<TpvTriplet> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let vars = [
            tape.constant(planes.xy.clone()),
            tape.constant(planes.yz.clone()),
            tape.constant(planes.zx.clone()),
        ];
        let [xy, yz, zx] = self.forward_on(&mut tape, &binding, vars, t)?;
        TpvTriplet::new(tape.value(xy).clone(), tape.value(yz).clone(), tape.value(zx).clone())
    }
}
