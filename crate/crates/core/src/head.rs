//! Per-voxel MLP classifier producing occupancy logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Binding, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{SemanticLabelGrid, VoxelFeatureGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Two affine layers with a ReLU between, `C → hidden → num_classes`.
/// Parameters are stored as `head.w1`, `head.b1`, `head.w2`, `head.b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccHead {
    pub channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl OccHead {
    pub fn new(channels: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            channels,
            hidden,
            num_classes,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        let (c, h, k) = (self.channels, self.hidden, self.num_classes);
        s.insert("head.w1", Tensor::randn(&[c, h], (2.0 / c as f64).sqrt(), rng).with_requires_grad(true));
        s.insert("head.b1", Tensor::zeros(&[h]).with_requires_grad(true));
        s.insert("head.w2", Tensor::randn(&[h, k], (1.0 / h as f64).sqrt(), rng).with_requires_grad(true));
        s.insert("head.b2", Tensor::zeros(&[k]).with_requires_grad(true));
        s
    }

    /// Logits `[X·Y·Z, num_classes]` for an `[X, Y, Z, C]` grid node.
    pub fn forward_on(&self, tape: &mut Tape, binding: &Binding, grid: Var) -> Result<Var> {
        let shape = tape.shape(grid).to_vec();
        let n = match shape[..] {
            [x, y, z, c] if c == self.channels => x * y * z,
            _ => {
                return Err(Error::contract(format!(
                    "head expects {} channels, got grid {shape:?}",
                    self.channels
                )))
            }
        };
        let flat = tape.reshape(grid, &[n, self.channels])?;
        let h = tape.matmul(flat, binding.var("head.w1")?)?;
        let h = tape.add_bias(h, binding.var("head.b1")?)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, binding.var("head.w2")?)?;
        tape.add_bias(o, binding.var("head.b2")?)
    }

    /// Logits `[X, Y, Z, num_classes]`.
    pub fn logits(&self, params: &ParamStore, grid: &VoxelFeatureGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let g = tape.constant(grid.to_tensor());
        let out = self.forward_on(&mut tape, &binding, g)?;
        let [x, y, z] = grid.dims();
        tape.value(out).clone().reshape(&[x, y, z, self.num_classes])
    }

    pub fn probabilities(&self, params: &ParamStore, grid: &VoxelFeatureGrid) -> Result<Tensor> {
        let logits = self.logits(params, grid)?;
        let shape = logits.shape().to_vec();
        Tensor::from_vec(shape, softmax_rows(logits.data(), self.num_classes))
    }

    pub fn predict(&self, params: &ParamStore, grid: &VoxelFeatureGrid) -> Result<SemanticLabelGrid> {
        let logits = self.logits(params, grid)?;
        let labels = argmax_rows(logits.data(), self.num_classes);
        SemanticLabelGrid::from_vec(grid.dims(), self.num_classes, labels)
    }
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows(data: &[f64], k: usize) -> Vec<u16> {
    data.chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(seed: u64) -> VoxelFeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelFeatureGrid::from_tensor(&Tensor::randn(&[3, 3, 2, 4], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let head = OccHead::new(4, 5, 6);
        let mut params = head.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = head.probabilities(&params, &grid(1)).unwrap();
        assert!(p.data().iter().all(|v| (*v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let head = OccHead::new(4, 5, 6);
        let params = head.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let p = head.probabilities(&params, &grid(3)).unwrap();
        for row in p.data().chunks_exact(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let pred = head.predict(&params, &grid(3)).unwrap();
        assert!(pred.labels().iter().all(|l| *l < 6));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let head = OccHead::new(3, 5, 6);
        let params = head.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        assert!(head.logits(&params, &grid(1)).is_err());
    }

    #[test]
    fn head_passes_grad_check() {
        let head = OccHead::new(4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = head.init_params(&mut rng);
        let mut params_b = params.clone();
        for (_, t) in params_b.iter_mut() {
            let r = Tensor::randn(t.shape(), 0.5, &mut rng);
            t.data_mut().copy_from_slice(r.data());
        }
        let names: Vec<String> = params_b.iter().map(|(n, _)| n.to_string()).collect();
        let mut inputs = vec![grid(5).to_tensor()];
        inputs.extend(params_b.iter().map(|(_, t)| t.clone()));
        let targets: Vec<usize> = (0..18).map(|i| i % 3).collect();
        let err = grad_check(
            |tape, v| {
                let vars = names.iter().cloned().zip(v[1..].iter().copied()).collect();
                let binding = Binding::from_vars(vars);
                let logits = head.forward_on(tape, &binding, v[0])?;
                tape.softmax_cross_entropy(logits, &targets)
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
