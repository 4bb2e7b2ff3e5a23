use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum over parameter tensors of the norm-wise relative
/// error `‖analytic − numeric‖₂ / max(1e-8, ‖numeric‖₂)` on the sampled
/// coordinates. A per-coordinate ratio is dominated by difference roundoff
/// (about `ε·|f|/h`) on entries whose gradient is near zero.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let params: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();

    let first = evaluate(&f, &params)?;
    let second = evaluate(&f, &params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::contract(format!(
            "grad_check target is non-deterministic: {first} vs {second}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.get(vars[pi]);
        let (mut diff2, mut num2) = (0.0, 0.0);
        for i in coords {
            let a = analytic.map_or(0.0, |g| g[i]);
            let mut perturbed = params.clone();
            perturbed[pi].data_mut()[i] += opts.h;
            let fp = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[i] -= 2.0 * opts.h;
            let fm = evaluate(&f, &perturbed)?;
            let numeric = (fp - fm) / (2.0 * opts.h);
            diff2 += (a - numeric) * (a - numeric);
            num2 += numeric * numeric;
        }
        worst = worst.max(diff2.sqrt() / num2.sqrt().max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let err = grad_check(
            |tape, v| {
                // xᵀ Q x as (x Q) ⊙ x summed.
                let xq = tape.matmul(v[0], v[1])?;
                let prod = tape.mul(xq, v[0])?;
                tape.sum(prod)
            },
            &[x, q],
            // Central differences are exact on a quadratic, so a wide step
            // only trims cancellation error.
            GradCheckOptions {
                h: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_non_determinism() {
        let counter = std::cell::Cell::new(0.0);
        let x = Tensor::full(&[2], 1.0);
        let res = grad_check(
            |tape, v| {
                counter.set(counter.get() + 1.0);
                let s = tape.sum(v[0])?;
                tape.offset(s, counter.get())
            },
            &[x],
            GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn detects_a_missing_gradient_term() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                // x₀² enters the value but not the graph.
                let hidden = tape.value(v[0]).data()[0].powi(2);
                let s = tape.sum(v[0])?;
                tape.offset(s, hidden)
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn three_layer_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let w1 = Tensor::randn(&[5, 7], 0.5, &mut rng);
        let b1 = Tensor::randn(&[7], 0.5, &mut rng);
        let w2 = Tensor::randn(&[7, 4], 0.5, &mut rng);
        let w3 = Tensor::randn(&[4, 3], 0.5, &mut rng);
        let targets = [0usize, 2, 1, 1, 0, 2];
        let err = grad_check(
            |tape, v| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.add_bias(h, v[2])?;
                let h = tape.sigmoid(h)?;
                let h = tape.matmul(h, v[3])?;
                let h = tape.softplus(h)?;
                let h = tape.matmul(h, v[4])?;
                tape.softmax_cross_entropy(h, &targets)
            },
            &[x, w1, b1, w2, w3],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
