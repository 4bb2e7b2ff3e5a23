use rand::Rng;

use crate::autodiff::{softplus, Binding, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::unfold::{inverse_permutation, Direction};

/// Learnable tensors of one Plane SSM block.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlockParams {
    /// `[C, N]`; the state matrix is `A = −exp(a_log)`.
    pub a_log: Tensor,
    /// `[C]` skip gains.
    pub d_skip: Tensor,
    /// `[C, N]`
    pub w_b: Tensor,
    /// `[C, N]`
    pub w_c: Tensor,
    /// `[C, C]`, followed by softplus.
    pub w_delta: Tensor,
    /// `[C]`
    pub b_delta: Tensor,
    /// `[C, C]`
    pub in_proj: Tensor,
    /// `[C, C]`, zero at init so the block starts as the identity.
    pub out_proj: Tensor,
    /// `[C]`
    pub norm_gain: Tensor,
}

const FIELDS: [&str; 9] = [
    "a_log", "d_skip", "w_b", "w_c", "w_delta", "b_delta", "in_proj", "out_proj", "norm_gain",
];

impl SsmBlockParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, rng: &mut R) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        let a_log = (0..channels).flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln())).collect();
        Self {
            a_log: Tensor::from_vec(vec![channels, state], a_log).expect("shape"),
            d_skip: Tensor::full(&[channels], 1.0),
            w_b: Tensor::randn(&[channels, state], s, rng),
            w_c: Tensor::randn(&[channels, state], s, rng),
            w_delta: Tensor::randn(&[channels, channels], s, rng),
            b_delta: Tensor::zeros(&[channels]),
            in_proj: Tensor::randn(&[channels, channels], s, rng),
            out_proj: Tensor::zeros(&[channels, channels]),
            norm_gain: Tensor::full(&[channels], 1.0),
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.a_log,
            &self.d_skip,
            &self.w_b,
            &self.w_c,
            &self.w_delta,
            &self.b_delta,
            &self.in_proj,
            &self.out_proj,
            &self.norm_gain,
        ]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in FIELDS.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone().with_requires_grad(true));
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }
}

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub in_proj: Var,
    pub out_proj: Var,
    pub norm_gain: Var,
}

impl BlockVars {
    pub fn bind(binding: &Binding, prefix: &str) -> Result<Self> {
        let v = |n: &str| binding.var(&format!("{prefix}.{n}"));
        Ok(Self {
            a_log: v("a_log")?,
            d_skip: v("d_skip")?,
            w_b: v("w_b")?,
            w_c: v("w_c")?,
            w_delta: v("w_delta")?,
            b_delta: v("b_delta")?,
            in_proj: v("in_proj")?,
            out_proj: v("out_proj")?,
            norm_gain: v("norm_gain")?,
        })
    }

    /// Records standalone copies of `p` on the tape.
    pub fn record(tape: &mut Tape, p: &SsmBlockParams) -> Self {
        Self {
            a_log: tape.leaf(&p.a_log),
            d_skip: tape.leaf(&p.d_skip),
            w_b: tape.leaf(&p.w_b),
            w_c: tape.leaf(&p.w_c),
            w_delta: tape.leaf(&p.w_delta),
            b_delta: tape.leaf(&p.b_delta),
            in_proj: tape.leaf(&p.in_proj),
            out_proj: tape.leaf(&p.out_proj),
            norm_gain: tape.leaf(&p.norm_gain),
        }
    }
}

/// Input-dependent scan operands for an `[L, C]` sequence:
/// `B = x·w_B`, `C = x·w_C`, `Δ = softplus(x·w_Δ + b_Δ)`.
pub fn selective_params_on(tape: &mut Tape, x: Var, p: &BlockVars) -> Result<(Var, Var, Var)> {
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    let dl = tape.matmul(x, p.w_delta)?;
    let dl = tape.add_bias(dl, p.b_delta)?;
    let delta = tape.softplus(dl)?;
    Ok((b, c, delta))
}

/// Value-level [`selective_params_on`].
pub fn selective_params(x: &Tensor, p: &SsmBlockParams) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = BlockVars::record(&mut tape, p);
    let (b, c, d) = selective_params_on(&mut tape, xv, &vars)?;
    Ok((tape.value(b).clone(), tape.value(c).clone(), tape.value(d).clone()))
}

/// Selective scan of one `[L, C]` sequence with the block's parameters.
pub fn ssm_scan_on(tape: &mut Tape, x: Var, p: &BlockVars) -> Result<Var> {
    let (b, c, delta) = selective_params_on(tape, x, p)?;
    let e = tape.exp(p.a_log)?;
    let a = tape.scale(e, -1.0)?;
    tape.selective_scan(x, delta, a, b, c, p.d_skip)
}

/// Value-level scan of one sequence. The selective projections are computed
/// row by row inside the recurrence, so nothing of length `L` is
/// materialized besides the output.
pub fn ssm_scan(x: &Tensor, p: &SsmBlockParams) -> Result<Tensor> {
    let (len, ch) = match x.shape() {
        [l, c] if *l > 0 => (*l, *c),
        s => return Err(Error::contract(format!("ssm_scan expects a non-empty [L, C] sequence, got {s:?}"))),
    };
    if ch != p.channels() {
        return Err(Error::contract(format!("ssm_scan: {ch} channels for a {}-channel block", p.channels())));
    }
    let n = p.state();
    let a: Vec<f64> = p.a_log.data().iter().map(|v| -v.exp()).collect();
    let (wb, wc, wd) = (p.w_b.data(), p.w_c.data(), p.w_delta.data());
    let mut h = vec![0.0; ch * n];
    let (mut b, mut c, mut delta) = (vec![0.0; n], vec![0.0; n], vec![0.0; ch]);
    let mut y = vec![0.0; len * ch];
    for (xr, yr) in x.data().chunks_exact(ch).zip(y.chunks_exact_mut(ch)) {
        b.fill(0.0);
        c.fill(0.0);
        delta.copy_from_slice(p.b_delta.data());
        for (q, &xv) in xr.iter().enumerate() {
            for s in 0..n {
                b[s] += xv * wb[q * n + s];
                c[s] += xv * wc[q * n + s];
            }
            for j in 0..ch {
                delta[j] += xv * wd[q * ch + j];
            }
        }
        for j in 0..ch {
            let dt = softplus(delta[j]);
            if dt <= 0.0 {
                return Err(Error::contract("selective_scan requires strictly positive delta"));
            }
            let dx = dt * xr[j];
            let hs = &mut h[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                hs[s] = (dt * a[j * n + s]).exp() * hs[s] + dx * b[s];
                acc += c[s] * hs[s];
            }
            yr[j] = acc + p.d_skip.data()[j] * xr[j];
        }
    }
    Tensor::from_vec(vec![len, ch], y)
}

/// One Plane SSM block on a plane flattened row-major to `[rows·cols, C]`:
///
/// `u = in_proj(norm(P + t_emb))`, scanned along the four traversal orders
/// with shared parameters, folded back and summed, projected by `out_proj`
/// and added to `P`.
pub fn plane_ssm_block_on(
    tape: &mut Tape,
    plane: Var,
    rows: usize,
    cols: usize,
    t_emb: Var,
    p: &BlockVars,
    norm_eps: f64,
) -> Result<Var> {
    let shape = tape.shape(plane).to_vec();
    if shape.len() != 2 || shape[0] != rows * cols {
        return Err(Error::Shape {
            op: "plane_ssm_block",
            lhs: shape,
            rhs: vec![rows, cols],
        });
    }
    let x = tape.add_bias(plane, t_emb)?;
    let xn = tape.layer_norm(x, p.norm_gain, norm_eps)?;
    let u = tape.matmul(xn, p.in_proj)?;
    let (b, c, delta) = selective_params_on(tape, u, p)?;
    let e = tape.exp(p.a_log)?;
    let a = tape.scale(e, -1.0)?;

    let mut merged: Option<Var> = None;
    for dir in Direction::ALL {
        let perm = dir.permutation(rows, cols);
        let inv = inverse_permutation(&perm);
        let ud = tape.permute_rows(u, &perm)?;
        let bd = tape.permute_rows(b, &perm)?;
        let cd = tape.permute_rows(c, &perm)?;
        let dd = tape.permute_rows(delta, &perm)?;
        let yd = tape.selective_scan(ud, dd, a, bd, cd, p.d_skip)?;
        let folded = tape.permute_rows(yd, &inv)?;
        merged = Some(match merged {
            None => folded,
            Some(m) => tape.add(m, folded)?,
        });
    }
    let merged = merged.expect("four directions");
    let out = tape.matmul(merged, p.out_proj)?;
    tape.add(plane, out)
}
