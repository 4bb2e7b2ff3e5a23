//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! record is already in topological order and the backward pass is a single
//! reverse sweep.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::ssm::scan::{self, ScanDims};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise maps with recorded derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Softplus,
    Exp,
    Relu,
    Square,
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Which axis a voxel grid `[X, Y, Z, C]` is averaged over to form a plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneAxis {
    /// `[X, Y, C]`, mean over z.
    Xy,
    /// `[Y, Z, C]`, mean over x.
    Yz,
    /// `[Z, X, C]`, mean over y.
    Zx,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    PermuteRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    PlaneMean(Var, PlaneAxis),
    TpvAggregate([Var; 3]),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SelectiveScan {
        inputs: [Var; 6],
        dims: ScanDims,
        states: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through differentiable paths.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient for `v` into `tensor`'s grad buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn make(&self, name: &'static str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(shape.to_vec(), data).map_err(|_| Error::Shape {
            op: name,
            lhs: shape.to_vec(),
            rhs: vec![],
        })
    }

    /// Records a leaf holding a copy of `t`; it is differentiated when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let value = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let value = self.make(name, self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let value = self.make("scale", self.shape(a), data)?;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, s), rg)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let value = self.make("offset", self.shape(a), data)?;
        let rg = self.rg(a);
        self.push("offset", value, Op::Offset(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let data = self.data(a).iter().map(|x| f.eval(*x)).collect();
        let value = self.make("unary", self.shape(a), data)?;
        let rg = self.rg(a);
        self.push("unary", value, Op::Unary(a, f), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let value = self.make("matmul", &[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        if self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = self.make("add_bias", &[m, n], out)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", value, Op::AddBias(x, bias), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Row `i` of the output is row `perm[i]` of `x` (an `[L, C]` matrix).
    /// `perm` must be a permutation of `0..L`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (l, c) = self.dims2("permute_rows", x)?;
        if perm.len() != l {
            return Err(Error::Shape {
                op: "permute_rows",
                lhs: vec![l, c],
                rhs: vec![perm.len()],
            });
        }
        let out = gather_rows_kernel(self.data(x), perm, c);
        let value = self.make("permute_rows", &[l, c], out)?;
        let rg = self.rg(x);
        self.push("permute_rows", value, Op::PermuteRows(x, perm.to_vec()), rg)
    }

    /// Embedding lookup: row `i` of the output is `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2("gather_rows", table)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather index {bad} out of range for {rows} rows")));
        }
        let out = gather_rows_kernel(self.data(table), idx, c);
        let value = self.make("gather_rows", &[idx.len(), c], out)?;
        let rg = self.rg(table);
        self.push("gather_rows", value, Op::GatherRows(table, idx.to_vec()), rg)
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [a, b, c, d] => Ok([a, b, c, d]),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Averages an `[X, Y, Z, C]` grid over one spatial axis.
    pub fn plane_mean(&mut self, v: Var, axis: PlaneAxis) -> Result<Var> {
        let dims = self.dims4("plane_mean", v)?;
        let (shape, out) = plane_mean_kernel(self.data(v), dims, axis);
        let value = self.make("plane_mean", &shape, out)?;
        let rg = self.rg(v);
        self.push("plane_mean", value, Op::PlaneMean(v, axis), rg)
    }

    /// `V[x,y,z] = xy[x,y] + yz[y,z] + zx[z,x]` per channel.
    pub fn tpv_aggregate(&mut self, xy: Var, yz: Var, zx: Var) -> Result<Var> {
        let (sxy, syz, szx) = (self.shape(xy), self.shape(yz), self.shape(zx));
        let consistent = match (sxy, syz, szx) {
            ([x, y, c], [y2, z, c2], [z2, x2, c3]) => x == x2 && y == y2 && z == z2 && c == c2 && c == c3,
            _ => false,
        };
        if !consistent {
            return Err(Error::Shape {
                op: "tpv_aggregate",
                lhs: [sxy, syz].concat(),
                rhs: szx.to_vec(),
            });
        }
        let (x, y, c) = (sxy[0], sxy[1], sxy[2]);
        let z = syz[1];
        let out = tpv_aggregate_kernel(self.data(xy), self.data(yz), self.data(zx), [x, y, z, c]);
        let value = self.make("tpv_aggregate", &[x, y, z, c], out)?;
        let rg = self.rg(xy) || self.rg(yz) || self.rg(zx);
        self.push("tpv_aggregate", value, Op::TpvAggregate([xy, yz, zx]), rg)
    }

    /// Row-wise layer normalization of an `[m, c]` matrix with a learned gain
    /// and no bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, c) = self.dims2("layer_norm", x)?;
        if self.value(gain).numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![m, c],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let mut xhat = vec![0.0; m * c];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let row = &xs[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j];
            }
        }
        let value = self.make("layer_norm", &[m, c], out)?;
        let rg = self.rg(x) || self.rg(gain);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Selective scan over an `[L, C]` sequence with diagonal state `[C, N]`.
    ///
    /// Inputs: `x [L,C]`, `delta [L,C]` (strictly positive), `a [C,N]`,
    /// `b [L,N]`, `c [L,N]`, `d [C]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (l, ch) = self.dims2("selective_scan", x)?;
        let (ca, n) = self.dims2("selective_scan", a)?;
        let bad = |lhs: &[usize], rhs: &[usize]| Error::Shape {
            op: "selective_scan",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if self.shape(delta) != [l, ch] {
            return Err(bad(self.shape(x), self.shape(delta)));
        }
        if ca != ch {
            return Err(bad(self.shape(x), self.shape(a)));
        }
        if self.shape(b) != [l, n] {
            return Err(bad(&[l, n], self.shape(b)));
        }
        if self.shape(c) != [l, n] {
            return Err(bad(&[l, n], self.shape(c)));
        }
        if self.value(d).numel() != ch {
            return Err(bad(&[ch], self.shape(d)));
        }
        if self.data(delta).iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("selective_scan requires strictly positive delta"));
        }
        let dims = ScanDims {
            len: l,
            channels: ch,
            state: n,
        };
        let io = scan::ScanInputs {
            dims,
            x: self.data(x),
            delta: self.data(delta),
            a: self.data(a),
            b: self.data(b),
            c: self.data(c),
            d: self.data(d),
        };
        let inputs = [x, delta, a, b, c, d];
        let rg = inputs.iter().any(|v| self.rg(*v));
        let (y, states) = if rg {
            let out = scan::scan_chunked(&io, scan::DEFAULT_CHUNK);
            (out.y, out.states)
        } else {
            (scan::scan_forward(&io, scan::DEFAULT_CHUNK), Vec::new())
        };
        let value = self.make("selective_scan", &[l, ch], y)?;
        self.push(
            "selective_scan",
            value,
            Op::SelectiveScan {
                inputs,
                dims,
                states,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[m, k]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2("softmax_cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![m, k],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("target class {bad} out of range for {k} logits")));
        }
        let probs = softmax_rows(self.data(logits), k);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[r * k + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / m as f64;
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them. The tape is left intact; call [`Tape::reset`] to reuse it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Only differentiable leaves and intermediate nodes keep gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|buf| add_into(buf, g));
                acc(*b, &|buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &|buf| {
                    for ((o, gv), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &|buf| {
                    for ((o, gv), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|buf| buf.iter_mut().zip(g).for_each(|(o, gv)| *o += s * gv)),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &|buf| add_into(buf, g)),
            Op::Unary(a, f) => {
                let xs = self.data(*a);
                let ys = node.value.data();
                acc(*a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * f.derivative(xs[i], ys[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G · Bᵀ
                acc(*a, &|buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            buf[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|buf| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let brow = &mut buf[p * n..(p + 1) * n];
                            for (o, gv) in brow.iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|buf| add_into(buf, g));
                let n = self.shape(*x)[1];
                acc(*bias, &|buf| {
                    for row in g.chunks_exact(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &|buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::PermuteRows(x, perm) => {
                let c = self.shape(*x)[1];
                acc(*x, &|buf| scatter_rows_add(buf, g, perm, c));
            }
            Op::GatherRows(table, idx) => {
                let c = self.shape(*table)[1];
                acc(*table, &|buf| scatter_rows_add(buf, g, idx, c));
            }
            Op::PlaneMean(v, axis) => {
                let dims = [
                    self.shape(*v)[0],
                    self.shape(*v)[1],
                    self.shape(*v)[2],
                    self.shape(*v)[3],
                ];
                acc(*v, &|buf| plane_mean_backward(buf, g, dims, *axis));
            }
            Op::TpvAggregate([xy, yz, zx]) => {
                let s = node.value.shape();
                let (x, y, z, c) = (s[0], s[1], s[2], s[3]);
                acc(*xy, &|buf| {
                    for i in 0..x {
                        for j in 0..y {
                            for k in 0..z {
                                let src = &g[((i * y + j) * z + k) * c..][..c];
                                add_into(&mut buf[(i * y + j) * c..][..c], src);
                            }
                        }
                    }
                });
                acc(*yz, &|buf| {
                    for i in 0..x {
                        for j in 0..y {
                            for k in 0..z {
                                let src = &g[((i * y + j) * z + k) * c..][..c];
                                add_into(&mut buf[(j * z + k) * c..][..c], src);
                            }
                        }
                    }
                });
                acc(*zx, &|buf| {
                    for i in 0..x {
                        for j in 0..y {
                            for k in 0..z {
                                let src = &g[((i * y + j) * z + k) * c..][..c];
                                add_into(&mut buf[(k * x + i) * c..][..c], src);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*x)[1];
                let gv = self.data(*gain);
                acc(*gain, &|buf| {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &|buf| {
                    for (r, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let gh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh = gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[r * c + j] += inv_std[r] * (gh[j] - mean_gh - hrow[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::SelectiveScan { inputs, dims, states } => {
                let [x, delta, a, b, c, d] = *inputs;
                let io = scan::ScanInputs {
                    dims: *dims,
                    x: self.data(x),
                    delta: self.data(delta),
                    a: self.data(a),
                    b: self.data(b),
                    c: self.data(c),
                    d: self.data(d),
                };
                let sg = scan::scan_backward(&io, states, g);
                acc(x, &|buf| add_into(buf, &sg.dx));
                acc(delta, &|buf| add_into(buf, &sg.ddelta));
                acc(a, &|buf| add_into(buf, &sg.da));
                acc(b, &|buf| add_into(buf, &sg.db));
                acc(c, &|buf| add_into(buf, &sg.dc));
                acc(d, &|buf| add_into(buf, &sg.dd));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let m = targets.len() as f64;
                acc(*logits, &|buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * k + j] += g[0] * (probs[r * k + j] - onehot) / m;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, v) in buf.iter_mut().zip(g) {
        *o += v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn gather_rows_kernel(src: &[f64], idx: &[usize], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    out
}

fn scatter_rows_add(buf: &mut [f64], g: &[f64], idx: &[usize], c: usize) {
    for (r, &i) in idx.iter().enumerate() {
        add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
    }
}

pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (orow, lrow) in out.chunks_exact_mut(k).zip(logits.chunks_exact(k)) {
        let mx = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, l) in orow.iter_mut().zip(lrow) {
            *o = (l - mx).exp();
            s += *o;
        }
        orow.iter_mut().for_each(|o| *o /= s);
    }
    out
}

pub(crate) fn plane_mean_kernel(v: &[f64], dims: [usize; 4], axis: PlaneAxis) -> (Vec<usize>, Vec<f64>) {
    let [x, y, z, c] = dims;
    let (shape, denom) = match axis {
        PlaneAxis::Xy => (vec![x, y, c], z),
        PlaneAxis::Yz => (vec![y, z, c], x),
        PlaneAxis::Zx => (vec![z, x, c], y),
    };
    let mut out = vec![0.0; shape.iter().product()];
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let src = &v[((i * y + j) * z + k) * c..][..c];
                let dst = match axis {
                    PlaneAxis::Xy => (i * y + j) * c,
                    PlaneAxis::Yz => (j * z + k) * c,
                    PlaneAxis::Zx => (k * x + i) * c,
                };
                add_into(&mut out[dst..dst + c], src);
            }
        }
    }
    let inv = 1.0 / denom as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    (shape, out)
}

fn plane_mean_backward(buf: &mut [f64], g: &[f64], dims: [usize; 4], axis: PlaneAxis) {
    let [x, y, z, c] = dims;
    let inv = 1.0
        / match axis {
            PlaneAxis::Xy => z,
            PlaneAxis::Yz => x,
            PlaneAxis::Zx => y,
        } as f64;
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let src = match axis {
                    PlaneAxis::Xy => (i * y + j) * c,
                    PlaneAxis::Yz => (j * z + k) * c,
                    PlaneAxis::Zx => (k * x + i) * c,
                };
                let dst = ((i * y + j) * z + k) * c;
                for ch in 0..c {
                    buf[dst + ch] += g[src + ch] * inv;
                }
            }
        }
    }
}

pub(crate) fn tpv_aggregate_kernel(xy: &[f64], yz: &[f64], zx: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [x, y, z, c] = dims;
    let mut out = vec![0.0; x * y * z * c];
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let o = ((i * y + j) * z + k) * c;
                let a = (i * y + j) * c;
                let b = (j * z + k) * c;
                let d = (k * x + i) * c;
                for ch in 0..c {
                    out[o + ch] = xy[a + ch] + yz[b + ch] + zx[d + ch];
                }
            }
        }
    }
    out
}
