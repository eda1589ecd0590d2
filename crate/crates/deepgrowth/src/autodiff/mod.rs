//! Minimal reverse-mode differentiation engine.
//!
//! Operations are recorded on a [`Tape`] (a Wengert list) during the forward
//! pass and replayed in reverse to accumulate gradients. Tensors are flat
//! row-major `f64` buffers owned by the tape; [`Var`] is a copyable handle
//! into it. A tape and its tensors belong to one logical thread; distinct
//! tapes are independent.

mod adam;
mod conv;

pub use adam::Adam;

use rand::Rng;

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GridSample {
        grid: Var,
        points: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sine {
        input: Var,
        omega: f64,
    },
    /// Inverted-dropout mask: entries are 0.0 or 1/(1-rate).
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    L1Mean {
        a: Var,
        b: Var,
    },
    L2NormMean {
        inputs: Vec<Var>,
        norms: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Computation tape: records forward operations, replays them backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// outer * mid * inner decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated by the last `backward` call, if this tensor
    /// requires one and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, values: &[f64], shape: &[usize]) -> Var {
        assert_eq!(numel(shape), values.len(), "param shape/len mismatch");
        self.push(Op::Leaf, shape.to_vec(), values.to_vec(), true)
    }

    /// Non-trainable leaf (inputs, targets, sample coordinates).
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), values.len(), "constant shape/len mismatch");
        self.push(Op::Leaf, shape.to_vec(), values, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), shape, values, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), shape, values, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), shape, values, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), shape, values, rg)
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb.iter())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let mut shape = sa.clone();
        shape[axis] = sa[axis] + sb[axis];
        let (outer, _, inner) = split_axis(&shape, axis);
        let (mid_a, mid_b) = (sa[axis], sb[axis]);
        let mut values = vec![0.0; numel(&shape)];
        let va = &self.nodes[a.0].values;
        let vb = &self.nodes[b.0].values;
        for o in 0..outer {
            let dst = o * (mid_a + mid_b) * inner;
            values[dst..dst + mid_a * inner]
                .copy_from_slice(&va[o * mid_a * inner..(o + 1) * mid_a * inner]);
            values[dst + mid_a * inner..dst + (mid_a + mid_b) * inner]
                .copy_from_slice(&vb[o * mid_b * inner..(o + 1) * mid_b * inner]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Concat { a, b, axis }, shape, values, rg))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = &self.nodes[input.0].shape;
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let (outer, mid, inner) = split_axis(s, axis);
        let mut values = vec![0.0; numel(&shape)];
        let src = &self.nodes[input.0].values;
        for o in 0..outer {
            let from = (o * mid + start) * inner;
            values[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[from..from + len * inner]);
        }
        let rg = self.rg(input);
        Ok(self.push(Op::Narrow { input, axis, start }, shape, values, rg))
    }

    /// 3D cross-correlation: input `[C_in,D,H,W]`, kernel `[C_out,C_in,k,k,k]`
    /// (k odd), bias `[C_out]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks, bs) = (
            &self.nodes[input.0].shape,
            &self.nodes[kernel.0].shape,
            &self.nodes[bias.0].shape,
        );
        let ok = is.len() == 4
            && ks.len() == 5
            && bs.len() == 1
            && ks[1] == is[0]
            && ks[2] == ks[3]
            && ks[3] == ks[4]
            && ks[2] % 2 == 1
            && bs[0] == ks[0]
            && stride >= 1;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: is.clone(),
                rhs: ks.clone(),
            });
        }
        let k = ks[2];
        let out_dim = |n: usize| (n + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let (dout, hout, wout) = match (out_dim(is[1]), out_dim(is[2]), out_dim(is[3])) {
            (Some(d), Some(h), Some(w)) if d > 0 && h > 0 && w > 0 => (d, h, w),
            _ => {
                return Err(Error::invalid(
                    "conv3d",
                    format!("kernel {k} does not fit input {is:?} with padding {padding}"),
                ))
            }
        };
        let shape = vec![ks[0], dout, hout, wout];
        let values = conv::forward(
            &self.nodes[input.0].values,
            is,
            &self.nodes[kernel.0].values,
            ks,
            &self.nodes[bias.0].values,
            stride,
            padding,
            &shape,
        );
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            shape,
            values,
            rg,
        ))
    }

    /// Affine map over the last dimension: input `[..,F_in]`, weight
    /// `[F_out,F_in]`, bias `[F_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (
            &self.nodes[input.0].shape,
            &self.nodes[weight.0].shape,
            &self.nodes[bias.0].shape,
        );
        let ok = !is.is_empty()
            && ws.len() == 2
            && bs.len() == 1
            && *is.last().unwrap() == ws[1]
            && bs[0] == ws[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: is.clone(),
                rhs: ws.clone(),
            });
        }
        let f_in = ws[1];
        let f_out = ws[0];
        let rows = numel(is) / f_in;
        let x = &self.nodes[input.0].values;
        let w = &self.nodes[weight.0].values;
        let b = &self.nodes[bias.0].values;
        let mut values = vec![0.0; rows * f_out];
        for r in 0..rows {
            let xr = &x[r * f_in..(r + 1) * f_in];
            let out = &mut values[r * f_out..(r + 1) * f_out];
            for (o, out_o) in out.iter_mut().enumerate() {
                let wr = &w[o * f_in..(o + 1) * f_in];
                let mut acc = b[o];
                for i in 0..f_in {
                    acc += xr[i] * wr[i];
                }
                *out_o = acc;
            }
        }
        let mut shape = is.clone();
        *shape.last_mut().unwrap() = f_out;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Op::Linear { input, weight, bias }, shape, values, rg))
    }

    /// Trilinear sampling of a `[C,d,h,w]` grid at `[P,3]` normalized points.
    ///
    /// Coordinates are corner-aligned per axis: -1 maps to node 0 and +1 to
    /// node n-1; queries outside `[-1,1]` are clamped to the boundary. Point
    /// component order matches the grid's spatial axis order `(d,h,w)`.
    pub fn grid_sample(&mut self, grid: Var, points: Var) -> Result<Var> {
        let (gs, ps) = (&self.nodes[grid.0].shape, &self.nodes[points.0].shape);
        if gs.len() != 4 || ps.len() != 2 || ps[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "grid_sample",
                lhs: gs.clone(),
                rhs: ps.clone(),
            });
        }
        if self.nodes[points.0].values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("grid_sample", "NaN coordinate"));
        }
        let c = gs[0];
        let p = ps[0];
        let mut values = vec![0.0; p * c];
        {
            let g = &self.nodes[grid.0].values;
            let pts = &self.nodes[points.0].values;
            let dims = [gs[1], gs[2], gs[3]];
            for i in 0..p {
                let out = &mut values[i * c..(i + 1) * c];
                sample_one(g, dims, &pts[i * 3..i * 3 + 3], out);
            }
        }
        let rg = self.rg(grid) || self.rg(points);
        Ok(self.push(Op::GridSample { grid, points }, vec![p, c], values, rg))
    }

    fn unary(&mut self, op: Op, input: Var, f: impl Fn(f64) -> f64) -> Var {
        let values = self.nodes[input.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.rg(input);
        self.push(op, shape, values, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid(x), x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x), x, |v| v.max(0.0))
    }

    /// sin(omega * x).
    pub fn sine(&mut self, x: Var, omega: f64) -> Var {
        self.unary(Op::Sine { input: x, omega }, x, |v| (omega * v).sin())
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1-rate); otherwise the identity.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[input.0].values.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let values = self.nodes[input.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.rg(input);
        Ok(self.push(Op::Dropout { input, mask }, shape, values, rg))
    }

    /// Mean absolute difference over all elements; scalar output.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_mean", a, b)?;
        let n = self.nodes[a.0].values.len() as f64;
        let sum: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::L1Mean { a, b }, vec![1], vec![sum / n], rg))
    }

    /// Mean over tensors of the Euclidean norm of each flattened tensor.
    pub fn l2_norm_mean(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("l2_norm_mean", "no input tensors"));
        }
        let norms: Vec<f64> = inputs
            .iter()
            .map(|v| {
                self.nodes[v.0]
                    .values
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Op::L2NormMean {
                inputs: inputs.to_vec(),
                norms,
            },
            vec![1],
            vec![mean],
            rg,
        ))
    }

    /// Accumulate gradients of `loss` (which must be scalar) into every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        if self.backward_done {
            return Err(Error::invalid("backward", "already called on this tape"));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            // Detach the upstream gradient so inputs can be mutated.
            let up = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &up);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].values.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&mut self, id: usize, op: &Op, up: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        let g = self.grad_buf(v);
                        for (gi, ui) in g.iter_mut().zip(up) {
                            *gi += ui;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    let g = self.grad_buf(a);
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui;
                    }
                }
                if self.rg(b) {
                    let g = self.grad_buf(b);
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi -= ui;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb: Vec<f64> = self.nodes[b.0].values.clone();
                    let g = self.grad_buf(a);
                    for i in 0..g.len() {
                        g[i] += up[i] * vb[i];
                    }
                }
                if self.rg(b) {
                    let va: Vec<f64> = self.nodes[a.0].values.clone();
                    let g = self.grad_buf(b);
                    for i in 0..g.len() {
                        g[i] += up[i] * va[i];
                    }
                }
            }
            Op::Scale(a, factor) => {
                if self.rg(a) {
                    let g = self.grad_buf(a);
                    for (gi, ui) in g.iter_mut().zip(up) {
                        *gi += ui * factor;
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, _, inner) = split_axis(&self.nodes[id].shape, axis);
                let mid_a = self.nodes[a.0].shape[axis];
                let mid_b = self.nodes[b.0].shape[axis];
                if self.rg(a) {
                    let g = self.grad_buf(a);
                    for o in 0..outer {
                        let src = o * (mid_a + mid_b) * inner;
                        for i in 0..mid_a * inner {
                            g[o * mid_a * inner + i] += up[src + i];
                        }
                    }
                }
                if self.rg(b) {
                    let g = self.grad_buf(b);
                    for o in 0..outer {
                        let src = o * (mid_a + mid_b) * inner + mid_a * inner;
                        for i in 0..mid_b * inner {
                            g[o * mid_b * inner + i] += up[src + i];
                        }
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                if self.rg(input) {
                    let len = self.nodes[id].shape[axis];
                    let (outer, mid, inner) = split_axis(&self.nodes[input.0].shape, axis);
                    let g = self.grad_buf(input);
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        for i in 0..len * inner {
                            g[dst + i] += up[o * len * inner + i];
                        }
                    }
                }
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let ishape = self.nodes[input.0].shape.clone();
                let kshape = self.nodes[kernel.0].shape.clone();
                let oshape = self.nodes[id].shape.clone();
                if self.rg(bias) {
                    let spatial = oshape[1] * oshape[2] * oshape[3];
                    let g = self.grad_buf(bias);
                    for (co, gi) in g.iter_mut().enumerate() {
                        *gi += up[co * spatial..(co + 1) * spatial].iter().sum::<f64>();
                    }
                }
                if self.rg(kernel) {
                    let ivals = self.nodes[input.0].values.clone();
                    let g = self.grad_buf(kernel);
                    conv::backward_kernel(&ivals, &ishape, up, &oshape, &kshape, stride, padding, g);
                }
                if self.rg(input) {
                    let kvals = self.nodes[kernel.0].values.clone();
                    let g = self.grad_buf(input);
                    conv::backward_input(&kvals, &kshape, up, &oshape, &ishape, stride, padding, g);
                }
            }
            Op::Linear { input, weight, bias } => {
                let f_out = self.nodes[weight.0].shape[0];
                let f_in = self.nodes[weight.0].shape[1];
                let rows = self.nodes[input.0].values.len() / f_in;
                if self.rg(bias) {
                    let g = self.grad_buf(bias);
                    for r in 0..rows {
                        for (o, gi) in g.iter_mut().enumerate() {
                            *gi += up[r * f_out + o];
                        }
                    }
                }
                if self.rg(weight) {
                    let x = self.nodes[input.0].values.clone();
                    let g = self.grad_buf(weight);
                    for r in 0..rows {
                        let xr = &x[r * f_in..(r + 1) * f_in];
                        for o in 0..f_out {
                            let u = up[r * f_out + o];
                            if u != 0.0 {
                                let gw = &mut g[o * f_in..(o + 1) * f_in];
                                for i in 0..f_in {
                                    gw[i] += u * xr[i];
                                }
                            }
                        }
                    }
                }
                if self.rg(input) {
                    let w = self.nodes[weight.0].values.clone();
                    let g = self.grad_buf(input);
                    for r in 0..rows {
                        let gr = &mut g[r * f_in..(r + 1) * f_in];
                        for o in 0..f_out {
                            let u = up[r * f_out + o];
                            if u != 0.0 {
                                let wr = &w[o * f_in..(o + 1) * f_in];
                                for i in 0..f_in {
                                    gr[i] += u * wr[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::GridSample { grid, points } => {
                let gs = self.nodes[grid.0].shape.clone();
                let c = gs[0];
                let dims = [gs[1], gs[2], gs[3]];
                let pts = self.nodes[points.0].values.clone();
                let p = pts.len() / 3;
                if self.rg(grid) {
                    let g = self.grad_buf(grid);
                    for i in 0..p {
                        scatter_one(g, c, dims, &pts[i * 3..i * 3 + 3], &up[i * c..(i + 1) * c]);
                    }
                }
                if self.rg(points) {
                    let gvals = self.nodes[grid.0].values.clone();
                    let g = self.grad_buf(points);
                    for i in 0..p {
                        point_grad_one(
                            &gvals,
                            c,
                            dims,
                            &pts[i * 3..i * 3 + 3],
                            &up[i * c..(i + 1) * c],
                            &mut g[i * 3..i * 3 + 3],
                        );
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(a) {
                    let y = self.nodes[id].values.clone();
                    let g = self.grad_buf(a);
                    for i in 0..g.len() {
                        g[i] += up[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.rg(a) {
                    let y = self.nodes[id].values.clone();
                    let g = self.grad_buf(a);
                    for i in 0..g.len() {
                        g[i] += up[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Relu(a) => {
                if self.rg(a) {
                    let x = self.nodes[a.0].values.clone();
                    let g = self.grad_buf(a);
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += up[i];
                        }
                    }
                }
            }
            Op::Sine { input, omega } => {
                if self.rg(input) {
                    let x = self.nodes[input.0].values.clone();
                    let g = self.grad_buf(input);
                    for i in 0..g.len() {
                        g[i] += up[i] * omega * (omega * x[i]).cos();
                    }
                }
            }
            Op::Dropout { input, ref mask } => {
                if self.rg(input) {
                    let mask = mask.clone();
                    let g = self.grad_buf(input);
                    for i in 0..g.len() {
                        g[i] += up[i] * mask[i];
                    }
                }
            }
            Op::L1Mean { a, b } => {
                let n = self.nodes[a.0].values.len() as f64;
                let u = up[0] / n;
                // Subgradient 0 at ties.
                let signs: Vec<f64> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(&self.nodes[b.0].values)
                    .map(|(x, y)| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(a) {
                    let g = self.grad_buf(a);
                    for i in 0..g.len() {
                        g[i] += u * signs[i];
                    }
                }
                if self.rg(b) {
                    let g = self.grad_buf(b);
                    for i in 0..g.len() {
                        g[i] -= u * signs[i];
                    }
                }
            }
            Op::L2NormMean {
                ref inputs,
                ref norms,
            } => {
                let k = inputs.len() as f64;
                let u = up[0] / k;
                let inputs = inputs.clone();
                let norms = norms.clone();
                for (v, norm) in inputs.iter().zip(norms) {
                    if self.rg(*v) {
                        let vals = self.nodes[v.0].values.clone();
                        let g = self.grad_buf(*v);
                        if norm > 0.0 {
                            for i in 0..g.len() {
                                g[i] += u * vals[i] / norm;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Map a normalized coordinate in [-1,1] to a fractional node index,
/// clamping outside queries to the boundary. Returns (lower node, fraction,
/// d(fractional index)/d(coord): 0 when clamped).
fn locate(coord: f64, n: usize) -> (usize, f64, f64) {
    if n <= 1 {
        return (0, 0.0, 0.0);
    }
    let scale = (n - 1) as f64 / 2.0;
    let t = (coord + 1.0) * scale;
    if t <= 0.0 {
        (0, 0.0, 0.0)
    } else if t >= (n - 1) as f64 {
        (n - 2, 1.0, 0.0)
    } else {
        let i0 = (t.floor() as usize).min(n - 2);
        (i0, t - i0 as f64, scale)
    }
}

fn sample_one(grid: &[f64], dims: [usize; 3], pt: &[f64], out: &mut [f64]) {
    let (i0, fd, _) = locate(pt[0], dims[0]);
    let (j0, fh, _) = locate(pt[1], dims[1]);
    let (k0, fw, _) = locate(pt[2], dims[2]);
    let (h, w) = (dims[1], dims[2]);
    let plane = dims[0] * h * w;
    for (ch, out_ch) in out.iter_mut().enumerate() {
        let base = ch * plane;
        let mut acc = 0.0;
        for (dd, wd) in [(0, 1.0 - fd), (1, fd)] {
            if dims[0] == 1 && dd == 1 {
                continue;
            }
            for (dh, wh) in [(0, 1.0 - fh), (1, fh)] {
                if dims[1] == 1 && dh == 1 {
                    continue;
                }
                for (dw, ww) in [(0, 1.0 - fw), (1, fw)] {
                    if dims[2] == 1 && dw == 1 {
                        continue;
                    }
                    let idx = base + ((i0 + dd) * h + (j0 + dh)) * w + (k0 + dw);
                    acc += wd * wh * ww * grid[idx];
                }
            }
        }
        *out_ch = acc;
    }
}

fn scatter_one(grad: &mut [f64], c: usize, dims: [usize; 3], pt: &[f64], up: &[f64]) {
    let (i0, fd, _) = locate(pt[0], dims[0]);
    let (j0, fh, _) = locate(pt[1], dims[1]);
    let (k0, fw, _) = locate(pt[2], dims[2]);
    let (h, w) = (dims[1], dims[2]);
    let plane = dims[0] * h * w;
    for (ch, &u) in up.iter().enumerate().take(c) {
        if u == 0.0 {
            continue;
        }
        let base = ch * plane;
        for (dd, wd) in [(0, 1.0 - fd), (1, fd)] {
            if dims[0] == 1 && dd == 1 {
                continue;
            }
            for (dh, wh) in [(0, 1.0 - fh), (1, fh)] {
                if dims[1] == 1 && dh == 1 {
                    continue;
                }
                for (dw, ww) in [(0, 1.0 - fw), (1, fw)] {
                    if dims[2] == 1 && dw == 1 {
                        continue;
                    }
                    let idx = base + ((i0 + dd) * h + (j0 + dh)) * w + (k0 + dw);
                    grad[idx] += u * wd * wh * ww;
                }
            }
        }
    }
}

fn point_grad_one(
    grid: &[f64],
    c: usize,
    dims: [usize; 3],
    pt: &[f64],
    up: &[f64],
    out: &mut [f64],
) {
    let (i0, fd, sd) = locate(pt[0], dims[0]);
    let (j0, fh, sh) = locate(pt[1], dims[1]);
    let (k0, fw, sw) = locate(pt[2], dims[2]);
    let (h, w) = (dims[1], dims[2]);
    let plane = dims[0] * h * w;
    let corner = |ch: usize, dd: usize, dh: usize, dw: usize| -> f64 {
        let dd = dd.min(dims[0] - 1);
        let dh = dh.min(dims[1] - 1);
        let dw = dw.min(dims[2] - 1);
        grid[ch * plane + ((i0 + dd) * h + (j0 + dh)) * w + (k0 + dw)]
    };
    let mut acc = [0.0f64; 3];
    for (ch, &u) in up.iter().enumerate().take(c) {
        if u == 0.0 {
            continue;
        }
        for dh in 0..2 {
            let wh = if dh == 0 { 1.0 - fh } else { fh };
            for dw in 0..2 {
                let ww = if dw == 0 { 1.0 - fw } else { fw };
                acc[0] += u * wh * ww * (corner(ch, 1, dh, dw) - corner(ch, 0, dh, dw));
            }
        }
        for dd in 0..2 {
            let wd = if dd == 0 { 1.0 - fd } else { fd };
            for dw in 0..2 {
                let ww = if dw == 0 { 1.0 - fw } else { fw };
                acc[1] += u * wd * ww * (corner(ch, dd, 1, dw) - corner(ch, dd, 0, dw));
            }
        }
        for dd in 0..2 {
            let wd = if dd == 0 { 1.0 - fd } else { fd };
            for dh in 0..2 {
                let wh = if dh == 0 { 1.0 - fh } else { fh };
                acc[2] += u * wd * wh * (corner(ch, dd, dh, 1) - corner(ch, dd, dh, 0));
            }
        }
    }
    out[0] += acc[0] * sd;
    out[1] += acc[1] * sh;
    out[2] += acc[2] * sw;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar function of a flat vector.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = rel_err(a, n);
            assert!(
                e < tol,
                "{what}[{i}]: analytic {a} vs finite-diff {n} (rel err {e:.3e} >= {tol:e})"
            );
        }
    }

    #[test]
    fn elementwise_ops_and_grads() {
        let mut t = Tape::new();
        let a = t.param(&[1.0, -2.0, 3.0], &[3]);
        let b = t.param(&[0.5, 4.0, -1.0], &[3]);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), &[1.5, 2.0, 2.0]);
        let d = t.sub(a, b).unwrap();
        assert_eq!(t.value(d), &[0.5, -6.0, 4.0]);
        let m = t.mul(a, b).unwrap();
        assert_eq!(t.value(m), &[0.5, -8.0, -3.0]);
        let sc = t.scale(m, -2.0);
        assert_eq!(t.value(sc), &[-1.0, 16.0, 6.0]);

        let mut t = Tape::new();
        let a = t.param(&[1.0, 2.0], &[2]);
        let b = t.param(&[3.0, 5.0], &[2]);
        let m = t.mul(a, b).unwrap();
        let zero = t.constant(vec![0.0, 0.0], &[2]);
        let loss = t.l1_mean(m, zero).unwrap();
        t.backward(loss).unwrap();
        // d/da mean|a*b| = sign(a*b)*b/2
        assert_eq!(t.grad(a).unwrap(), &[1.5, 2.5]);
        assert_eq!(t.grad(b).unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected_with_both_shapes() {
        let mut t = Tape::new();
        let a = t.param(&[1.0, 2.0], &[2]);
        let b = t.param(&[1.0, 2.0, 3.0], &[3]);
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "got: {err}");
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut t = Tape::new();
        let x = t.param(&[3.0], &[1]);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn gradient_accumulates_additively_across_paths() {
        // loss = x + x: both paths contribute.
        let mut t = Tape::new();
        let x = t.param(&[5.0], &[1]);
        let y = t.add(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(&[2.0], &[1]);
        let c = t.constant(vec![7.0], &[1]);
        let y = t.mul(x, c).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut t = Tape::new();
        let x = t.param(&[1.0, 2.0], &[2]);
        assert!(t.backward(x).is_err());
        let zero = t.constant(vec![0.0, 0.0], &[2]);
        let loss = t.l1_mean(x, zero).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn concat_and_narrow_round_trip_with_gradients() {
        let mut t = Tape::new();
        let a = t.param(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t.param(&[5.0, 6.0], &[1, 2]);
        let c = t.concat(a, b, 0).unwrap();
        assert_eq!(t.shape(c), &[3, 2]);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = t.narrow(c, 0, 2, 1).unwrap();
        assert_eq!(t.value(back), &[5.0, 6.0]);

        // Concat along the trailing axis interleaves rows.
        let c2 = t.concat(a, a, 1).unwrap();
        assert_eq!(t.value(c2), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);

        let tgt = t.constant(vec![0.0, 0.0], &[1, 2]);
        let loss = t.l1_mean(back, tgt).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(a).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(t.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn narrow_rejects_out_of_range() {
        let mut t = Tape::new();
        let a = t.param(&[1.0, 2.0, 3.0], &[3]);
        assert!(t.narrow(a, 0, 2, 2).is_err());
        assert!(t.narrow(a, 1, 0, 1).is_err());
    }

    #[test]
    fn conv3d_identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals = rand_vec(&mut rng, 2 * 27);
        let mut t = Tape::new();
        let x = t.param(&vals, &[2, 3, 3, 3]);
        // 1x1x1 kernels picking out each channel.
        let k = t.param(&[1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1, 1]);
        let b = t.param(&[0.0, 0.0], &[2]);
        let y = t.conv3d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[2, 3, 3, 3]);
        assert_eq!(t.value(y), vals.as_slice());
    }

    #[test]
    fn conv3d_constant_input_all_ones_kernel_sums_the_window() {
        let c = 0.7;
        let mut t = Tape::new();
        let x = t.param(&vec![c; 125], &[1, 5, 5, 5]);
        let k = t.param(&vec![1.0; 27], &[1, 1, 3, 3, 3]);
        let b = t.param(&[0.0], &[1]);
        let y = t.conv3d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 3]);
        for &v in t.value(y) {
            assert!((v - 27.0 * c).abs() < 1e-12, "expected 27c, got {v}");
        }
    }

    /// Literal definition of cross-correlation, no loop-order tricks.
    #[allow(clippy::too_many_arguments)]
    fn conv3d_naive(
        input: &[f64],
        is: &[usize],
        kernel: &[f64],
        ks: &[usize],
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> (Vec<f64>, Vec<usize>) {
        let (cin, d, h, w) = (is[0], is[1], is[2], is[3]);
        let (cout, k) = (ks[0], ks[2]);
        let od = (d + 2 * padding - k) / stride + 1;
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; cout * od * oh * ow];
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let id = z * stride + kd;
                                        let ih = y * stride + kh;
                                        let iw = x * stride + kw;
                                        if id < padding
                                            || ih < padding
                                            || iw < padding
                                            || id - padding >= d
                                            || ih - padding >= h
                                            || iw - padding >= w
                                        {
                                            continue;
                                        }
                                        let iv = input[((ci * d + id - padding) * h + ih - padding)
                                            * w
                                            + iw
                                            - padding];
                                        let kv =
                                            kernel[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                                        acc += iv * kv;
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        (out, vec![cout, od, oh, ow])
    }

    #[test]
    fn conv3d_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let is = [2usize, 5, 4, 6];
        let ks = [3usize, 2, 3, 3, 3];
        let input = rand_vec(&mut rng, is.iter().product());
        let kernel = rand_vec(&mut rng, ks.iter().product());
        let bias = rand_vec(&mut rng, 3);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let (want, wshape) = conv3d_naive(&input, &is, &kernel, &ks, &bias, stride, padding);
            let mut t = Tape::new();
            let x = t.param(&input, &is);
            let k = t.param(&kernel, &ks);
            let b = t.param(&bias, &[3]);
            let y = t.conv3d(x, k, b, stride, padding).unwrap();
            assert_eq!(t.shape(y), wshape.as_slice(), "stride {stride} pad {padding}");
            for (i, (&got, &w)) in t.value(y).iter().zip(&want).enumerate() {
                assert!(
                    (got - w).abs() < 1e-12,
                    "stride {stride} pad {padding} elem {i}: {got} vs {w}"
                );
            }
        }
    }

    #[test]
    fn conv3d_downsample_shapes() {
        let mut t = Tape::new();
        let x = t.param(&vec![0.0; 32 * 32 * 32], &[1, 32, 32, 32]);
        let k = t.param(&[0.0; 27], &[1, 1, 3, 3, 3]);
        let b = t.param(&[0.0], &[1]);
        let y = t.conv3d(x, k, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 16, 16, 16]);
    }

    #[test]
    fn conv3d_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = t.param(&[0.0; 27], &[1, 3, 3, 3]);
        let k_wrong_cin = t.param(&[0.0; 54], &[1, 2, 3, 3, 3]);
        let k_even = t.param(&[0.0; 8], &[1, 1, 2, 2, 2]);
        let k_too_big = t.param(&[0.0; 125], &[1, 1, 5, 5, 5]);
        let b = t.param(&[0.0], &[1]);
        assert!(t.conv3d(x, k_wrong_cin, b, 1, 1).is_err());
        assert!(t.conv3d(x, k_even, b, 1, 0).is_err());
        assert!(t.conv3d(x, k_too_big, b, 1, 0).is_err());
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let is = vec![2usize, 5, 5, 5];
        let ks = vec![2usize, 2, 3, 3, 3];
        let (ni, nk, nb) = (250usize, 108usize, 2usize);
        let mut flat = rand_vec(&mut rng, ni + nk + nb);
        // Keep kernel entries away from zero so the loss kinks stay far
        // from the evaluation point.
        for v in flat.iter_mut() {
            *v += 0.1 * v.signum();
        }
        let target = rand_vec(&mut rng, 2 * 125);

        for (stride, padding, osz) in [(1usize, 1usize, 2 * 125), (2, 1, 2 * 27)] {
            let eval = |x: &[f64]| -> (Tape, Var, Var, Var, Var) {
                let mut t = Tape::new();
                let input = t.param(&x[..ni], &is);
                let kernel = t.param(&x[ni..ni + nk], &ks);
                let bias = t.param(&x[ni + nk..], &[2]);
                let y = t.conv3d(input, kernel, bias, stride, padding).unwrap();
                let y_shape = t.shape(y).to_vec();
                let tgt = t.constant(target[..osz].to_vec(), &y_shape);
                let loss = t.l1_mean(y, tgt).unwrap();
                (t, loss, input, kernel, bias)
            };
            let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
            let (mut t, loss, input, kernel, bias) = eval(&flat);
            t.backward(loss).unwrap();
            let mut analytic = t.grad(input).unwrap().to_vec();
            analytic.extend_from_slice(t.grad(kernel).unwrap());
            analytic.extend_from_slice(t.grad(bias).unwrap());
            let numeric = finite_diff(&f, &flat, 1e-5);
            assert_grads_close(&analytic, &numeric, 1e-5, "conv3d grad");
        }
    }

    #[test]
    fn linear_identity_and_constant_bias() {
        let mut t = Tape::new();
        let x = t.param(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let eye = t.param(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let zero = t.param(&[0.0, 0.0, 0.0], &[3]);
        let y = t.linear(x, eye, zero).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let wzero = t.param(&[0.0; 6], &[2, 3]);
        let b = t.param(&[-1.0, 4.0], &[2]);
        let y = t.linear(x, wzero, b).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.value(y), &[-1.0, 4.0, -1.0, 4.0]);
    }

    #[test]
    fn linear_batches_over_leading_dims() {
        let mut t = Tape::new();
        let x = t.param(&[1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 1.0, 1.0], &[2, 2, 2]);
        let w = t.param(&[1.0, 1.0], &[1, 2]);
        let b = t.param(&[10.0], &[1]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 1]);
        assert_eq!(t.value(y), &[11.0, 11.0, 14.0, 12.0]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (rows, f_in, f_out) = (4usize, 3usize, 5usize);
        let (ni, nw, nb) = (rows * f_in, f_out * f_in, f_out);
        let flat = rand_vec(&mut rng, ni + nw + nb);
        let target = rand_vec(&mut rng, rows * f_out);
        let eval = |x: &[f64]| -> (Tape, Var, Var, Var, Var) {
            let mut t = Tape::new();
            let input = t.param(&x[..ni], &[rows, f_in]);
            let weight = t.param(&x[ni..ni + nw], &[f_out, f_in]);
            let bias = t.param(&x[ni + nw..], &[f_out]);
            let y = t.linear(input, weight, bias).unwrap();
            let tgt = t.constant(target.clone(), &[rows, f_out]);
            let loss = t.l1_mean(y, tgt).unwrap();
            (t, loss, input, weight, bias)
        };
        let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
        let (mut t, loss, input, weight, bias) = eval(&flat);
        t.backward(loss).unwrap();
        let mut analytic = t.grad(input).unwrap().to_vec();
        analytic.extend_from_slice(t.grad(weight).unwrap());
        analytic.extend_from_slice(t.grad(bias).unwrap());
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-5, "linear grad");
    }

    #[test]
    fn activation_values_and_analytic_derivatives() {
        let mut t = Tape::new();
        let x = t.param(&[0.0], &[1]);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y)[0], 0.5);

        let mut t = Tape::new();
        let x = t.param(&[0.0], &[1]);
        let y = t.sine(x, 30.0);
        assert_eq!(t.value(y)[0], 0.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap()[0], 30.0);

        let mut t = Tape::new();
        let x = t.param(&[-2.0, 0.0, 3.0], &[3]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let flat = rand_vec(&mut rng, 16);
        let target = rand_vec(&mut rng, 16);
        let eval = |x: &[f64]| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let input = t.param(x, &[16]);
            let y = t.tanh(input);
            let tgt = t.constant(target.clone(), &[16]);
            let loss = t.l1_mean(y, tgt).unwrap();
            (t, loss, input)
        };
        let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
        let (mut t, loss, input) = eval(&flat);
        t.backward(loss).unwrap();
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(t.grad(input).unwrap(), &numeric, 1e-6, "tanh grad");
    }

    #[test]
    fn sigmoid_relu_sine_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let flat: Vec<f64> = (0..16)
            .map(|_| {
                // Keep away from relu's kink at 0.
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let target = rand_vec(&mut rng, 16);
        for act in 0..3usize {
            let eval = |x: &[f64]| -> (Tape, Var, Var) {
                let mut t = Tape::new();
                let input = t.param(x, &[16]);
                let y = match act {
                    0 => t.sigmoid(input),
                    1 => t.relu(input),
                    _ => t.sine(input, 30.0),
                };
                let tgt = t.constant(target.clone(), &[16]);
                let loss = t.l1_mean(y, tgt).unwrap();
                (t, loss, input)
            };
            let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
            let (mut t, loss, input) = eval(&flat);
            t.backward(loss).unwrap();
            let numeric = finite_diff(&f, &flat, 1e-6);
            assert_grads_close(t.grad(input).unwrap(), &numeric, 1e-4, "activation grad");
        }
    }

    #[test]
    fn grid_sample_reproduces_nodes_edges_and_cell_centers() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let g = t.param(&vals, &[1, 2, 2, 2]);
        // Node (0,0,0), node (1,1,1), edge midpoint along w, cell center.
        let pts = t.constant(
            vec![
                -1.0, -1.0, -1.0, //
                1.0, 1.0, 1.0, //
                -1.0, -1.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
            &[4, 3],
        );
        let y = t.grid_sample(g, pts).unwrap();
        assert_eq!(t.shape(y), &[4, 1]);
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 7.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[3], 3.5);
    }

    #[test]
    fn grid_sample_clamps_outside_queries() {
        let mut t = Tape::new();
        let vals: Vec<f64> = (0..27).map(|v| v as f64).collect();
        let g = t.param(&vals, &[1, 3, 3, 3]);
        let pts = t.constant(
            vec![
                -5.0, -1.0, -1.0, //
                -1.0, -1.0, -1.0, //
                1.0, 2.0, 9.0, //
                1.0, 1.0, 1.0,
            ],
            &[4, 3],
        );
        let y = t.grid_sample(g, pts).unwrap();
        let v = t.value(y);
        assert_eq!(v[0], v[1], "below-range clamps to node 0");
        assert_eq!(v[2], v[3], "above-range clamps to last node");
    }

    /// Direct trilinear formula over an explicitly located cell.
    fn trilerp_naive(grid: &[f64], dims: [usize; 3], c: usize, ch: usize, pt: &[f64]) -> f64 {
        let loc = |x: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let t = ((x + 1.0) / 2.0 * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            (i, t - i as f64)
        };
        let (i, fd) = loc(pt[0], dims[0]);
        let (j, fh) = loc(pt[1], dims[1]);
        let (k, fw) = loc(pt[2], dims[2]);
        let at = |di: usize, dj: usize, dk: usize| -> f64 {
            let di = di.min(dims[0] - 1);
            let dj = dj.min(dims[1] - 1);
            let dk = dk.min(dims[2] - 1);
            grid[((ch * dims[0] + i + di) * dims[1] + j + dj) * dims[2] + k + dk]
        };
        let _ = c;
        (1.0 - fd) * (1.0 - fh) * (1.0 - fw) * at(0, 0, 0)
            + (1.0 - fd) * (1.0 - fh) * fw * at(0, 0, 1)
            + (1.0 - fd) * fh * (1.0 - fw) * at(0, 1, 0)
            + (1.0 - fd) * fh * fw * at(0, 1, 1)
            + fd * (1.0 - fh) * (1.0 - fw) * at(1, 0, 0)
            + fd * (1.0 - fh) * fw * at(1, 0, 1)
            + fd * fh * (1.0 - fw) * at(1, 1, 0)
            + fd * fh * fw * at(1, 1, 1)
    }

    #[test]
    fn grid_sample_matches_direct_trilinear_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let dims = [4usize, 3, 5];
        let c = 3usize;
        let gvals = rand_vec(&mut rng, c * dims.iter().product::<usize>());
        let n = 40;
        let pvals: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.3..1.3)).collect();
        let mut t = Tape::new();
        let g = t.param(&gvals, &[c, dims[0], dims[1], dims[2]]);
        let p = t.constant(pvals.clone(), &[n, 3]);
        let y = t.grid_sample(g, p).unwrap();
        for i in 0..n {
            for ch in 0..c {
                let want = trilerp_naive(&gvals, dims, c, ch, &pvals[i * 3..i * 3 + 3]);
                let got = t.value(y)[i * c + ch];
                assert!(
                    (got - want).abs() < 1e-12,
                    "point {i} channel {ch}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn grid_sample_stays_within_corner_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let _dims = [3usize, 3, 3];
        let gvals = rand_vec(&mut rng, 27);
        let (lo, hi) = gvals
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let pvals: Vec<f64> = (0..300).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let g = t.param(&gvals, &[1, 3, 3, 3]);
        let p = t.constant(pvals, &[100, 3]);
        let y = t.grid_sample(g, p).unwrap();
        for &v in t.value(y) {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo},{hi}]");
        }
    }

    #[test]
    fn grid_sample_empty_points_and_nan_rejection() {
        let mut t = Tape::new();
        let g = t.param(&[1.0; 8], &[1, 2, 2, 2]);
        let empty = t.constant(vec![], &[0, 3]);
        let y = t.grid_sample(g, empty).unwrap();
        assert_eq!(t.shape(y), &[0, 1]);

        let nan = t.constant(vec![0.0, f64::NAN, 0.0], &[1, 3]);
        assert!(t.grid_sample(g, nan).is_err());
    }

    #[test]
    fn grid_sample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let dims = [3usize, 4, 3];
        let c = 2usize;
        let ng = c * dims.iter().product::<usize>();
        let np = 6usize;
        let mut flat = rand_vec(&mut rng, ng + np * 3);
        // Interior, well away from node boundaries where the interpolant
        // kinks.
        for v in flat[ng..].iter_mut() {
            *v = rng.random_range(-0.8..0.8);
            let nodes = 3.0;
            let cell = (*v + 1.0) / 2.0 * nodes;
            if (cell - cell.round()).abs() < 0.05 {
                *v += 0.1;
            }
        }
        let target = rand_vec(&mut rng, np * c);
        let eval = |x: &[f64]| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let g = t.param(&x[..ng], &[c, dims[0], dims[1], dims[2]]);
            let p = t.param(&x[ng..], &[np, 3]);
            let y = t.grid_sample(g, p).unwrap();
            let tgt = t.constant(target.clone(), &[np, c]);
            let loss = t.l1_mean(y, tgt).unwrap();
            (t, loss, g, p)
        };
        let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
        let (mut t, loss, g, p) = eval(&flat);
        t.backward(loss).unwrap();
        let mut analytic = t.grad(g).unwrap().to_vec();
        analytic.extend_from_slice(t.grad(p).unwrap());
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-4, "grid_sample grad");
    }

    #[test]
    fn dropout_identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut t = Tape::new();
        let x = t.param(&[1.0, 2.0, 3.0], &[3]);
        let y0 = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y0, x);
        let y1 = t.dropout(x, 0.9, false, &mut rng).unwrap();
        assert_eq!(y1, x);
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let n = 100_000;
        let mut t = Tape::new();
        let x = t.param(&vec![1.0; n], &[n]);
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "dropout mean {mean}");
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let n = 64;
        let mut t = Tape::new();
        let x = t.param(&vec![1.0; n], &[n]);
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let zeros = t.constant(vec![0.0; n], &[n]);
        let loss = t.l1_mean(y, zeros).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        let yv = t.value(y);
        // With all-ones input, mean|y| differentiates to mask/n elementwise.
        for i in 0..n {
            assert!(
                (g[i] * n as f64 - yv[i]).abs() < 1e-12,
                "mask mismatch at {i}: grad {} value {}",
                g[i],
                yv[i]
            );
        }
    }

    #[test]
    fn l1_mean_examples() {
        let mut t = Tape::new();
        let a = t.param(&[1.0, 2.0, 3.0], &[3]);
        let l = t.l1_mean(a, a).unwrap();
        assert_eq!(t.value(l)[0], 0.0);

        let b = t.constant(vec![1.5, 2.5, 3.5], &[3]);
        let l = t.l1_mean(a, b).unwrap();
        assert!((t.value(l)[0] - 0.5).abs() < 1e-15);

        let c = t.constant(vec![2.0, 2.0, 5.0], &[3]);
        let l = t.l1_mean(a, c).unwrap();
        assert!((t.value(l)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn l2_norm_mean_examples_and_gradient() {
        let mut t = Tape::new();
        let z = t.param(&[3.0, 4.0, 12.0], &[3]);
        let l = t.l2_norm_mean(&[z]).unwrap();
        assert_eq!(t.value(l)[0], 13.0);
        t.backward(l).unwrap();
        let g = t.grad(z).unwrap();
        for (gi, want) in g.iter().zip([3.0 / 13.0, 4.0 / 13.0, 12.0 / 13.0]) {
            assert!((gi - want).abs() < 1e-15);
        }

        let mut t = Tape::new();
        let a = t.param(&[3.0, 4.0], &[2]);
        let b = t.param(&[0.0, 0.0], &[2]);
        let l = t.l2_norm_mean(&[a, b]).unwrap();
        assert_eq!(t.value(l)[0], 2.5);
        t.backward(l).unwrap();
        for (got, want) in t.grad(a).unwrap().iter().zip([0.3, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }
        // Zero tensor sits at the norm's non-differentiable point; use 0.
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0]);

        assert!(Tape::new().l2_norm_mean(&[]).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let n = 24;
        let mut flat = rand_vec(&mut rng, n);
        let target: Vec<f64> = rand_vec(&mut rng, n)
            .iter()
            .map(|v| v + 2.0 * v.signum())
            .collect();
        for v in flat.iter_mut() {
            *v *= 0.5;
        }
        let eval_l1 = |x: &[f64]| -> (Tape, Var, Var) {
            let mut t = Tape::new();
            let a = t.param(x, &[n]);
            let b = t.constant(target.clone(), &[n]);
            let l = t.l1_mean(a, b).unwrap();
            (t, l, a)
        };
        let f = |x: &[f64]| eval_l1(x).0.value(eval_l1(x).1)[0];
        let (mut t, l, a) = eval_l1(&flat);
        t.backward(l).unwrap();
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(t.grad(a).unwrap(), &numeric, 1e-6, "l1_mean grad");

        let eval_l2 = |x: &[f64]| -> (Tape, Var, Var, Var) {
            let mut t = Tape::new();
            let a = t.param(&x[..12], &[3, 4]);
            let b = t.param(&x[12..], &[12]);
            let l = t.l2_norm_mean(&[a, b]).unwrap();
            (t, l, a, b)
        };
        let f = |x: &[f64]| eval_l2(x).0.value(eval_l2(x).1)[0];
        let (mut t, l, a, b) = eval_l2(&flat);
        t.backward(l).unwrap();
        let mut analytic = t.grad(a).unwrap().to_vec();
        analytic.extend_from_slice(t.grad(b).unwrap());
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-6, "l2_norm_mean grad");
    }

    #[test]
    fn composite_graph_gradcheck() {
        // conv -> tanh -> grid_sample -> linear -> l1, plus a norm penalty:
        // one check over a graph shaped like the real model.
        let mut rng = ChaCha8Rng::seed_from_u64(141);
        let is = vec![1usize, 3, 3, 3];
        let ks = vec![2usize, 1, 3, 3, 3];
        let (ni, nk, nb) = (27usize, 54usize, 2usize);
        let nw = 2usize; // linear [1,2]
        let flat = rand_vec(&mut rng, ni + nk + nb + nw + 1);
        let pts: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-0.7..0.7)).collect();
        let target = rand_vec(&mut rng, 5);
        let eval = |x: &[f64]| -> (Tape, Var, Vec<Var>) {
            let mut t = Tape::new();
            let input = t.param(&x[..ni], &is);
            let kernel = t.param(&x[ni..ni + nk], &ks);
            let bias = t.param(&x[ni + nk..ni + nk + nb], &[2]);
            let w = t.param(&x[ni + nk + nb..ni + nk + nb + nw], &[1, 2]);
            let wb = t.param(&x[ni + nk + nb + nw..], &[1]);
            let conv = t.conv3d(input, kernel, bias, 1, 1).unwrap();
            let act = t.tanh(conv);
            let p = t.constant(pts.clone(), &[5, 3]);
            let s = t.grid_sample(act, p).unwrap();
            let y = t.linear(s, w, wb).unwrap();
            let tgt = t.constant(target.clone(), &[5, 1]);
            let rec = t.l1_mean(y, tgt).unwrap();
            let reg = t.l2_norm_mean(&[conv]).unwrap();
            let reg_s = t.scale(reg, 0.1);
            let loss = t.add(rec, reg_s).unwrap();
            (t, loss, vec![input, kernel, bias, w, wb])
        };
        let f = |x: &[f64]| eval(x).0.value(eval(x).1)[0];
        let (mut t, loss, params) = eval(&flat);
        t.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for p in params {
            analytic.extend_from_slice(t.grad(p).unwrap());
        }
        let numeric = finite_diff(&f, &flat, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-4, "composite grad");
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let lr = 1e-2;
        let mut adam = Adam::new(lr, 0.9, 0.999, 1e-8, &[3]);
        let mut params = [vec![1.0, -2.0, 0.5]];
        let grads = [0.3, -4.0, 1e-3];
        let mut refs: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
        adam.step(&mut refs, &[&grads]).unwrap();
        // Bias-corrected first step is -lr * g/|g| up to eps.
        let want = [1.0 - lr, -2.0 + lr, 0.5 - lr];
        for (got, want) in params[0].iter().zip(want) {
            assert!(
                (got - want).abs() < lr * 1e-4,
                "first step: {got} vs {want}"
            );
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradients_leave_parameters_unchanged() {
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8, &[2, 3]);
        let mut params = vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]];
        let zeros2 = vec![0.0; 2];
        let zeros3 = vec![0.0; 3];
        for _ in 0..2 {
            let mut refs: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
            adam.step(&mut refs, &[&zeros2, &zeros3]).unwrap();
        }
        assert_eq!(params, vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]]);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn adam_zero_learning_rate_is_identity() {
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8, &[2]);
        let mut params = [vec![7.0, -3.0]];
        let grads = [100.0, -5.0];
        let mut refs: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
        adam.step(&mut refs, &[&grads]).unwrap();
        assert_eq!(params[0], vec![7.0, -3.0]);
    }

    #[test]
    fn adam_rejects_mismatched_tensors() {
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8, &[2]);
        let mut params = [vec![1.0, 2.0, 3.0]];
        let grads = [0.0, 0.0, 0.0];
        let mut refs: Vec<&mut [f64]> = params.iter_mut().map(|p| p.as_mut_slice()).collect();
        assert!(adam.step(&mut refs, &[&grads]).is_err());
    }
}
