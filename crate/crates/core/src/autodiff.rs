//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//! Reductions accumulate left to right, which makes gradients
//! bit-reproducible across runs.
//!
//! ```
//! use scda::autodiff::Tape;
//! use scda::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{dims2, Tensor};

/// Lower clamp applied inside [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, weight: Var, bias: Var },
    SoftmaxRows { x: Var, temperature: f64 },
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Gather { x: Var, index: Rc<[Option<usize>]> },
    Reshape(Var),
    Grl { x: Var, lambda: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grl_sign: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grl_sign: -1.0,
        }
    }

    /// Makes every gradient-reversal node on this tape pass gradients
    /// through unchanged in sign. Only useful for mutation testing of
    /// gradient checkers.
    #[doc(hidden)]
    pub fn inject_grl_sign_fault(&mut self) {
        self.grl_sign = 1.0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (model parameter or probe input).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Stop-gradient: a constant copy of `x`'s current value.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds `bias[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("add_bias", self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bj) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bj;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log of `max(x, LOG_CLAMP)`. Clamped entries get zero gradient.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1, zero-padded "same" convolution of `x [n, c, h, w]` with
    /// `weight [o, c, k, k]` (odd `k`) plus `bias [o]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(weight), self.shape(bias))?;
        let (vx, vw, vb) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0.0; g.n * g.o * g.h * g.w];
        for s in 0..g.n {
            for o in 0..g.o {
                let plane = &mut out[(s * g.o + o) * g.hw()..][..g.hw()];
                plane.fill(vb[o]);
                for c in 0..g.c {
                    let src = &vx[(s * g.c + c) * g.hw()..][..g.hw()];
                    g.for_each_tap(|du, dv| {
                        let wv = vw[((o * g.c + c) * g.k + du) * g.k + dv];
                        g.shifted(du, dv, |i, j, len| {
                            for (p, x) in plane[i..i + len].iter_mut().zip(&src[j..j + len]) {
                                *p += wv * x;
                            }
                        });
                    });
                }
            }
        }
        let rg = self.rg(&[x, weight, bias]);
        let value = Tensor::new(vec![g.n, g.o, g.h, g.w], out)?;
        Ok(self.push(value, Op::Conv2d { x, weight, bias }, rg))
    }

    /// Row-wise `softmax(z / temperature)` with max-shift.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        let (m, n) = dims2("softmax_rows", self.shape(x))?;
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n], temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::SoftmaxRows { x, temperature },
            rg,
        ))
    }

    /// Row-wise `log softmax(z)` computed without forming the probabilities.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("log_softmax_rows", self.shape(x))?;
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter() {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::LogSoftmaxRows(x), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = 0.0;
        for v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len.max(1) as f64))
    }

    /// Spatial mean of an `[n × c × h × w]` volume, giving `[n × c]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, hw) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: self.shape(x).to_vec(),
                    reason: "global_average_pool expects [n, c, h, w]".into(),
                })
            }
        };
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for chunk in src.chunks_exact(hw.max(1)).take(n * c) {
            let mut s = 0.0;
            for v in chunk {
                s += v;
            }
            out.push(s / hw as f64);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `out[i] = x.flat[index[i]]`, or `0` where the index is `None`.
    ///
    /// Transposes, permutations, row selection and zero-padded patch
    /// extraction are all expressed through this one primitive.
    pub fn gather(
        &mut self,
        x: Var,
        index: Rc<[Option<usize>]>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("gather index {bad} out of bounds"),
            });
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Selects rows of a rank-2 tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2("gather_rows", self.shape(x))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("row {bad} out of range"),
            });
        }
        let index: Rc<[Option<usize>]> = rows
            .iter()
            .flat_map(|&r| (0..n).map(move |j| Some(r * n + j)))
            .collect();
        self.gather(x, index, vec![rows.len(), n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(x))?;
        let index: Rc<[Option<usize>]> = (0..n)
            .flat_map(|j| (0..m).map(move |i| Some(i * n + j)))
            .collect();
        self.gather(x, index, vec![n, m])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Gradient reversal: identity forward, `-lambda × upstream` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(value, Op::Grl { x, lambda }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let n = self.shape(*bias)[0];
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * s;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(vx) {
                        if *xi > LOG_CLAMP {
                            *o += gi / xi;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (gj, bj) in grow.iter().zip(brow) {
                                s += gj * bj;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gj;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, weight, bias } => {
                let geo = &ConvGeom::new(self.shape(*x), self.shape(*weight), self.shape(*bias))
                    .expect("validated in forward");
                let (vx, vw) = (self.value(*x).data(), self.value(*weight).data());
                let hw = geo.hw();
                self.accumulate(grads, *bias, |gb| {
                    for s in 0..geo.n {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            for gi in &g[(s * geo.o + o) * hw..][..hw] {
                                *gbo += gi;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |gw| {
                    for s in 0..geo.n {
                        for o in 0..geo.o {
                            let gp = &g[(s * geo.o + o) * hw..][..hw];
                            for c in 0..geo.c {
                                let src = &vx[(s * geo.c + c) * hw..][..hw];
                                geo.for_each_tap(|du, dv| {
                                    let mut acc = 0.0;
                                    geo.shifted(du, dv, |i, j, len| {
                                        for (a, b) in gp[i..i + len].iter().zip(&src[j..j + len]) {
                                            acc += a * b;
                                        }
                                    });
                                    gw[((o * geo.c + c) * geo.k + du) * geo.k + dv] += acc;
                                });
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for s in 0..geo.n {
                        for o in 0..geo.o {
                            let gp = &g[(s * geo.o + o) * hw..][..hw];
                            for c in 0..geo.c {
                                let dst = &mut gx[(s * geo.c + c) * hw..][..hw];
                                geo.for_each_tap(|du, dv| {
                                    let wv = vw[((o * geo.c + c) * geo.k + du) * geo.k + dv];
                                    geo.shifted(du, dv, |i, j, len| {
                                        for (d, gi) in dst[j..j + len].iter_mut().zip(&gp[i..i + len]) {
                                            *d += wv * gi;
                                        }
                                    });
                                });
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, temperature } => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let mut dot = 0.0;
                        for (gi, yi) in gr.iter().zip(yr) {
                            dot += gi * yi;
                        }
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot) / temperature;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((yr, gr), or) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let mut gsum = 0.0;
                        for gi in gr {
                            gsum += gi;
                        }
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                self.accumulate(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                gx[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.accumulate(grads, *x, |gx| {
                    for (chunk, gi) in gx.chunks_exact_mut(hw.max(1)).zip(g) {
                        let d = gi / hw as f64;
                        for o in chunk {
                            *o += d;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (i, gi) in index.iter().zip(g) {
                        if let Some(i) = i {
                            gx[*i] += gi;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Grl { x, lambda } => {
                let s = self.grl_sign * lambda;
                self.accumulate(grads, *x, |gx| {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += s * gi;
                    }
                });
            }
        }
    }
}

/// Shapes of a same-padded convolution.
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &[usize], weight: &[usize], bias: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: x.to_vec(),
            right: weight.to_vec(),
        };
        let (&[n, c, h, w], &[o, wc, k, k2]) = (x, weight) else {
            return Err(mismatch());
        };
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(mismatch());
        }
        if bias != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: weight.to_vec(),
                right: bias.to_vec(),
            });
        }
        Ok(ConvGeom { n, c, h, w, o, k })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        for du in 0..self.k {
            for dv in 0..self.k {
                f(du, dv);
            }
        }
    }

    /// Calls `f(out_start, in_start, len)` for each output row segment
    /// whose tap `(du, dv)` lands inside the input plane, top to bottom.
    fn shifted(&self, du: usize, dv: usize, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.k / 2;
        let (h, w) = (self.h as isize, self.w as isize);
        let (su, sv) = (du as isize - r as isize, dv as isize - r as isize);
        let (u0, u1) = ((-su).max(0), (h - su).min(h));
        let (v0, v1) = ((-sv).max(0), (w - sv).min(w));
        if v1 <= v0 {
            return;
        }
        for u in u0..u1 {
            let o = (u * w + v0) as usize;
            let i = ((u + su) * w + v0 + sv) as usize;
            f(o, i, (v1 - v0) as usize);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted `softmax(row / temperature)` in place.
pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bj) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bj;
            }
        }
    }
    out
}
