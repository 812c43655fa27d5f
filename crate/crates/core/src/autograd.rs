//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Trainable tensors live in a
//! [`ParamStore`]; a graph copies the parameters it touches into leaf nodes and
//! reports their gradients back by [`ParamId`].
//!
//! Complex intermediates are carried as real tensors with a leading axis of
//! extent 2 (real part, imaginary part), so every gradient is an ordinary real
//! gradient of the real parameters that produced it.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::contract::Contraction;
use crate::error::{shape_err, Error, Result};
use crate::spectral::{fft_in_place, half_len, irfft_column, rfft_column};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::wavelet::{mw_decompose, mw_reconstruct, FilterBank};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// All trainable tensors of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into every parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.grads.len() != self.params.len() {
            return Err(Error::InvalidArgument("gradient set belongs to another store".into()));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Runs `graph.backward(loss)` and accumulates the result.
    pub fn backward(&mut self, graph: &Graph, loss: Var) -> Result<()> {
        let grads = graph.backward(loss, self)?;
        self.accumulate(&grads)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradients from one backward sweep, aligned with a store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
    names: Vec<String>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            names: store.params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Maps (output gradient, parent values, output value, which parents need a
/// gradient) to one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf that may require gradient without being a stored parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value(id).clone(), true, Some(id));
        self.param_nodes.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            param,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            param: None,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of scalar `loss` with respect to every parameter of `store`.
    /// Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(store);
        for (id, g) in self.backward_all(loss)? {
            if id.0 >= out.grads.len() {
                return Err(Error::InvalidArgument("graph parameter not in store".into()));
            }
            out.grads[id.0].add_assign(&g)?;
        }
        Ok(out)
    }

    /// Gradient of scalar `loss` with respect to the leaf `v`, or zeros.
    pub fn grad_of_leaf(&self, loss: Var, v: Var) -> Result<Tensor> {
        let grads = self.sweep(loss)?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        let grads = self.sweep(loss)?;
        Ok(self
            .nodes
            .iter()
            .zip(grads)
            .filter_map(|(n, g)| Some((n.param?, g?)))
            .collect())
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = bw(&g, &parents, &node.value, &needs)?;
            for ((&p, need), pgrad) in node.parents.iter().zip(needs).zip(pg) {
                if !need {
                    continue;
                }
                let Some(pgrad) = pgrad else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pgrad)?,
                    slot @ None => *slot = Some(pgrad),
                }
            }
        }
        Ok(grads)
    }

    // ---- element-wise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(v, &[a, b], Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(v, &[a, b], Box::new(|g, _, _, _| Ok(vec![Some(g.clone()), Some(g.scale(-1.0))]))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(
            v,
            &[a, b],
            Box::new(|g, p, _, need| {
                Ok(vec![
                    need[0].then(|| g.zip_map(p[1], |g, y| g * y)).transpose()?,
                    need[1].then(|| g.zip_map(p[0], |g, x| g * x)).transpose()?,
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(v, &[a], Box::new(move |g, _, _, _| Ok(vec![Some(g.scale(c))])))
    }

    /// Sum of several same-shape tensors.
    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("sum_n of nothing".into()));
        };
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            acc.add_assign(self.value(p))?;
        }
        let n = parts.len();
        Ok(self.push_op(acc, parts, Box::new(move |g, _, _, _| Ok(vec![Some(g.clone()); n]))))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(
            v,
            &[a],
            Box::new(|g, _, y, _| Ok(vec![Some(g.zip_map(y, |g, y| g * (1.0 - y * y))?)])),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()));
        self.push_op(
            v,
            &[a],
            Box::new(|g, p, _, _| {
                let dx = p[0].map(|x| {
                    let t = (C * (x + A * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
                });
                Ok(vec![Some(g.zip_map(&dx, |g, d| g * d)?)])
            }),
        )
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut y = x.clone();
        {
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..n {
                        let e = (d[at(j)] - m).exp();
                        d[at(j)] = e;
                        s += e;
                    }
                    for j in 0..n {
                        d[at(j)] /= s;
                    }
                }
            }
        }
        Ok(self.push_op(
            y,
            &[a],
            Box::new(move |g, _, y, _| {
                let mut out = g.clone();
                let (gd, yd) = (g.data(), y.data());
                let od = out.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            od[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                Ok(vec![Some(out)])
            }),
        ))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(
            v,
            &[a],
            Box::new(|g, p, _, _| Ok(vec![Some(Tensor::full(p[0].shape(), g.item()))])),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ---- linear algebra ----

    pub fn contract(&mut self, a: Var, b: Var, spec: &Contraction) -> Result<Var> {
        let v = spec.apply(self.value(a), self.value(b))?;
        let (ga, gb) = (spec.grad_a(), spec.grad_b());
        Ok(self.push_op(
            v,
            &[a, b],
            Box::new(move |g, p, _, need| {
                Ok(vec![
                    need[0].then(|| ga.apply(g, p[1])).transpose()?,
                    need[1].then(|| gb.apply(p[0], g)).transpose()?,
                ])
            }),
        ))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let [m, k] = va.dims2("matmul")?;
        let [k2, n] = vb.dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner extents {k} (axis 1 of a) vs {k2} (axis 0 of b)"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(
            v,
            &[a, b],
            Box::new(move |g, p, _, need| {
                let ga = if need[0] {
                    let mut d = vec![0.0; m * k];
                    matmul_bt_into(g.data(), p[1].data(), &mut d, m, n, k);
                    Some(Tensor::new(&[m, k], d)?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let mut d = vec![0.0; k * n];
                    matmul_at_into(p[0].data(), g.data(), &mut d, m, k, n);
                    Some(Tensor::new(&[k, n], d)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push_op(v, &[a], Box::new(|g, _, _, _| Ok(vec![Some(g.transpose()?)]))))
    }

    /// Multiplies row `t` of `x[L×D]` by `w[t]`, where `w` is `L×1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [l, d] = xv.dims2("scale_rows")?;
        if wv.shape() != [l, 1] {
            return shape_err("scale_rows", format!("weights {:?} for rows {l}", wv.shape()));
        }
        let mut out = xv.clone();
        for t in 0..l {
            let s = wv.data()[t];
            out.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push_op(
            out,
            &[x, w],
            Box::new(move |g, p, _, need| {
                let gx = need[0]
                    .then(|| {
                        let mut gx = g.clone();
                        for t in 0..l {
                            let s = p[1].data()[t];
                            gx.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|v| *v *= s);
                        }
                        gx
                    });
                let gw = need[1]
                    .then(|| {
                        let gd = g.data();
                        let xd = p[0].data();
                        let s: Vec<f64> = (0..l)
                            .map(|t| (0..d).map(|j| gd[t * d + j] * xd[t * d + j]).sum())
                            .collect();
                        Tensor::new(&[l, 1], s)
                    })
                    .transpose()?;
                Ok(vec![gx, gw])
            }),
        ))
    }

    /// Column `col` of a matrix, as `L×1`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        let [l, d] = xv.dims2("column")?;
        if col >= d {
            return Err(Error::Axis { axis: col, rank: d });
        }
        let v = Tensor::new(&[l, 1], (0..l).map(|t| xv.data()[t * d + col]).collect())?;
        Ok(self.push_op(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[l, d]);
                for t in 0..l {
                    gx.data_mut()[t * d + col] = g.data()[t];
                }
                Ok(vec![Some(gx)])
            }),
        ))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(
            v,
            &[a],
            Box::new(|g, p, _, _| Ok(vec![Some(g.clone().reshape(p[0].shape())?)])),
        ))
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_first(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_first(start, end)?;
        Ok(self.push_op(
            v,
            &[a],
            Box::new(move |g, p, _, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let inner: usize = p[0].shape()[1..].iter().product();
                gx.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
                Ok(vec![Some(gx)])
            }),
        ))
    }

    /// Sub-tensor `a[i]`, dropping the first axis.
    pub fn index_first(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.slice_first(a, i, i + 1)?;
        let shape = self.value(a).shape()[1..].to_vec();
        if shape.is_empty() {
            return Ok(s);
        }
        self.reshape(s, &shape)
    }

    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_first(&vals)?;
        let rows: Vec<usize> = vals.iter().map(|t| t.shape()[0]).collect();
        Ok(self.push_op(
            v,
            parts,
            Box::new(move |g, p, _, need| {
                let mut out = Vec::with_capacity(rows.len());
                let mut at = 0;
                for (i, &r) in rows.iter().enumerate() {
                    out.push(need[i].then(|| g.slice_first(at, at + r)).transpose()?);
                    at += r;
                }
                let _ = p;
                Ok(out)
            }),
        ))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.value(p).shape());
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat_first(&lifted)
    }

    // ---- sequence ops ----

    /// Length-preserving moving average over axis 0 of `x[L×D]`, replicate
    /// padded with `⌊k/2⌋` rows in front and `k−1−⌊k/2⌋` behind.
    pub fn avg_pool_1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel == 0 {
            return Err(Error::InvalidArgument("avg_pool_1d kernel must be positive".into()));
        }
        let xv = self.value(x);
        let [l, d] = xv.dims2("avg_pool_1d")?;
        let v = Tensor::new(&[l, d], moving_average(xv.data(), l, d, kernel))?;
        Ok(self.push_op(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                Ok(vec![Some(Tensor::new(&[l, d], moving_average_grad(g.data(), l, d, kernel))?)])
            }),
        ))
    }

    /// Selected half-spectrum bins of each column of `x[L×D]`, as
    /// `2×M×D` (real parts, imaginary parts).
    pub fn rfft_modes(&mut self, x: Var, modes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let [l, d] = xv.dims2("rfft_modes")?;
        let h = half_len(l);
        if let Some(&bad) = modes.iter().find(|&&m| m >= h) {
            return shape_err("rfft_modes", format!("mode {bad} beyond half-spectrum of length {l}"));
        }
        let m = modes.len();
        let mut out = vec![0.0; 2 * m * d];
        let mut col = vec![0.0; l];
        for c in 0..d {
            for (t, v) in col.iter_mut().enumerate() {
                *v = xv.data()[t * d + c];
            }
            let spec = rfft_column(&col);
            for (r, &mi) in modes.iter().enumerate() {
                out[r * d + c] = spec[mi].re;
                out[m * d + r * d + c] = spec[mi].im;
            }
        }
        let v = Tensor::new(&[2, m, d], out)?;
        let modes = modes.to_vec();
        Ok(self.push_op(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut gx = vec![0.0; l * d];
                let mut buf = vec![Complex64::new(0.0, 0.0); l];
                for c in 0..d {
                    buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                    for (r, &mi) in modes.iter().enumerate() {
                        buf[mi] += Complex64::new(gd[r * d + c], gd[m * d + r * d + c]);
                    }
                    fft_in_place(&mut buf, true);
                    for t in 0..l {
                        gx[t * d + c] = buf[t].re;
                    }
                }
                Ok(vec![Some(Tensor::new(&[l, d], gx)?)])
            }),
        ))
    }

    /// Zero-pads `2×M×D` selected bins into a half-spectrum and inverts to
    /// a real `len×D` series.
    pub fn irfft_modes(&mut self, y: Var, modes: &[usize], len: usize) -> Result<Var> {
        let yv = self.value(y);
        let (m, d) = match yv.shape()[..] {
            [2, m, d] if m == modes.len() => (m, d),
            _ => return shape_err("irfft_modes", format!("expected 2×{}×D, got {:?}", modes.len(), yv.shape())),
        };
        let h = half_len(len);
        if let Some(&bad) = modes.iter().find(|&&mi| mi >= h) {
            return shape_err("irfft_modes", format!("mode {bad} beyond half-spectrum of length {len}"));
        }
        let mut out = vec![0.0; len * d];
        let mut spec = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..d {
            spec.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
            for (r, &mi) in modes.iter().enumerate() {
                spec[mi] = Complex64::new(yv.data()[r * d + c], yv.data()[m * d + r * d + c]);
            }
            for (t, v) in irfft_column(&spec, len).into_iter().enumerate() {
                out[t * d + c] = v;
            }
        }
        let v = Tensor::new(&[len, d], out)?;
        let modes = modes.to_vec();
        Ok(self.push_op(
            v,
            &[y],
            Box::new(move |g, _, _, _| {
                let mut gy = vec![0.0; 2 * m * d];
                let mut col = vec![0.0; len];
                for c in 0..d {
                    for (t, v) in col.iter_mut().enumerate() {
                        *v = g.data()[t * d + c];
                    }
                    let gs = rfft_column(&col);
                    for (r, &mi) in modes.iter().enumerate() {
                        let w = if mi == 0 || 2 * mi == len { 1.0 } else { 2.0 } / len as f64;
                        gy[r * d + c] = w * gs[mi].re;
                        gy[m * d + r * d + c] = w * gs[mi].im;
                    }
                }
                Ok(vec![Some(Tensor::new(&[2, m, d], gy)?)])
            }),
        ))
    }

    /// One multiwavelet decomposition step of `x[2T×k×D]`, returned stacked
    /// as `2×T×k×D` (coarse, detail).
    pub fn wavelet_split(&mut self, x: Var, bank: &FilterBank) -> Result<Var> {
        let (s, d) = mw_decompose(self.value(x), bank)?;
        let mut shape = vec![2];
        shape.extend_from_slice(s.shape());
        let mut data = s.into_data();
        data.extend_from_slice(d.data());
        let v = Tensor::new(&shape, data)?;
        let bank = bank.clone();
        Ok(self.push_op(
            v,
            &[x],
            Box::new(move |g, _, _, _| {
                let gs = g.slice_first(0, 1)?.reshape(&g.shape()[1..])?;
                let gd = g.slice_first(1, 2)?.reshape(&g.shape()[1..])?;
                Ok(vec![Some(mw_reconstruct(&gs, &gd, &bank)?)])
            }),
        ))
    }

    /// Inverse step: coarse and detail `T×k×D` back to `2T×k×D`.
    pub fn wavelet_merge(&mut self, coarse: Var, detail: Var, bank: &FilterBank) -> Result<Var> {
        let v = mw_reconstruct(self.value(coarse), self.value(detail), bank)?;
        let bank = bank.clone();
        Ok(self.push_op(
            v,
            &[coarse, detail],
            Box::new(move |g, _, _, _| {
                let (gs, gd) = mw_decompose(g, &bank)?;
                Ok(vec![Some(gs), Some(gd)])
            }),
        ))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn pool_offsets(kernel: usize) -> (isize, isize) {
    let front = (kernel / 2) as isize;
    let back = kernel as isize - 1 - front;
    (front, back)
}

pub(crate) fn moving_average(x: &[f64], l: usize, d: usize, kernel: usize) -> Vec<f64> {
    let (front, back) = pool_offsets(kernel);
    let last = l as isize - 1;
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; l * d];
    for t in 0..l as isize {
        let row = &mut out[t as usize * d..(t as usize + 1) * d];
        for j in (t - front)..=(t + back) {
            let src = j.clamp(0, last) as usize;
            for (o, &v) in row.iter_mut().zip(&x[src * d..(src + 1) * d]) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

fn moving_average_grad(g: &[f64], l: usize, d: usize, kernel: usize) -> Vec<f64> {
    let (front, back) = pool_offsets(kernel);
    let last = l as isize - 1;
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; l * d];
    for t in 0..l as isize {
        let grow = &g[t as usize * d..(t as usize + 1) * d];
        for j in (t - front)..=(t + back) {
            let dst = j.clamp(0, last) as usize;
            for (o, &v) in out[dst * d..(dst + 1) * d].iter_mut().zip(grow) {
                *o += v * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_grads, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_and_square_grads() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let s = g.sum(v);
        let grads = g.backward(s, &store).unwrap();
        assert_eq!(grads.get(p).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half, &store).unwrap();
        assert_eq!(grads.get(p).data(), store.value(p).data());
    }

    #[test]
    fn unreachable_params_get_zero_and_grads_accumulate() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::ones(&[2])).unwrap();
        let q = store.add("q", Tensor::ones(&[2])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.param(&store, p);
            let s = g.sum(v);
            store.backward(&g, s).unwrap();
        }
        assert_eq!(store.param(p).grad.data(), &[2.0, 2.0]);
        assert_eq!(store.param(q).grad.data(), &[0.0, 0.0]);
        store.zero_grad();
        assert_eq!(store.param(p).grad.data(), &[0.0, 0.0]);
        assert!(store.add("p", Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let c = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(c, &store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_never_collect_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::ones(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(&[2, 2]));
        let v = g.param(&store, p);
        let y = g.matmul(c, v).unwrap();
        let s = g.sum(y);
        assert!(!g.requires_grad(c));
        assert!(g.grad_of_leaf(s, c).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12 && g.value(y).data()[1] < 1e-12);
        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { axis: 1, rank: 1 })));
    }

    #[test]
    fn tanh_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 40.0]).unwrap());
        let y = g.tanh(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1], vec![1., 2., 3., 4.]).unwrap());
        let y = g.avg_pool_1d(x, 3).unwrap();
        let want = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let id = g.avg_pool_1d(x, 1).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());
        assert!(g.avg_pool_1d(x, 0).is_err());
        let c = g.constant(Tensor::full(&[7, 2], 0.3));
        for k in [2, 5, 12, 24] {
            let y = g.avg_pool_1d(c, k).unwrap();
            assert_eq!(g.value(y).shape(), &[7, 2]);
            assert!(g.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
    }

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(n, s)| store.add(*n, Tensor::randn(s, 1.0, &mut rng)).unwrap())
            .collect();
        (store, ids)
    }

    fn projection(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let c = g.constant(Tensor::randn(g.value(y).shape(), 1.0, &mut rng));
        let p = g.mul(y, c).unwrap();
        g.sum(p)
    }

    #[test]
    fn elementwise_and_softmax_gradients() {
        for seed in 0..20 {
            let (store, ids) = random_store(&[("x", &[8]), ("m", &[3, 4])], seed);
            let report = check_param_grads(&store, GradCheck::default(), |g, st| {
                let x = g.param(st, ids[0]);
                let s = g.softmax(x, 0)?;
                let t = g.tanh(x);
                let ge = g.gelu(x);
                let a = g.mul(s, t)?;
                let b = g.add(a, ge)?;
                let l1 = projection(g, b, seed);
                let m = g.param(st, ids[1]);
                let sm = g.softmax(m, 1)?;
                let l2 = projection(g, sm, seed + 1);
                g.sum_n(&[l1, l2])
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn linear_algebra_gradients() {
        for seed in 0..20 {
            let (store, ids) = random_store(
                &[("a", &[4, 5]), ("b", &[5, 3]), ("q", &[3, 4]), ("r", &[3, 4, 2]), ("w", &[4, 1])],
                seed,
            );
            let spec = Contraction::parse("md,mde->me").unwrap();
            let report = check_param_grads(&store, GradCheck::default(), |g, st| {
                let a = g.param(st, ids[0]);
                let b = g.param(st, ids[1]);
                let ab = g.matmul(a, b)?;
                let abt = g.matmul_bt(a, a)?;
                let q = g.param(st, ids[2]);
                let r = g.param(st, ids[3]);
                let y = g.contract(q, r, &spec)?;
                let w = g.param(st, ids[4]);
                let sc = g.scale_rows(a, w)?;
                let col = g.column(ab, 1)?;
                let l = [
                    projection(g, ab, seed),
                    projection(g, abt, seed + 1),
                    projection(g, y, seed + 2),
                    projection(g, sc, seed + 3),
                    projection(g, col, seed + 4),
                ];
                g.sum_n(&l)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn sequence_op_gradients() {
        for seed in 0..20 {
            let (store, ids) = random_store(&[("x", &[16, 3]), ("y", &[2, 4, 3])], seed);
            let bank = crate::wavelet::legendre_filters(2).unwrap();
            let report = check_param_grads(&store, GradCheck::default(), |g, st| {
                let x = g.param(st, ids[0]);
                let p = g.avg_pool_1d(x, 5)?;
                let p2 = g.avg_pool_1d(x, 12)?;
                let f = g.rfft_modes(x, &[0, 2, 5, 8])?;
                let y = g.param(st, ids[1]);
                let inv = g.irfft_modes(y, &[0, 3, 7, 8], 16)?;
                let packed = g.reshape(x, &[8, 2, 3])?;
                let split = g.wavelet_split(packed, &bank)?;
                let s = g.index_first(split, 0)?;
                let d = g.index_first(split, 1)?;
                let merged = g.wavelet_merge(d, s, &bank)?;
                let sl = g.slice_first(x, 3, 9)?;
                let cat = g.concat_first(&[sl, x])?;
                let l = [
                    projection(g, p, seed),
                    projection(g, p2, seed + 1),
                    projection(g, f, seed + 2),
                    projection(g, inv, seed + 3),
                    projection(g, merged, seed + 4),
                    projection(g, cat, seed + 5),
                ];
                g.sum_n(&l)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let (store, ids) = random_store(&[("x", &[16, 3])], 4);
        let run = || {
            let mut g = Graph::new();
            let x = g.param(&store, ids[0]);
            let f = g.rfft_modes(x, &[0, 1, 4]).unwrap();
            let y = g.irfft_modes(f, &[0, 1, 4], 16).unwrap();
            let t = g.tanh(y);
            let s = g.sum(t);
            g.backward(s, &store).unwrap().get(ids[0]).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn contract_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = Contraction::parse("md,mde->me").unwrap();
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let a2 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let (al, be) = (0.7, -1.3);
        let lhs = spec
            .apply(&a.zip_map(&a2, |x, y| al * x + be * y).unwrap(), &b)
            .unwrap();
        let rhs = spec
            .apply(&a, &b)
            .unwrap()
            .zip_map(&spec.apply(&a2, &b).unwrap(), |x, y| al * x + be * y)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
