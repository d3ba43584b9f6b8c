//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! graph. Nodes are never mutated afterwards, so a graph can be
//! differentiated any number of times, from any root, with identical results.

use super::params::{GradMap, ParamSet, ParamVars};
use super::tensor::{broadcast_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSoftmax(Var),
    Mean { input: Var, axis: Option<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any differentiable leaf is upstream of this node.
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind every entry of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> ParamVars {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
            .collect()
    }

    /// Bind every entry of `params` as a constant.
    pub fn bind_constant(&mut self, params: &ParamSet) -> ParamVars {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
            .collect()
    }

    /// Current values of a set of bound parameters.
    pub fn values_of(&self, vars: &ParamVars) -> ParamSet {
        vars.iter()
            .map(|(name, v)| (name.to_string(), self.value(v).clone()))
            .collect()
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: op_name,
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), op, tracked))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, factor), tracked)
    }

    /// `a - b`, composed from `add` and `scale`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let tracked = self.tracked(&[a]);
        self.push(out, op, tracked)
    }

    /// Log-softmax over the last axis (per row for matrices).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let width = *t.shape().last().expect("non-empty shape");
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::LogSoftmax(a), tracked)
    }

    /// Mean over every element, producing a scalar of shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(m), Op::Mean { input: a, axis: None }, tracked)
    }

    /// Mean over one axis, keeping that axis with length 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "mean axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Mean {
                input: a,
                axis: Some(axis),
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape).map_err(|_| Error::Shape {
            op: "reshape",
            left: self.shape(a).to_vec(),
            right: shape.to_vec(),
        })?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), tracked))
    }

    /// Value of a scalar root.
    pub fn forward_eval(&self, root: Var) -> Result<f64> {
        let t = self.value(root);
        if !t.is_scalar() {
            return Err(Error::contract(format!(
                "graph root must be scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    /// Gradients of a scalar root with respect to `wrt`.
    ///
    /// Parameters that do not influence the root get exact zeros.
    pub fn backward(&self, root: Var, wrt: &ParamVars) -> Result<GradMap> {
        self.forward_eval(root)?;
        let seed = Tensor::scalar(1.0).reshaped(self.shape(root))?;
        self.backward_seeded(root, seed, wrt)
    }

    /// Vector-Jacobian product: gradients of `<seed, root>` with respect to `wrt`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor, wrt: &ParamVars) -> Result<GradMap> {
        let vars: Vec<Var> = wrt.iter().map(|(_, v)| v).collect();
        let grads = self.vjp(root, seed, &vars)?;
        Ok(wrt
            .names()
            .map(str::to_string)
            .zip(grads)
            .collect())
    }

    /// Gradients of a scalar root with respect to arbitrary nodes.
    pub fn grad(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.forward_eval(root)?;
        let seed = Tensor::scalar(1.0).reshaped(self.shape(root))?;
        self.vjp(root, seed, wrt)
    }

    fn vjp(&self, root: Var, seed: Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape {
                op: "backward seed",
                left: seed.shape().to_vec(),
                right: self.shape(root).to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed.into_data());
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                match adj.get(v.0).and_then(|a| a.clone()) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].tracked {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    let bd = tb.data();
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bd[p * n + j];
                            }
                        }
                    }
                    accumulate(adj, a, da);
                }
                if self.nodes[b.0].tracked {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    let ad = ta.data();
                    for i in 0..m {
                        if g[i * n..(i + 1) * n].iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    accumulate(adj, b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].tracked {
                        let reduced = reduce_broadcast(g, self.shape(v), out.shape());
                        accumulate(adj, v, reduced);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if !self.nodes[v.0].tracked {
                        continue;
                    }
                    let os = self.shape(other);
                    let od = self.value(other).data();
                    let prod: Vec<f64> = if os == out.shape() {
                        g.iter().zip(od).map(|(x, y)| x * y).collect()
                    } else {
                        let map = broadcast_map(os, out.shape());
                        g.iter().zip(&map).map(|(x, &j)| x * od[j]).collect()
                    };
                    let reduced = reduce_broadcast(&prod, self.shape(v), out.shape());
                    accumulate(adj, v, reduced);
                }
            }
            Op::Scale(a, factor) => {
                accumulate(adj, a, g.iter().map(|v| v * factor).collect());
            }
            Op::Relu(a) => {
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(adj, a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(adj, a, d);
            }
            Op::LogSoftmax(a) => {
                let width = *out.shape().last().expect("non-empty shape");
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(width).zip(out.data().chunks(width)) {
                    let gsum: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * gsum));
                }
                accumulate(adj, a, d);
            }
            Op::Mean { input, axis: None } => {
                let n = self.value(input).numel();
                accumulate(adj, input, vec![g[0] / n as f64; n]);
            }
            Op::Mean {
                input,
                axis: Some(axis),
            } => {
                let shape = self.shape(input);
                let (outer, len, inner) = axis_split(shape, axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                accumulate(adj, input, d);
            }
            Op::Reshape(a) => accumulate(adj, a, g.to_vec()),
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, grad: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(grad).for_each(|(e, g)| *e += g),
        slot @ None => *slot = Some(grad),
    }
}

fn reduce_broadcast(g: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return g.to_vec();
    }
    let map = broadcast_map(in_shape, out_shape);
    let mut r = vec![0.0; in_shape.iter().product()];
    for (gv, &j) in g.iter().zip(&map) {
        r[j] += gv;
    }
    r
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
