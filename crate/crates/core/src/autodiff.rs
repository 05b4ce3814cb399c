//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and whatever the backward rule needs. Nodes are appended in evaluation
//! order, so insertion order is a topological order and [`Graph::backward`]
//! walks the node list once in reverse. A graph is built fresh for every
//! forward pass and consumed by its backward pass.

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f32),
    MulScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    LogSumExpRows { input: Var, softmax: Vec<f32> },
    CrossEntropy { input: Var, targets: Vec<usize>, softmax: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MulScalar(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Relu(a) | Exp(a) | Log(a) | Scale(a, _) | Sum(a) | Mean(a) => vec![*a],
            MaxPool { input, .. }
            | L2NormalizeRows { input, .. }
            | LogSumExpRows { input, .. }
            | CrossEntropy { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape when
    /// the loss does not reach `v`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(values: &[f32], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        tensor::matrix_dims(self.value(v), what)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul lhs")?;
        let (k2, n) = self.dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    /// Pairwise dot products of two row sets: `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("row sets of width {k} and {k2}")));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(vec![m, n], out, Op::MatMulNt(a, b), "matmul_nt")
    }

    /// `scale · a bᵀ` for a learnable scalar `scale`.
    pub fn scaled_dot(&mut self, a: Var, b: Var, scale: Var) -> Result<Var> {
        let sim = self.matmul_nt(a, b)?;
        self.mul_scalar(sim, scale)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let out = tensor::transpose(self.value(a).data(), m, n);
        self.record(vec![n, m], out, Op::Transpose(a), "transpose")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(shape, out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds `bias[n]` to every row of `x[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_bias input")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::ShapeMismatch(format!("bias of length {} for {m}x{n} input", b.len())));
        }
        let b = b.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        self.record(vec![m, n], out, Op::AddBias(x, bias), "add_bias")
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out: Vec<f32> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.record(shape, out, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f32::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f32::ln)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", move |x| x * c)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch(format!("scalar factor has shape {:?}", self.value(s).shape())));
        }
        let c = self.value(s).item();
        self.map(a, Op::MulScalar(a, s), "mul_scalar", move |x| x * c)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| f64::from(x)).sum();
        self.record(vec![1], vec![s as f32], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / t.len() as f64;
        self.record(vec![1], vec![s as f32], Op::Mean(a), "mean")
    }

    /// Max over consecutive row groups: `x[groups·n, c] → [groups, c]`.
    ///
    /// Ties resolve to the lowest row index within the group; the gradient
    /// flows only to that row.
    pub fn max_pool(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (rows, c) = self.dims(x, "max_pool")?;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::ShapeMismatch(format!("{rows} rows do not split into {groups} groups")));
        }
        let n = rows / groups;
        let data = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            let am = &mut argmax[g * c..(g + 1) * c];
            for r in g * n..(g + 1) * n {
                for (j, &v) in data[r * c..(r + 1) * c].iter().enumerate() {
                    if v > o[j] {
                        o[j] = v;
                        am[j] = r;
                    }
                }
            }
        }
        self.record(vec![groups, c], out, Op::MaxPool { input: x, argmax }, "max_pool")
    }

    /// Scales every row of a matrix (or a single vector) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in t.rows() {
            let nr = tensor::norm(row);
            if !(nr > tensor::MIN_NORM) {
                return Err(Error::DegenerateEmbedding(nr));
            }
            out.extend(row.iter().map(|&v| (f64::from(v) / nr) as f32));
            norms.push(nr);
        }
        let shape = t.shape().to_vec();
        self.record(shape, out, Op::L2NormalizeRows { input: x, norms }, "l2_normalize")
    }

    /// Row-wise `log Σ exp`, stabilized by subtracting the row max.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "logsumexp")?;
        let mut softmax = vec![0.0f32; m * n];
        let mut out = Vec::with_capacity(m);
        for (i, row) in self.value(x).rows().enumerate() {
            let (lse, probs) = softmax_row(row);
            softmax[i * n..(i + 1) * n].copy_from_slice(&probs);
            out.push(lse as f32);
        }
        self.record(vec![m], out, Op::LogSumExpRows { input: x, softmax }, "logsumexp")
    }

    /// Summed cross-entropy of `logits[m,n]` against one target class per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::ShapeMismatch(format!("target {t} out of range for {n} classes")));
        }
        let mut softmax = vec![0.0f32; m * n];
        let mut total = 0.0f64;
        for (i, row) in self.value(logits).rows().enumerate() {
            let (lse, probs) = softmax_row(row);
            softmax[i * n..(i + 1) * n].copy_from_slice(&probs);
            total += lse - f64::from(row[targets[i]]);
        }
        let op = Op::CrossEntropy { input: logits, targets: targets.to_vec(), softmax };
        self.record(vec![1], vec![total as f32], op, "cross_entropy")
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphAlreadyConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, delta) in self.vjp(id, &g) {
                accumulate(&mut grads[input.0], delta);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let is_param = node.requires_grad && matches!(node.op, Op::Leaf);
            out.push(match (is_param, g) {
                (true, Some(g)) => {
                    check_finite(&g, "backward")?;
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of node `id` for each input that requires grad.
    fn vjp(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[id];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2();
                let n = val(b).dims2().1;
                if wants(a) {
                    out.push((*a, gemm_nt(g, val(b).data(), m, n, k)));
                }
                if wants(b) {
                    out.push((*b, gemm_tn(val(a).data(), g, m, k, n)));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(a).dims2();
                let n = val(b).dims2().0;
                if wants(a) {
                    out.push((*a, gemm_nn(g, val(b).data(), m, n, k)));
                }
                if wants(b) {
                    out.push((*b, gemm_tn(g, val(a).data(), m, n, k)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(a).dims2();
                out.push((*a, tensor::transpose(g, n, m)));
            }
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((*a, g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect()));
                }
                if wants(b) {
                    out.push((*b, g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    out.push((*x, g.to_vec()));
                }
                if wants(bias) {
                    let n = val(bias).len();
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += f64::from(v));
                    }
                    out.push((*bias, acc.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                out.push((*a, g.iter().zip(y).map(|(&gv, &yv)| if yv > 0.0 { gv } else { 0.0 }).collect()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                out.push((*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()));
            }
            Op::Log(a) => {
                out.push((*a, g.iter().zip(val(a).data()).map(|(gv, xv)| gv / xv).collect()));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|x| x * c).collect())),
            Op::MulScalar(a, s) => {
                if wants(a) {
                    let c = val(s).item();
                    out.push((*a, g.iter().map(|x| x * c).collect()));
                }
                if wants(s) {
                    let ds: f64 = g.iter().zip(val(a).data()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
                    out.push((*s, vec![ds as f32]));
                }
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(a).len()])),
            Op::Mean(a) => {
                let n = val(a).len();
                out.push((*a, vec![(f64::from(g[0]) / n as f64) as f32; n]));
            }
            Op::MaxPool { input, argmax } => {
                let c = node.value.dims2().1;
                let mut d = vec![0.0f32; val(input).len()];
                for (idx, &r) in argmax.iter().enumerate() {
                    d[r * c + idx % c] += g[idx];
                }
                out.push((*input, d));
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let n = y.dims2().1;
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &nr) in y.rows().zip(g.chunks_exact(n)).zip(norms) {
                    let proj = tensor::dot(yr, gr);
                    d.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| ((f64::from(gv) - f64::from(yv) * proj) / nr) as f32),
                    );
                }
                out.push((*input, d));
            }
            Op::LogSumExpRows { input, softmax } => {
                let n = val(input).dims2().1;
                let d = softmax
                    .chunks_exact(n)
                    .zip(g)
                    .flat_map(|(p, &gv)| p.iter().map(move |&pv| pv * gv))
                    .collect();
                out.push((*input, d));
            }
            Op::CrossEntropy { input, targets, softmax } => {
                let n = val(input).dims2().1;
                let mut d: Vec<f32> = softmax.iter().map(|p| p * g[0]).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= g[0];
                }
                out.push((*input, d));
            }
        }
        out
    }
}

/// Stable `(log Σ exp(row), softmax(row))`.
fn softmax_row(row: &[f32]) -> (f64, Vec<f32>) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lse = max + z.ln();
    (lse, exps.iter().map(|e| (e / z) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| (rng.normal() * scale) as f32).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn logsumexp_of_equal_logits() {
        for n in [1usize, 3, 8] {
            let mut g = Graph::new();
            let x = g.parameter(Tensor::matrix(1, n, vec![0.7; n]).unwrap());
            let l = g.logsumexp_rows(x).unwrap();
            let s = g.sum(l).unwrap();
            let grads = g.backward(s).unwrap();
            for &v in grads.get(x).unwrap().data() {
                assert!((v - 1.0 / n as f32).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn logsumexp_survives_large_logits() {
        let mut g = Graph::new();
        // logits of a unit-norm similarity at τ = 0.01
        let x = g.constant(Tensor::matrix(1, 3, vec![100.0, 99.0, -100.0]).unwrap());
        let l = g.logsumexp_rows(x).unwrap();
        let v = g.value(l).item() as f64;
        let expect = 100.0 + (1.0 + (-1.0f64).exp() + (-200.0f64).exp()).ln();
        assert!((v - expect).abs() < 1e-4);
    }

    #[test]
    fn backward_twice_fails() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::scalar(1.0));
        let y = g.exp(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphAlreadyConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_caught_at_op_boundary() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
        let big = g.constant(Tensor::vector(vec![1000.0]).unwrap());
        assert!(matches!(g.exp(big), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.parameter(Tensor::scalar(5.0));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let m = g.max_pool(x, 1).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(4, 0);
        let x = rand_tensor(&mut rng, &[6, 5], 1.0);
        let run = || {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let r = g.relu(v).unwrap();
            let n = g.l2_normalize_rows(r).unwrap();
            let l = g.logsumexp_rows(n).unwrap();
            g.value(l).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
