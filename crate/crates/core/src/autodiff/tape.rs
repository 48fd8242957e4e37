use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    /// Heaviside step; derivative treated as zero everywhere.
    Step(Var),
    Exp(Var),
    Log(Var),
    Reciprocal(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Sigmoid(a)
            | Relu(a)
            | Step(a)
            | Exp(a)
            | Log(a)
            | Reciprocal(a)
            | LogSoftmax(a)
            | Sum(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | BroadcastScalar(a) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Classification target for [`Tape::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Integer class per row.
    Labels(&'a [usize]),
    /// Probability vector per row (each row non-negative, summing to 1).
    Soft(&'a Tensor),
}

/// Tolerance on the row sums of soft targets.
pub const SOFT_TARGET_TOL: f64 = 1e-9;

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`; names missing from `self` are inserted.
    pub fn add_scaled(&mut self, scale: f64, other: &GradientMap) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc.axpy(scale, g)?,
                None => {
                    self.grads.insert(name.clone(), g.map(|v| scale * v));
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Dynamic reverse-mode tape. Rebuilt for each forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Backward rules are themselves expressed as tape operations, which makes
/// gradients differentiable again ([`Tape::grad_graph`]).
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Trainable leaf. Gradients from [`Tape::backward`] are keyed by `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push((name.into(), v));
        v
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.v(a).matmul(self.v(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.v(a).zip_map(self.v(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.v(a).zip_map(self.v(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.v(a).zip_map(self.v(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.v(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.v(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.v(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.v(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    fn step(&mut self, a: Var) -> Var {
        let out = self.v(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Step(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.v(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.v(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.v(a).map(|x| 1.0 / x);
        self.push(Op::Reciprocal(a), out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.v(a).log_softmax_rows()?;
        Ok(self.push(Op::LogSoftmax(a), out))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        Ok(self.exp(ls))
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.v(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.v(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.v(a).rank2("sum_rows")?;
        let src = self.v(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        Ok(self.push(Op::SumRows(a), Tensor::new(vec![1, c], out)?))
    }

    /// `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.v(a).rank2("sum_cols")?;
        let src = self.v(a).data();
        let out = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().sum())
            .collect();
        Ok(self.push(Op::SumCols(a), Tensor::new(vec![r, 1], out)?))
    }

    /// `[1, c] -> [rows, c]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.v(a).rank2("broadcast_rows")?;
        if r != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: vec![r, c],
                rhs: vec![1, c],
            });
        }
        let src = self.v(a).data();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        Ok(self.push(Op::BroadcastRows(a), Tensor::new(vec![rows, c], out)?))
    }

    /// `[r, 1] -> [r, cols]`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.v(a).rank2("broadcast_cols")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                lhs: vec![r, c],
                rhs: vec![r, 1],
            });
        }
        let src = self.v(a).data();
        let mut out = Vec::with_capacity(r * cols);
        for &x in src {
            out.extend(std::iter::repeat_n(x, cols));
        }
        Ok(self.push(Op::BroadcastCols(a), Tensor::new(vec![r, cols], out)?))
    }

    /// `[1, 1] -> [rows, cols]`.
    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.v(a).shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: self.v(a).shape().to_vec(),
                rhs: vec![1, 1],
            });
        }
        let x = self.v(a).item();
        Ok(self.push(Op::BroadcastScalar(a), Tensor::full(&[rows, cols], x)))
    }

    /// `x @ w + b` with `b` a `[1, n]` row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.v(xw).rows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    /// Per-row cross-entropy `-sum_c t_c log softmax(z)_c`, shape `[r, 1]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, target: Target<'_>) -> Result<Var> {
        let (rows, classes) = self.v(logits).rank2("cross_entropy")?;
        if classes < 2 {
            return Err(Error::InvalidTarget(format!(
                "cross-entropy needs at least 2 classes, got {classes}"
            )));
        }
        let t = match target {
            Target::Labels(labels) => {
                if labels.len() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "cross_entropy",
                        lhs: vec![rows, classes],
                        rhs: vec![labels.len()],
                    });
                }
                Tensor::one_hot(labels, classes)?
            }
            Target::Soft(probs) => {
                probs.same_shape(self.v(logits), "cross_entropy")?;
                validate_soft_target(probs)?;
                probs.clone()
            }
        };
        let t = self.constant(t);
        let ls = self.log_softmax(logits)?;
        let prod = self.mul(t, ls)?;
        let s = self.sum_cols(prod)?;
        Ok(self.scale(s, -1.0))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<'_>) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, target)?;
        Ok(self.mean(rows))
    }

    /// Records the gradient of `loss` with respect to each of `wrt` as new
    /// tape nodes, so the result can be differentiated again.
    ///
    /// Variables that `loss` does not depend on receive a zero constant.
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let loss_value = self.v(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let end = loss.0 + 1;
        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        for i in 0..end {
            if !needs[i] {
                needs[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| needs[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        let seed = self.constant(Tensor::ones(loss_value.shape()));
        adj[loss.0] = Some(seed);

        for i in (0..end).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op;
            for (input, contrib) in self.vjp(Var(i), op, g, &needs)? {
                adj[input.0] = Some(match adj[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.v(*w).shape().to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Gradient values of `loss` with respect to `wrt`. The tape is left
    /// unchanged.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let result = self
            .grad_graph(loss, wrt)
            .map(|gs| gs.iter().map(|g| self.v(*g).clone()).collect());
        self.nodes.truncate(mark);
        result
    }

    /// Gradients of `loss` for every registered parameter.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        let vars: Vec<Var> = self.params.iter().map(|(_, v)| *v).collect();
        let grads = self.gradients(loss, &vars)?;
        let mut map = GradientMap::new();
        for ((name, _), g) in self.params.iter().zip(grads) {
            map.insert(name.clone(), g);
        }
        Ok(map)
    }

    fn vjp(&mut self, out: Var, op: Op, g: Var, needs: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let need = |v: Var| needs[v.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Leaf => {}
            MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Transpose(a) => res.push((a, self.transpose(g)?)),
            Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, self.scale(g, -1.0)));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Scale(a, c) => res.push((a, self.scale(g, c))),
            AddScalar(a) => res.push((a, g)),
            Sigmoid(a) => {
                // s * (1 - s)
                let neg = self.scale(out, -1.0);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Relu(a) => {
                let mask = self.step(a);
                res.push((a, self.mul(g, mask)?));
            }
            Step(_) => {}
            Exp(a) => res.push((a, self.mul(g, out)?)),
            Log(a) => {
                let r = self.reciprocal(a);
                res.push((a, self.mul(g, r)?));
            }
            Reciprocal(a) => {
                let r2 = self.mul(out, out)?;
                let t = self.mul(g, r2)?;
                res.push((a, self.scale(t, -1.0)));
            }
            LogSoftmax(a) => {
                // g - softmax(a) * rowsum(g)
                let cols = self.v(out).cols();
                let p = self.exp(out);
                let gs = self.sum_cols(g)?;
                let gb = self.broadcast_cols(gs, cols)?;
                let pg = self.mul(p, gb)?;
                res.push((a, self.sub(g, pg)?));
            }
            Sum(a) => {
                let (r, c) = self.v(a).rank2("sum")?;
                res.push((a, self.broadcast_scalar(g, r, c)?));
            }
            SumRows(a) => {
                let r = self.v(a).rows();
                res.push((a, self.broadcast_rows(g, r)?));
            }
            SumCols(a) => {
                let c = self.v(a).cols();
                res.push((a, self.broadcast_cols(g, c)?));
            }
            BroadcastRows(a) => res.push((a, self.sum_rows(g)?)),
            BroadcastCols(a) => res.push((a, self.sum_cols(g)?)),
            BroadcastScalar(a) => res.push((a, self.sum(g))),
        }
        Ok(res)
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

fn validate_soft_target(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidTarget(format!(
                "row {r} has a negative entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SOFT_TARGET_TOL {
            return Err(Error::InvalidTarget(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}
