//! Per-forward-pass computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. A graph is built for one forward
//! pass and dropped after its backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Classification targets for [`Graph::cross_entropy_rows`].
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Hard(Vec<usize>),
    /// Row-major `(batch, classes)` probability rows.
    Soft { classes: usize, probs: Vec<f64> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft { classes, probs } => probs.len() / (*classes).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LnEps(Var, f64),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    /// `targets` are dense `(rows, classes)`; `probs` is the saved softmax.
    CrossEntropyRows {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    // log-sum-exp
    max + total.ln()
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a node's value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shapes are consistent")
    }

    /// Inserts a tensor as a leaf; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("({m},{k}) x ({k2},{n})")));
        }
        let value = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.node(bias).value.len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias of shape {:?} for width {n}", self.shape(bias)),
            ));
        }
        let b = &self.node(bias).value;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(vec![m, n], value, Op::AddBias(a, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
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

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim("mul_const", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let value = self.value(a).iter().zip(c).map(|(x, y)| x * y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulConst(a, c.to_vec()), rg))
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::dim("add_const", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let value = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), rg)
    }

    /// Softmax over the last axis of an `(m, n)` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let mut value = vec![0.0; m * n];
        for (row, out) in self.value(a).chunks(n).zip(value.chunks_mut(n)) {
            softmax_row(row, out);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], value, Op::SoftmaxRows(a), rg))
    }

    /// `ln(x + eps)` elementwise.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).iter().map(|&x| (x + eps).ln()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::LnEps(a, eps), rg)
    }

    /// Sums each row of an `(m, n)` matrix into a length-`m` vector.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "row_sum")?;
        let value = self.value(a).chunks(n).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m], value, Op::RowSum(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        let rg = self.rg(a);
        self.push(vec![], value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = vec![v.iter().sum::<f64>() / v.len() as f64];
        let rg = self.rg(a);
        self.push(vec![], value, Op::Mean(a), rg)
    }

    /// Per-row softmax cross-entropy, stabilised by max subtraction.
    ///
    /// Hard labels give `-log p[y]`; soft rows give `-sum_c y_c log p_c`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != m {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {m} rows", labels.len()),
            ));
        }
        let targets = match labels {
            Labels::Hard(ys) => {
                let mut t = vec![0.0; m * n];
                for (i, &y) in ys.iter().enumerate() {
                    if y >= n {
                        return Err(Error::contract(format!("label {y} out of range for {n} classes")));
                    }
                    t[i * n + y] = 1.0;
                }
                t
            }
            Labels::Soft { classes, probs } => {
                if *classes != n {
                    return Err(Error::dim(
                        "cross_entropy",
                        format!("soft labels over {classes} classes for {n} logits"),
                    ));
                }
                for row in probs.chunks(n) {
                    let total: f64 = row.iter().sum();
                    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9 {
                        return Err(Error::contract("soft label row is not a probability vector"));
                    }
                }
                probs.clone()
            }
        };
        let mut probs = vec![0.0; m * n];
        let mut value = Vec::with_capacity(m);
        for ((row, p), t) in self
            .value(logits)
            .chunks(n)
            .zip(probs.chunks_mut(n))
            .zip(targets.chunks(n))
        {
            let lse = softmax_row(row, p);
            let loss: f64 = row
                .iter()
                .zip(t)
                .filter(|(_, &tc)| tc != 0.0)
                .map(|(&l, &tc)| tc * (lse - l))
                .sum();
            value.push(loss);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![m],
            value,
            Op::CrossEntropyRows {
                logits,
                probs,
                targets,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let rows = self.cross_entropy_rows(logits, labels)?;
        Ok(self.mean(rows))
    }

    /// Reverse sweep from a scalar node. Gradients start from zero on every call.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 || !root.shape.is_empty() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(up);
                continue;
            }
            let send = |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.rg(*a) {
                        // dA = dOut · Bᵀ
                        let bv = self.value(*b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = urow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(*a, da, &mut grads);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · dOut
                        let av = self.value(*a);
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let urow = &up[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &u) in db[p * n..(p + 1) * n].iter_mut().zip(urow) {
                                    *d += x * u;
                                }
                            }
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::AddBias(a, bias) => {
                    let n = self.shape(*a)[1];
                    if self.rg(*bias) {
                        let mut db = vec![0.0; n];
                        for row in up.chunks(n) {
                            for (d, u) in db.iter_mut().zip(row) {
                                *d += u;
                            }
                        }
                        send(*bias, db, &mut grads);
                    }
                    send(*a, up, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, up.clone(), &mut grads);
                    send(*b, up, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, up.clone(), &mut grads);
                    send(*b, up.into_iter().map(|u| -u).collect(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, up.iter().zip(bv).map(|(u, y)| u * y).collect(), &mut grads);
                    send(*b, up.iter().zip(av).map(|(u, x)| u * x).collect(), &mut grads);
                }
                Op::MulConst(a, c) => {
                    send(*a, up.iter().zip(c).map(|(u, y)| u * y).collect(), &mut grads);
                }
                Op::AddConst(a) => send(*a, up, &mut grads),
                Op::Scale(a, s) => send(*a, up.iter().map(|u| u * s).collect(), &mut grads),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let g = up
                        .iter()
                        .zip(av)
                        .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                        .collect();
                    send(*a, g, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let n = node.shape[1];
                    let mut g = vec![0.0; up.len()];
                    for ((s, u), out) in node.value.chunks(n).zip(up.chunks(n)).zip(g.chunks_mut(n)) {
                        let dot: f64 = s.iter().zip(u).map(|(x, y)| x * y).sum();
                        for ((o, &si), &ui) in out.iter_mut().zip(s).zip(u) {
                            *o = si * (ui - dot);
                        }
                    }
                    send(*a, g, &mut grads);
                }
                Op::LnEps(a, eps) => {
                    let av = self.value(*a);
                    send(*a, up.iter().zip(av).map(|(u, x)| u / (x + eps)).collect(), &mut grads);
                }
                Op::RowSum(a) => {
                    let n = self.shape(*a)[1];
                    let g = up.iter().flat_map(|&u| std::iter::repeat_n(u, n)).collect();
                    send(*a, g, &mut grads);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    send(*a, vec![up[0]; len], &mut grads);
                }
                Op::Mean(a) => {
                    let len = self.value(*a).len();
                    send(*a, vec![up[0] / len as f64; len], &mut grads);
                }
                Op::CrossEntropyRows {
                    logits,
                    probs,
                    targets,
                } => {
                    let n = self.shape(*logits)[1];
                    let mut g = vec![0.0; probs.len()];
                    for (((p, t), out), &u) in probs
                        .chunks(n)
                        .zip(targets.chunks(n))
                        .zip(g.chunks_mut(n))
                        .zip(&up)
                    {
                        let mass: f64 = t.iter().sum();
                        for ((o, &pc), &tc) in out.iter_mut().zip(p).zip(t) {
                            *o = u * (pc * mass - tc);
                        }
                    }
                    send(*logits, g, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
