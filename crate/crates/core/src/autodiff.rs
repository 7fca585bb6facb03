//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! A [`Graph`] is an append-only node store. Every operation appends a node
//! whose parents already exist, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are rebuilt for every
//! forward pass; parameters are re-registered as leaves each time.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    MulElementwise,
    MatMul,
    Scale(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Log,
    Exp,
    Square,
    Sum,
    Mean,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Negate,
    /// `m×n + m×1`, the column broadcast across all `n` columns.
    AddColumn,
    /// `log Σ exp(x)` over every element, reduced to `1×1`.
    LogSumExp,
}

impl Primitive {
    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::MulElementwise
            | Primitive::MatMul
            | Primitive::AddColumn => Some(2),
            Primitive::ConcatRows => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    value: Matrix,
    adjoint: Option<Matrix>,
    parents: Vec<NodeId>,
    op: Option<Primitive>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    /// Accumulated gradient; all zeros when nothing flowed into this node.
    pub fn adjoint(&self) -> Matrix {
        self.adjoint
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.raw_dim()))
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    /// `None` for leaves.
    pub fn primitive(&self) -> Option<&Primitive> {
        self.op.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_finite(value: &Matrix, what: &str) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("{what} contains NaN or Inf")))
    }
}

fn same_shape(a: &Matrix, b: &Matrix, op: &Primitive) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeError(format!(
            "{op:?}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> Matrix {
        self.nodes[id.0].adjoint()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<NodeId> {
        check_finite(&value, "leaf value")?;
        Ok(self.push(value, Vec::new(), None, requires_grad))
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.leaf(scalar(value), false)
    }

    fn push(
        &mut self,
        value: Matrix,
        parents: Vec<NodeId>,
        op: Option<Primitive>,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            adjoint: None,
            parents,
            op,
            requires_grad,
        });
        id
    }

    /// Appends `primitive(operands...)` to the graph.
    pub fn apply(&mut self, primitive: Primitive, operands: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = primitive.arity() {
            if operands.len() != n {
                return Err(Error::ShapeError(format!(
                    "{primitive:?} takes {n} operands, got {}",
                    operands.len()
                )));
            }
        } else if operands.is_empty() {
            return Err(Error::ShapeError(format!("{primitive:?} needs operands")));
        }
        for id in operands {
            if id.0 >= self.nodes.len() {
                return Err(Error::InvalidValue(format!("node {} not in graph", id.0)));
            }
        }
        let value = self.forward_value(&primitive, operands)?;
        let requires_grad = operands.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(value, operands.to_vec(), Some(primitive), requires_grad))
    }

    fn forward_value(&self, op: &Primitive, operands: &[NodeId]) -> Result<Matrix> {
        let a = &self.nodes[operands[0].0].value;
        let value = match op {
            Primitive::Add => {
                let b = &self.nodes[operands[1].0].value;
                same_shape(a, b, op)?;
                a + b
            }
            Primitive::Sub => {
                let b = &self.nodes[operands[1].0].value;
                same_shape(a, b, op)?;
                a - b
            }
            Primitive::MulElementwise => {
                let b = &self.nodes[operands[1].0].value;
                same_shape(a, b, op)?;
                a * b
            }
            Primitive::MatMul => {
                let b = &self.nodes[operands[1].0].value;
                if a.ncols() != b.nrows() {
                    return Err(Error::ShapeError(format!(
                        "matmul: {:?} x {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                a.dot(b)
            }
            Primitive::AddColumn => {
                let b = &self.nodes[operands[1].0].value;
                if b.ncols() != 1 || b.nrows() != a.nrows() {
                    return Err(Error::ShapeError(format!(
                        "add_column: {:?} + {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                a + b
            }
            Primitive::Scale(c) => a * *c,
            Primitive::Sigmoid => a.mapv(sigmoid),
            Primitive::Tanh => a.mapv(f64::tanh),
            Primitive::Softplus => a.mapv(softplus),
            Primitive::Log => {
                if let Some(bad) = a.iter().find(|v| **v <= 0.0) {
                    return Err(Error::DomainError(format!("log of non-positive value {bad}")));
                }
                a.mapv(f64::ln)
            }
            Primitive::Exp => a.mapv(f64::exp),
            Primitive::Square => a.mapv(|v| v * v),
            Primitive::Negate => a.mapv(|v| -v),
            Primitive::Sum => scalar(a.sum()),
            Primitive::Mean => {
                if a.is_empty() {
                    return Err(Error::ShapeError("mean of empty matrix".into()));
                }
                scalar(a.sum() / a.len() as f64)
            }
            Primitive::LogSumExp => {
                if a.is_empty() {
                    return Err(Error::ShapeError("logsumexp of empty matrix".into()));
                }
                let m = a.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                scalar(m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
            }
            Primitive::ConcatRows => {
                let cols = a.ncols();
                let mut views = Vec::with_capacity(operands.len());
                for id in operands {
                    let v = &self.nodes[id.0].value;
                    if v.ncols() != cols {
                        return Err(Error::ShapeError(format!(
                            "concat_rows: column counts {} and {}",
                            cols,
                            v.ncols()
                        )));
                    }
                    views.push(v.view());
                }
                concatenate(Axis(0), &views).expect("column counts checked")
            }
            Primitive::SliceRows { start, end } => {
                if start >= end || *end > a.nrows() {
                    return Err(Error::ShapeError(format!(
                        "slice_rows {start}..{end} of {} rows",
                        a.nrows()
                    )));
                }
                a.slice(s![*start..*end, ..]).to_owned()
            }
        };
        Ok(value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MulElementwise, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add_column(&mut self, a: NodeId, column: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddColumn, &[a, column])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softplus, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Negate, &[a])
    }

    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSumExp, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceRows { start, end }, &[a])
    }

    /// `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.nodes[a.0].value.raw_dim();
        let k = self.constant(Matrix::from_elem(shape, c))?;
        self.add(a, k)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.adjoint = None;
        }
    }

    /// Reverse sweep from a `1×1` root. Adjoints are reset first, then every
    /// node reachable from `root` that requires gradients receives
    /// `∂root/∂node`, summed over all of its uses.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if shape != [1, 1] {
            return Err(Error::ShapeError(format!(
                "backward needs a scalar root, got {shape:?}"
            )));
        }
        self.zero_grad();
        self.nodes[root.0].adjoint = Some(scalar(1.0));

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(op), Some(g)) = (&node.op, &node.adjoint) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            if let Primitive::SliceRows { start, end } = op {
                // Accumulate straight into the parent's row block.
                let p = &mut before[node.parents[0].0];
                if p.requires_grad {
                    let acc = p
                        .adjoint
                        .get_or_insert_with(|| Matrix::zeros(p.value.raw_dim()));
                    let mut block = acc.slice_mut(s![*start..*end, ..]);
                    block += g;
                }
                continue;
            }
            let contributions = local_gradients(op, &node.parents, &node.value, g, before);
            for (parent, contrib) in contributions {
                let p = &mut before[parent.0];
                if !p.requires_grad {
                    continue;
                }
                match &mut p.adjoint {
                    Some(acc) => *acc += &contrib,
                    None => p.adjoint = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

/// Vector-Jacobian products of one node toward its parents.
fn local_gradients(
    op: &Primitive,
    parents: &[NodeId],
    out: &Matrix,
    g: &Matrix,
    nodes: &[Node],
) -> Vec<(NodeId, Matrix)> {
    let val = |k: usize| &nodes[parents[k].0].value;
    let wants = |k: usize| nodes[parents[k].0].requires_grad;
    let mut grads = Vec::with_capacity(parents.len());
    match op {
        Primitive::Add => {
            for k in 0..2 {
                if wants(k) {
                    grads.push((parents[k], g.clone()));
                }
            }
        }
        Primitive::Sub => {
            if wants(0) {
                grads.push((parents[0], g.clone()));
            }
            if wants(1) {
                grads.push((parents[1], -g));
            }
        }
        Primitive::MulElementwise => {
            if wants(0) {
                grads.push((parents[0], g * val(1)));
            }
            if wants(1) {
                grads.push((parents[1], g * val(0)));
            }
        }
        Primitive::MatMul => {
            if wants(0) {
                grads.push((parents[0], g.dot(&val(1).t())));
            }
            if wants(1) {
                grads.push((parents[1], val(0).t().dot(g)));
            }
        }
        Primitive::AddColumn => {
            if wants(0) {
                grads.push((parents[0], g.clone()));
            }
            if wants(1) {
                grads.push((parents[1], g.sum_axis(Axis(1)).insert_axis(Axis(1))));
            }
        }
        Primitive::Scale(c) => grads.push((parents[0], g * *c)),
        Primitive::Negate => grads.push((parents[0], -g)),
        Primitive::Sigmoid => {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
            grads.push((parents[0], d));
        }
        Primitive::Tanh => {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
            grads.push((parents[0], d));
        }
        Primitive::Softplus => {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(0)).for_each(|d, &x| *d *= sigmoid(x));
            grads.push((parents[0], d));
        }
        Primitive::Log => grads.push((parents[0], g / val(0))),
        Primitive::Exp => grads.push((parents[0], g * out)),
        Primitive::Square => {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(0)).for_each(|d, &x| *d *= 2.0 * x);
            grads.push((parents[0], d));
        }
        Primitive::Sum => {
            let x = val(0);
            grads.push((parents[0], Matrix::from_elem(x.raw_dim(), g[[0, 0]])));
        }
        Primitive::Mean => {
            let x = val(0);
            let n = x.len() as f64;
            grads.push((parents[0], Matrix::from_elem(x.raw_dim(), g[[0, 0]] / n)));
        }
        Primitive::LogSumExp => {
            let x = val(0);
            let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e = x.mapv(|v| (v - m).exp());
            let total = e.sum();
            let gs = g[[0, 0]];
            grads.push((parents[0], e.mapv(|v| gs * v / total)));
        }
        Primitive::ConcatRows => {
            let mut offset = 0;
            for (k, id) in parents.iter().enumerate() {
                let rows = val(k).nrows();
                if wants(k) {
                    grads.push((*id, g.slice(s![offset..offset + rows, ..]).to_owned()));
                }
                offset += rows;
            }
        }
        Primitive::SliceRows { start, end } => {
            let mut d = Matrix::zeros(val(0).raw_dim());
            d.slice_mut(s![*start..*end, ..]).assign(g);
            grads.push((parents[0], d));
        }
    }
    grads
}

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the function value together with its analytic gradient.
/// Returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(mut f: F, point: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidValue(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::InvalidValue("function value is not finite".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::ShapeError(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (up, _) = f(&x)?;
        x[i] = orig - epsilon;
        let (down, _) = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::InvalidValue(format!(
                "function not finite near coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
