//! Tensor-valued computation record with reverse-mode differentiation.
//!
//! Every value is a dense row-major matrix. Scalars are `1x1`, row vectors
//! `1xn`. The record is append-only, so insertion order is a topological
//! order and the backward pass is a single reverse sweep.
//!
//! Elementwise binary operations broadcast an operand whose row (or column)
//! count is 1 against the other operand. Shape errors in graph construction
//! are programming errors and panic; public domain functions validate user
//! supplied dimensions before building graphs.

use crate::error::{contract, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Softplus,
    MaxScalar(f64),
    MinScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    RowNormL2(Var),
    RowNormL1(Var),
    /// Row-wise minimum; the chosen column per row is kept for the backward pass.
    RowMin(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    /// Value supplied externally, gradient passed through unchanged.
    StraightThrough(Var),
}

struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    requires_grad: bool,
}

/// A single-threaded computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
    visited: usize,
}

impl Gradients {
    /// Adjoint of `v`; zeros for nodes the root does not depend on.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.adjoints[v.0] {
            Some(a) => a.clone(),
            None => vec![0.0; self.shapes[v.0].len()],
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.shape, Shape::new(1, 1), "scalar_value on non-scalar node");
        n.value[0]
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(rows * cols, values.len(), "leaf shape/value mismatch");
        self.push(Op::Leaf, Shape::new(rows, cols), values, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(rows * cols, values.len(), "constant shape/value mismatch");
        self.push(Op::Leaf, Shape::new(rows, cols), values, false)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(1, 1, vec![c])
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(1, values.len(), values.to_vec())
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let rows = broadcast_dim(sa.rows, sb.rows, "rows", kind);
        let cols = broadcast_dim(sa.cols, sb.cols, "cols", kind);
        let out_shape = Shape::new(rows, cols);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Maximum => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
            Binary::Minimum => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
        };
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(out_shape.len());
            for i in 0..rows {
                for j in 0..cols {
                    out.push(f(va[bidx(sa, i, j)], vb[bidx(sb, i, j)]));
                }
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Binary(kind, a, b), out_shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Maximum, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Minimum, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: f64| match kind {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
            Unary::MaxScalar(c) => {
                if x > c {
                    x
                } else {
                    c
                }
            }
            Unary::MinScalar(c) => {
                if x < c {
                    x
                } else {
                    c
                }
            }
        };
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a);
        let rg = self.rg(a);
        self.push(Op::Unary(kind, a), shape, value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    /// `max(a, c)` elementwise. Subgradient is 1 strictly above `c`, 0 at and below it.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::MaxScalar(c), a)
    }

    /// `min(a, c)` elementwise. Subgradient is 1 strictly below `c`, 0 at and above it.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::MinScalar(c), a)
    }

    /// Matrix product `a[r,k] * b[k,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.cols, sb.rows, "matmul inner dimension mismatch");
        let mut out = vec![0.0; sa.rows * sb.cols];
        matmul_into(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            &mut out,
            sa.rows,
            sa.cols,
            sb.cols,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Shape::new(sa.rows, sb.cols), out, rg)
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Shape::new(1, 1), vec![s], rg)
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `[r,c] -> [1,c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; s.cols];
        for i in 0..s.rows {
            for (o, x) in out.iter_mut().zip(&v[i * s.cols..(i + 1) * s.cols]) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumRows(a), Shape::new(1, s.cols), out, rg)
    }

    /// Row sums: `[r,c] -> [r,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = &self.nodes[a.0].value;
        let out = (0..s.rows)
            .map(|i| v[i * s.cols..(i + 1) * s.cols].iter().sum())
            .collect();
        let rg = self.rg(a);
        self.push(Op::SumCols(a), Shape::new(s.rows, 1), out, rg)
    }

    /// Euclidean norm of each row: `[r,c] -> [r,1]`. The subgradient at a zero row is 0.
    pub fn row_norm_l2(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = &self.nodes[a.0].value;
        let out = (0..s.rows)
            .map(|i| {
                v[i * s.cols..(i + 1) * s.cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Op::RowNormL2(a), Shape::new(s.rows, 1), out, rg)
    }

    /// L1 norm of each row: `[r,c] -> [r,1]`.
    pub fn row_norm_l1(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = &self.nodes[a.0].value;
        let out = (0..s.rows)
            .map(|i| v[i * s.cols..(i + 1) * s.cols].iter().map(|x| x.abs()).sum())
            .collect();
        let rg = self.rg(a);
        self.push(Op::RowNormL1(a), Shape::new(s.rows, 1), out, rg)
    }

    /// Minimum of each row: `[r,c] -> [r,1]`. Ties go to the lowest column index.
    pub fn row_min(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert!(s.cols > 0, "row_min of empty rows");
        let v = &self.nodes[a.0].value;
        let mut arg = Vec::with_capacity(s.rows);
        let mut out = Vec::with_capacity(s.rows);
        for i in 0..s.rows {
            let row = &v[i * s.cols..(i + 1) * s.cols];
            let mut best = 0;
            for (j, x) in row.iter().enumerate().skip(1) {
                if *x < row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let rg = self.rg(a);
        self.push(Op::RowMin(a, arg), Shape::new(s.rows, 1), out, rg)
    }

    /// Horizontal concatenation of equal-height nodes.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).rows;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.rows, rows, "concat_cols row mismatch");
                s.cols
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Shape::new(rows, cols),
            out,
            rg,
        )
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let s = self.shape(a);
        assert!(start + len <= s.cols, "slice_cols out of range");
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(s.rows * len);
        for i in 0..s.rows {
            out.extend_from_slice(&v[i * s.cols + start..i * s.cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), Shape::new(s.rows, len), out, rg)
    }

    /// Node whose value is `value` but whose gradient flows to `a` unchanged.
    pub fn straight_through(&mut self, a: Var, value: Vec<f64>) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), value.len(), "straight_through shape mismatch");
        let rg = self.rg(a);
        self.push(Op::StraightThrough(a), shape, value, rg)
    }

    /// Reverse sweep from a scalar root. The root adjoint is seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != Shape::new(1, 1) {
            return Err(contract(format!(
                "backward root must be 1x1, got {}x{}",
                root_shape.rows, root_shape.cols
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(go) = adj[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(node, &go, &mut adj);
            adj[idx] = Some(go);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.shape).collect(),
            visited,
        })
    }

    fn propagate(&self, node: &Node, go: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let va = self.value(a);
                let vb = self.value(b);
                let ra = self.rg(a);
                let rb = self.rg(b);
                let mut ga = if ra { Some(vec![0.0; sa.len()]) } else { None };
                let mut gb = if rb { Some(vec![0.0; sb.len()]) } else { None };
                for i in 0..out.rows {
                    for j in 0..out.cols {
                        let g = go[i * out.cols + j];
                        if g == 0.0 {
                            continue;
                        }
                        let ia = bidx(sa, i, j);
                        let ib = bidx(sb, i, j);
                        let (x, y) = (va[ia], vb[ib]);
                        let (da, db) = match kind {
                            Binary::Add => (g, g),
                            Binary::Sub => (g, -g),
                            Binary::Mul => (g * y, g * x),
                            Binary::Div => (g / y, -g * x / (y * y)),
                            Binary::Maximum => {
                                if x >= y {
                                    (g, 0.0)
                                } else {
                                    (0.0, g)
                                }
                            }
                            Binary::Minimum => {
                                if x <= y {
                                    (g, 0.0)
                                } else {
                                    (0.0, g)
                                }
                            }
                        };
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += db;
                        }
                    }
                }
                if let Some(ga) = ga {
                    accumulate(adj, a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(adj, b, gb);
                }
            }
            Op::Unary(kind, a) => {
                let a = *a;
                let x = self.value(a);
                let y = &node.value;
                let ga: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let g = go[i];
                        match kind {
                            Unary::Neg => -g,
                            Unary::Scale(c) => c * g,
                            Unary::AddScalar(_) => g,
                            Unary::Tanh => g * (1.0 - y[i] * y[i]),
                            Unary::Exp => g * y[i],
                            Unary::Ln => g / x[i],
                            Unary::Sqrt => {
                                if y[i] > 0.0 {
                                    g / (2.0 * y[i])
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i] * g,
                            Unary::Abs => g * sign(x[i]),
                            Unary::Softplus => g * sigmoid(x[i]),
                            Unary::MaxScalar(c) => {
                                if x[i] > *c {
                                    g
                                } else {
                                    0.0
                                }
                            }
                            Unary::MinScalar(c) => {
                                if x[i] < *c {
                                    g
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                accumulate(adj, a, ga);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (r, k, c) = (sa.rows, sa.cols, sb.cols);
                if self.rg(a) {
                    // dA = dO * B^T
                    let vb = self.value(b);
                    let mut ga = vec![0.0; r * k];
                    for i in 0..r {
                        let gorow = &go[i * c..(i + 1) * c];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (p, gap) in garow.iter_mut().enumerate() {
                            let brow = &vb[p * c..(p + 1) * c];
                            *gap = dot(gorow, brow);
                        }
                    }
                    accumulate(adj, a, ga);
                }
                if self.rg(b) {
                    // dB = A^T * dO
                    let va = self.value(a);
                    let mut gb = vec![0.0; k * c];
                    for i in 0..r {
                        let gorow = &go[i * c..(i + 1) * c];
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * c..(p + 1) * c];
                            for (gbj, goj) in gbrow.iter_mut().zip(gorow) {
                                *gbj += x * goj;
                            }
                        }
                    }
                    accumulate(adj, b, gb);
                }
            }
            Op::Sum(a) => {
                let n = self.shape(*a).len();
                accumulate(adj, *a, vec![go[0]; n]);
            }
            Op::SumRows(a) => {
                let s = self.shape(*a);
                let mut ga = Vec::with_capacity(s.len());
                for _ in 0..s.rows {
                    ga.extend_from_slice(go);
                }
                accumulate(adj, *a, ga);
            }
            Op::SumCols(a) => {
                let s = self.shape(*a);
                let mut ga = Vec::with_capacity(s.len());
                for &g in go.iter().take(s.rows) {
                    ga.extend(std::iter::repeat_n(g, s.cols));
                }
                accumulate(adj, *a, ga);
            }
            Op::RowNormL2(a) => {
                let s = self.shape(*a);
                let x = self.value(*a);
                let mut ga = vec![0.0; s.len()];
                for i in 0..s.rows {
                    let n = node.value[i];
                    if n > 0.0 {
                        let f = go[i] / n;
                        for j in 0..s.cols {
                            ga[i * s.cols + j] = f * x[i * s.cols + j];
                        }
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::RowNormL1(a) => {
                let s = self.shape(*a);
                let x = self.value(*a);
                let mut ga = vec![0.0; s.len()];
                for i in 0..s.rows {
                    for j in 0..s.cols {
                        ga[i * s.cols + j] = go[i] * sign(x[i * s.cols + j]);
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::RowMin(a, arg) => {
                let s = self.shape(*a);
                let mut ga = vec![0.0; s.len()];
                for (i, &j) in arg.iter().enumerate() {
                    ga[i * s.cols + j] = go[i];
                }
                accumulate(adj, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).cols;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(out.rows * w);
                        for i in 0..out.rows {
                            let base = i * out.cols + offset;
                            gp.extend_from_slice(&go[base..base + w]);
                        }
                        accumulate(adj, p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let s = self.shape(*a);
                let mut ga = vec![0.0; s.len()];
                for i in 0..out.rows {
                    let dst = i * s.cols + start;
                    ga[dst..dst + out.cols].copy_from_slice(&go[i * out.cols..(i + 1) * out.cols]);
                }
                accumulate(adj, *a, ga);
            }
            Op::StraightThrough(a) => {
                accumulate(adj, *a, go.to_vec());
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_dim(a: usize, b: usize, what: &str, kind: Binary) -> usize {
    if a == b {
        a
    } else if a == 1 {
        b
    } else if b == 1 {
        a
    } else {
        panic!("{kind:?}: cannot broadcast {what} {a} against {b}")
    }
}

#[inline]
fn bidx(s: Shape, i: usize, j: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { i };
    let c = if s.cols == 1 { 0 } else { j };
    r * s.cols + c
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[r,c] = a[r,k] * b[k,c]`, `out` zero-initialised.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![3.0]);
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x), vec![6.0]);
        assert_eq!(grads.wrt(y), vec![1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![2.0]);
        let y = g.leaf(1, 1, vec![5.0]);
        let z = g.mul(x, y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x), vec![5.0]);
        assert_eq!(grads.wrt(y), vec![2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(1, 2, vec![1.0, 2.0]);
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![2.0]);
        let unused = g.leaf(2, 2, vec![1.0; 4]);
        let y = g.exp(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused), vec![0.0; 4]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn hinge_subgradient_at_threshold_is_zero() {
        let delta = 0.5;
        for (x, expect) in [(-0.7, 0.0), (-0.3, 1.0), (-0.5, 0.0)] {
            let mut g = Graph::new();
            let v = g.leaf(1, 1, vec![x]);
            let shifted = g.add_scalar(v, delta);
            let h = g.max_scalar(shifted, 0.0);
            assert_eq!(g.backward(h).unwrap().wrt(v), vec![expect], "x = {x}");
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let m = g.leaf(2, 3, vec![1.0; 6]);
        let b = g.leaf(1, 3, vec![0.5, 1.0, 2.0]);
        let s = g.add(m, b);
        let sq = g.square(s);
        let root = g.sum(sq);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(b), vec![6.0, 8.0, 12.0]);
    }

    #[test]
    fn row_min_routes_to_first_tie() {
        let mut g = Graph::new();
        let a = g.leaf(1, 3, vec![2.0, 1.0, 1.0]);
        let m = g.row_min(a);
        let root = g.sum(m);
        assert_eq!(g.value(m), &[1.0]);
        assert_eq!(g.backward(root).unwrap().wrt(a), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn each_node_visited_once() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![0.3]);
        let mut y = x;
        for _ in 0..50 {
            let t = g.tanh(y);
            y = g.add(t, y);
        }
        let grads = g.backward(y).unwrap();
        // x plus 2 nodes per iteration, all on the path to the root
        assert_eq!(grads.visited(), 101);
    }

    #[test]
    fn straight_through_keeps_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(1, 1, vec![2.0]);
        let y = g.scale(x, 3.0);
        let z = g.straight_through(y, vec![5.5]);
        assert_eq!(g.value(z), &[5.5]);
        assert_eq!(g.backward(z).unwrap().wrt(x), vec![3.0]);
    }
}
