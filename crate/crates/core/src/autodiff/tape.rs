//! Reverse-mode tape over dense row-major matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are 1x1. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and the backward pass is a single reverse sweep.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows of a sparse linear map from the flattened elements of a source node.
///
/// Output row `r` is `sum(w * src[i] for (i, w) in rows[r])`.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Per-ray sample layout for alpha-composited expected depth.
#[derive(Clone, Debug)]
pub struct CompositeLayout {
    pub n_rays: usize,
    pub n_samples: usize,
    /// Sample distances, `n_rays * n_samples`, ray-major.
    pub t: Vec<f64>,
    /// Segment lengths, same layout as `t`.
    pub delta: Vec<f64>,
    /// Depth returned for rays whose accumulated opacity stays below `eps`.
    pub far: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    MinSelect(Var, Vec<usize>),
    SparseCombine(Var, Arc<SparseRows>),
    Decode(Var, f64),
    CompositeDepth(Var, Arc<CompositeLayout>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recording of primitive operations and their values.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`, or zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Array2<f64> {
        match &self.adjoints[var.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.adjoints[var.0].as_ref()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `tanh(n/2) / n`, and `g'(n) / n`, stable near zero.
fn gate_terms(n: f64) -> (f64, f64) {
    if n < 1e-4 {
        (0.5 - n * n / 24.0, -1.0 / 12.0)
    } else {
        let v = (0.5 * n).tanh();
        let g = v / n;
        let dg_over_n = (n * (1.0 - v * v) * 0.5 - v) / (n * n * n);
        (g, dg_over_n)
    }
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_param(&mut self, x: f64) -> Var {
        self.param(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{ar}x{ac} * {br}x{bc}"),
            });
        }
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a + bias` with a 1xC bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if self.shape(bias) != (1, ac) {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", self.shape(a), self.shape(bias)),
            });
        }
        let v = self.value(a) + self.value(bias);
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(v, Op::AddBias(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Sum of all elements, in row-major order.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().fold(0.0, |acc, &x| acc + x);
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let total = val.iter().fold(0.0, |acc, &x| acc + x);
        let m = total / val.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), ng)
    }

    /// Per-row sum, producing an Nx1 column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row {bad} of {rows}"),
            });
        }
        let src = self.value(a);
        let mut out = Array2::zeros((idx.len(), cols));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape {
            op: "concat_cols",
            detail: e.to_string(),
        })?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row-wise minimum; the selected column is recorded and receives the
    /// whole adjoint on the backward pass. Ties resolve to the lowest index.
    pub fn min_select(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if cols == 0 {
            return Err(Error::Shape {
                op: "min_select",
                detail: "zero columns".into(),
            });
        }
        let src = self.value(a);
        let mut out = Array2::zeros((rows, 1));
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mut best = 0;
            for c in 1..cols {
                if row[c] < row[best] {
                    best = c;
                }
            }
            out[[r, 0]] = row[best];
            arg.push(best);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::MinSelect(a, arg), ng))
    }

    /// Column of sparse linear combinations of the flattened source.
    pub fn sparse_combine(&mut self, src: Var, map: Arc<SparseRows>) -> Result<Var> {
        let n = self.value(src).len();
        let flat = self
            .value(src)
            .as_slice()
            .ok_or_else(|| Error::Shape {
                op: "sparse_combine",
                detail: "source not contiguous".into(),
            })?;
        let mut out = Array2::zeros((map.rows.len(), 1));
        for (r, row) in map.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(i, w) in row {
                if i >= n {
                    return Err(Error::Shape {
                        op: "sparse_combine",
                        detail: format!("index {i} of {n}"),
                    });
                }
                acc += w * flat[i];
            }
            out[[r, 0]] = acc;
        }
        let ng = self.ng(src);
        Ok(self.push(out, Op::SparseCombine(src, map), ng))
    }

    /// Maps raw head outputs `[t_raw, r]` (Nx4) to `[v * (offset + sigmoid(t_raw)), v * r/|r|]`
    /// with visibility `v = tanh(|r| / 2)`.
    pub fn decode(&mut self, raw: Var, offset: f64) -> Result<Var> {
        let (rows, cols) = self.shape(raw);
        if cols != 4 {
            return Err(Error::Shape {
                op: "decode",
                detail: format!("expected 4 columns, got {cols}"),
            });
        }
        let src = self.value(raw);
        let mut out = Array2::zeros((rows, 4));
        for r in 0..rows {
            let (t, d) = decode_row(
                [src[[r, 0]], src[[r, 1]], src[[r, 2]], src[[r, 3]]],
                offset,
            );
            out[[r, 0]] = t;
            out[[r, 1]] = d[0];
            out[[r, 2]] = d[1];
            out[[r, 3]] = d[2];
        }
        let ng = self.ng(raw);
        Ok(self.push(out, Op::Decode(raw, offset), ng))
    }

    /// Expected depth per ray from per-sample densities (alpha compositing).
    pub fn composite_depth(&mut self, sigma: Var, layout: Arc<CompositeLayout>) -> Result<Var> {
        let total = layout.n_rays * layout.n_samples;
        if self.shape(sigma) != (total, 1)
            || layout.t.len() != total
            || layout.delta.len() != total
            || layout.far.len() != layout.n_rays
        {
            return Err(Error::Shape {
                op: "composite_depth",
                detail: format!("{:?} vs {} samples", self.shape(sigma), total),
            });
        }
        let sig = self.value(sigma);
        let mut out = Array2::zeros((layout.n_rays, 1));
        for ray in 0..layout.n_rays {
            let base = ray * layout.n_samples;
            let mut trans = 1.0;
            let mut depth_acc = 0.0;
            for k in 0..layout.n_samples {
                let a = (-sig[[base + k, 0]] * layout.delta[base + k]).exp();
                depth_acc += trans * (1.0 - a) * layout.t[base + k];
                trans *= a;
            }
            let opacity = 1.0 - trans;
            out[[ray, 0]] = if opacity < layout.eps {
                layout.far[ray]
            } else {
                depth_acc / opacity
            };
        }
        let ng = self.ng(sigma);
        Ok(self.push(out, Op::CompositeDepth(sigma, layout), ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj
                .into_iter()
                .zip(&self.nodes)
                .map(|(a, n)| if n.needs_grad { a } else { None })
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn accumulate(&self, adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(adj, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(adj, *a, g.clone());
                if self.ng(*bias) {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(adj, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g * *c),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(&node.value, |gv, &s| *gv *= s * (1.0 - s));
                self.accumulate(adj, *a, ga);
            }
            Op::Exp(a) => self.accumulate(adj, *a, g * &node.value),
            Op::Softplus(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= sigmoid(x));
                self.accumulate(adj, *a, ga);
            }
            Op::Square(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= 2.0 * x);
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(adj, *a, ga);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1).max(1) as f64;
                self.accumulate(adj, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::RowSum(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Array2::zeros((rows, cols));
                for r in 0..rows {
                    ga.row_mut(r).fill(g[[r, 0]]);
                }
                self.accumulate(adj, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(adj, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let width = self.shape(p).1;
                    if self.ng(p) {
                        let gp = g.slice(s![.., col..col + width]).to_owned();
                        self.accumulate(adj, p, gp);
                    }
                    col += width;
                }
            }
            Op::MinSelect(a, arg) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (r, &c) in arg.iter().enumerate() {
                    ga[[r, c]] = g[[r, 0]];
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SparseCombine(src, map) => {
                let shape = self.shape(*src);
                let mut flat = vec![0.0; shape.0 * shape.1];
                for (r, row) in map.rows.iter().enumerate() {
                    let gr = g[[r, 0]];
                    if gr == 0.0 {
                        continue;
                    }
                    for &(i, w) in row {
                        flat[i] += w * gr;
                    }
                }
                let ga = Array2::from_shape_vec(shape, flat).expect("shape preserved");
                self.accumulate(adj, *src, ga);
            }
            Op::Decode(raw, offset) => {
                let src = self.value(*raw);
                let mut ga = Array2::zeros(src.dim());
                for r in 0..src.nrows() {
                    let grow = [g[[r, 0]], g[[r, 1]], g[[r, 2]], g[[r, 3]]];
                    let raw_row = [src[[r, 0]], src[[r, 1]], src[[r, 2]], src[[r, 3]]];
                    let out = decode_row_vjp(raw_row, *offset, grow);
                    for c in 0..4 {
                        ga[[r, c]] = out[c];
                    }
                }
                self.accumulate(adj, *raw, ga);
            }
            Op::CompositeDepth(sigma, layout) => {
                let sig = self.value(*sigma);
                let mut ga = Array2::zeros(sig.dim());
                let s_count = layout.n_samples;
                let mut trans = vec![0.0; s_count + 1];
                for ray in 0..layout.n_rays {
                    let gr = g[[ray, 0]];
                    if gr == 0.0 {
                        continue;
                    }
                    let base = ray * s_count;
                    trans[0] = 1.0;
                    let mut depth_acc = 0.0;
                    for k in 0..s_count {
                        let a = (-sig[[base + k, 0]] * layout.delta[base + k]).exp();
                        depth_acc += trans[k] * (1.0 - a) * layout.t[base + k];
                        trans[k + 1] = trans[k] * a;
                    }
                    let t_end = trans[s_count];
                    let opacity = 1.0 - t_end;
                    if opacity < layout.eps {
                        continue;
                    }
                    let depth = depth_acc / opacity;
                    let t_last = layout.t[base + s_count - 1];
                    // suffix[k] = sum_{m=k+1}^{S-1} (t_m - t_{m-1}) T_m
                    let mut suffix = 0.0;
                    for k in (0..s_count).rev() {
                        let dk = layout.delta[base + k];
                        let d_depth_acc = dk * (t_last * t_end - suffix);
                        let d_opacity = dk * t_end;
                        ga[[base + k, 0]] = gr * (d_depth_acc - depth * d_opacity) / opacity;
                        if k >= 1 {
                            suffix += (layout.t[base + k] - layout.t[base + k - 1]) * trans[k];
                        }
                    }
                }
                self.accumulate(adj, *sigma, ga);
            }
        }
    }
}

/// Forward decode of one raw head row; returns `(t_norm, d)`.
pub fn decode_row(raw: [f64; 4], offset: f64) -> (f64, [f64; 3]) {
    let r = [raw[1], raw[2], raw[3]];
    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let v = (0.5 * n).tanh();
    let (gate, _) = gate_terms(n);
    let t = v * (offset + sigmoid(raw[0]));
    (t, [r[0] * gate, r[1] * gate, r[2] * gate])
}

fn decode_row_vjp(raw: [f64; 4], offset: f64, g: [f64; 4]) -> [f64; 4] {
    let r = [raw[1], raw[2], raw[3]];
    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let v = (0.5 * n).tanh();
    let s = sigmoid(raw[0]);
    let (gate, dgate_over_n) = gate_terms(n);
    let mut out = [0.0; 4];
    out[0] = g[0] * v * s * (1.0 - s);
    let r_dot_g = r[0] * g[1] + r[1] * g[2] + r[2] * g[3];
    // dt/dr = (offset + s) * v'(n) * r / n, v'(n) = (1 - v^2) / 2
    let t_coef = if n > 1e-12 {
        g[0] * (offset + s) * 0.5 * (1.0 - v * v) / n
    } else {
        0.0
    };
    for k in 0..3 {
        out[k + 1] = gate * g[k + 1] + dgate_over_n * r_dot_g * r[k] + t_coef * r[k];
    }
    out
}
