use std::borrow::Cow;

use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String },
    Const(Tensor),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(m,n) + (1,n)`, the row is added to every row.
    AddRow(Var, Var),
    /// `(m,n) * (m,1)`, every column is scaled elementwise by the column vector.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// 1 where the input is strictly positive, otherwise the given value.
    /// Carries no gradient.
    Mask(Var, f64),
    Detach(Var),
    Sin(Var),
    Cos(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Recip(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    /// Sum in sorted order, so the value ignores the order of the elements.
    SumSorted(Var),
    SumRows(Var),
    /// Column sums in sorted order.
    SumRowsSorted(Var),
    SumCols(Var),
    Broadcast(Var, usize, usize),
    RepeatRows(Var, usize),
    RepeatCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    PadCols(Var, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// Values bound to the graph's inputs for one evaluation.
#[derive(Default)]
pub struct Bindings<'a> {
    values: Vec<(Var, &'a Tensor)>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, var: Var, value: &'a Tensor) -> &mut Self {
        self.values.push((var, value));
        self
    }

    pub fn bind_all(&mut self, vars: &[Var], values: &'a [Tensor]) -> &mut Self {
        assert_eq!(vars.len(), values.len(), "bind_all length mismatch");
        for (v, t) in vars.iter().zip(values) {
            self.values.push((*v, t));
        }
        self
    }
}

/// A reverse-mode expression graph with static shapes.
///
/// Nodes are appended in topological order. [`Graph::grad`] appends the
/// adjoint computation as ordinary nodes, so gradients can themselves be
/// differentiated. Shape errors while building are programming errors and
/// panic; binding and evaluation problems are returned as errors.
#[derive(Clone, Debug, Default)]
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Var {
        self.nodes.push(Node { op, rows, cols });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
        sa
    }

    // ---- leaves ----

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Var {
        self.push(Op::Input { name: name.into() }, rows, cols)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let (r, c) = t.shape();
        self.push(Op::Const(t), r, c)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    // ---- primitive ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        self.push(Op::MatMul(a, b), m, n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), c, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape("add", a, b);
        self.push(Op::Add(a, b), r, c)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape("sub", a, b);
        self.push(Op::Sub(a, b), r, c)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.same_shape("mul", a, b);
        self.push(Op::Mul(a, b), r, c)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ((m, n), rs) = (self.shape(a), self.shape(row));
        assert_eq!(rs, (1, n), "add_row: row shape {rs:?} for matrix {m}x{n}");
        self.push(Op::AddRow(a, row), m, n)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let ((m, n), cs) = (self.shape(a), self.shape(col));
        assert_eq!(cs, (m, 1), "mul_col: column shape {cs:?} for matrix {m}x{n}");
        self.push(Op::MulCol(a, col), m, n)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, k), r, c)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::AddScalar(a, k), r, c)
    }

    /// Non-differentiable indicator: 1 where `a > 0`, `otherwise` elsewhere.
    pub fn mask(&mut self, a: Var, otherwise: f64) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Mask(a, otherwise), r, c)
    }

    /// Same value as `a`, but no gradient flows through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Detach(a), r, c)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Sin(a), r, c)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Cos(a), r, c)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Log(a), r, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Exp(a), r, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Square(a), r, c)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Recip(a), r, c)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Softplus(a), r, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid(a), r, c)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), 1, 1)
    }

    /// Like [`Graph::sum`], but bit-identical under any permutation of the
    /// elements.
    pub fn sum_invariant(&mut self, a: Var) -> Var {
        self.push(Op::SumSorted(a), 1, 1)
    }

    /// Like [`Graph::sum_rows`], but bit-identical under row permutations.
    pub fn sum_rows_invariant(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        self.push(Op::SumRowsSorted(a), 1, c)
    }

    /// Column sums: `(m,n) -> (1,n)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        self.push(Op::SumRows(a), 1, c)
    }

    /// Row sums: `(m,n) -> (m,1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        self.push(Op::SumCols(a), r, 1)
    }

    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1), "broadcast expects a scalar");
        self.push(Op::Broadcast(a, rows, cols), rows, cols)
    }

    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "repeat_rows expects a row vector");
        self.push(Op::RepeatRows(a, rows), rows, c)
    }

    pub fn repeat_cols(&mut self, a: Var, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "repeat_cols expects a column vector");
        self.push(Op::RepeatCols(a, cols), r, cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: row count mismatch");
            cols += c;
        }
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + width <= c, "slice_cols out of range");
        self.push(Op::SliceCols(a, start, width), r, width)
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + c <= total, "pad_cols out of range");
        self.push(Op::PadCols(a, start, total), r, total)
    }

    // ---- composites ----

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.mask(a, 0.0);
        self.mul(a, m)
    }

    /// Leaky ReLU. The derivative at zero is the negative-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let m = self.mask(a, slope);
        self.mul(a, m)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Mean over rows: `(m,n) -> (1,n)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// Row-permutation-invariant column means: `(m,n) -> (1,n)`.
    pub fn mean_rows_invariant(&mut self, a: Var) -> Var {
        let (r, _) = self.shape(a);
        let s = self.sum_rows_invariant(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// Mean squared error. The value does not depend on row order.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (r, c) = self.shape(pred);
        let d = self.sub(pred, target);
        let sq = self.square(d);
        let s = self.sum_invariant(sq);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// `x W + b` with `b` a row vector.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    // ---- differentiation ----

    fn diff_parents(op: &Op) -> Vec<Var> {
        use Op::*;
        match op {
            Input { .. } | Const(_) | Mask(..) | Detach(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | AddScalar(a, _) | Sin(a) | Cos(a) | Log(a) | Exp(a)
            | Square(a) | Recip(a) | Softplus(a) | Sigmoid(a) | Sum(a) | SumSorted(a) | SumRows(a)
            | SumRowsSorted(a) | SumCols(a) | Broadcast(a, ..) | RepeatRows(a, _) | RepeatCols(a, _)
            | SliceCols(a, ..) | PadCols(a, ..) => vec![*a],
            ConcatCols(parts) => parts.clone(),
        }
    }

    /// Appends nodes computing `d root / d wrt[i]` and returns them.
    ///
    /// `root` must be `1x1`. The returned nodes are ordinary graph nodes, so
    /// they can be differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows: r, cols: c });
        }
        let n = root.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                depends[i] = Self::diff_parents(&self.nodes[i].op)
                    .iter()
                    .any(|p| depends[p.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if depends[root.0] {
            adj[root.0] = Some(self.scalar(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            let contribs = self.backward_rule(&op, out, g, &depends);
            for (p, cg) in contribs {
                adj[p.0] = Some(match adj[p.0] {
                    None => cg,
                    Some(prev) => self.add(prev, cg),
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn backward_rule(&mut self, op: &Op, out: Var, g: Var, depends: &[bool]) -> Vec<(Var, Var)> {
        use Op::*;
        let want = |v: &Var| depends[v.0];
        let mut res = Vec::new();
        match *op {
            Input { .. } | Const(_) | Mask(..) | Detach(_) => {}
            MatMul(a, b) => {
                if want(&a) {
                    let bt = self.transpose(b);
                    res.push((a, self.matmul(g, bt)));
                }
                if want(&b) {
                    let at = self.transpose(a);
                    res.push((b, self.matmul(at, g)));
                }
            }
            Transpose(a) => res.push((a, self.transpose(g))),
            Add(a, b) => {
                if want(&a) {
                    res.push((a, g));
                }
                if want(&b) {
                    res.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(&a) {
                    res.push((a, g));
                }
                if want(&b) {
                    res.push((b, self.neg(g)));
                }
            }
            Mul(a, b) => {
                if want(&a) {
                    res.push((a, self.mul(g, b)));
                }
                if want(&b) {
                    res.push((b, self.mul(g, a)));
                }
            }
            AddRow(a, row) => {
                if want(&a) {
                    res.push((a, g));
                }
                if want(&row) {
                    res.push((row, self.sum_rows(g)));
                }
            }
            MulCol(a, col) => {
                if want(&a) {
                    res.push((a, self.mul_col(g, col)));
                }
                if want(&col) {
                    let ga = self.mul(g, a);
                    res.push((col, self.sum_cols(ga)));
                }
            }
            Scale(a, k) => res.push((a, self.scale(g, k))),
            AddScalar(a, _) => res.push((a, g)),
            Sin(a) => {
                let c = self.cos(a);
                res.push((a, self.mul(g, c)));
            }
            Cos(a) => {
                let s = self.sin(a);
                let gs = self.mul(g, s);
                res.push((a, self.neg(gs)));
            }
            Log(a) => {
                let r = self.recip(a);
                res.push((a, self.mul(g, r)));
            }
            Exp(a) => res.push((a, self.mul(g, out))),
            Square(a) => {
                let ga = self.mul(g, a);
                res.push((a, self.scale(ga, 2.0)));
            }
            Recip(a) => {
                let sq = self.square(out);
                let gs = self.mul(g, sq);
                res.push((a, self.neg(gs)));
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                res.push((a, self.mul(g, s)));
            }
            Sigmoid(a) => {
                let sq = self.square(out);
                let d = self.sub(out, sq);
                res.push((a, self.mul(g, d)));
            }
            Sum(a) | SumSorted(a) => {
                let (r, c) = self.shape(a);
                res.push((a, self.broadcast(g, r, c)));
            }
            SumRows(a) | SumRowsSorted(a) => {
                let (r, _) = self.shape(a);
                res.push((a, self.repeat_rows(g, r)));
            }
            SumCols(a) => {
                let (_, c) = self.shape(a);
                res.push((a, self.repeat_cols(g, c)));
            }
            Broadcast(a, ..) => res.push((a, self.sum(g))),
            RepeatRows(a, _) => res.push((a, self.sum_rows(g))),
            RepeatCols(a, _) => res.push((a, self.sum_cols(g))),
            ConcatCols(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if want(&p) {
                        res.push((p, self.slice_cols(g, offset, w)));
                    }
                    offset += w;
                }
            }
            SliceCols(a, start, _) => {
                let total = self.shape(a).1;
                res.push((a, self.pad_cols(g, start, total)));
            }
            PadCols(a, start, _) => {
                let w = self.shape(a).1;
                res.push((a, self.slice_cols(g, start, w)));
            }
        }
        res
    }

    // ---- evaluation ----

    /// Evaluates `outputs` given input bindings. Only the nodes the outputs
    /// depend on are computed.
    pub fn evaluate(
        &self,
        bindings: &Bindings<'_>,
        outputs: &[Var],
    ) -> Result<Vec<Tensor>, AutodiffError> {
        let Some(max) = outputs.iter().map(|v| v.0).max() else {
            return Ok(Vec::new());
        };
        let n = max + 1;
        let mut needed = vec![false; n];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..n).rev() {
            if needed[i] {
                self.for_each_parent(i, |p| needed[p] = true);
            }
        }

        let mut vals: Vec<Option<Cow<'_, Tensor>>> = vec![None; n];
        for &(v, t) in &bindings.values {
            if v.0 >= n || !needed[v.0] {
                continue;
            }
            let node = &self.nodes[v.0];
            let Op::Input { name } = &node.op else {
                return Err(AutodiffError::NotAnInput(v.0));
            };
            if t.shape() != (node.rows, node.cols) {
                return Err(AutodiffError::BindingShape {
                    name: name.clone(),
                    expected: (node.rows, node.cols),
                    got: t.shape(),
                });
            }
            vals[v.0] = Some(Cow::Borrowed(t));
        }

        for i in 0..n {
            if !needed[i] || vals[i].is_some() {
                continue;
            }
            let value = self.compute(i, &vals)?;
            vals[i] = Some(value);
        }

        Ok(outputs
            .iter()
            .map(|o| vals[o.0].as_ref().expect("evaluated").clone().into_owned())
            .collect())
    }

    /// Evaluates a single output.
    pub fn evaluate_one(&self, bindings: &Bindings<'_>, output: Var) -> Result<Tensor, AutodiffError> {
        Ok(self.evaluate(bindings, &[output])?.remove(0))
    }

    fn for_each_parent(&self, i: usize, mut f: impl FnMut(usize)) {
        use Op::*;
        match &self.nodes[i].op {
            Input { .. } | Const(_) => {}
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) => {
                f(a.0);
                f(b.0);
            }
            Transpose(a) | Scale(a, _) | AddScalar(a, _) | Mask(a, _) | Detach(a) | Sin(a)
            | Cos(a) | Log(a) | Exp(a) | Square(a) | Recip(a) | Softplus(a) | Sigmoid(a)
            | Sum(a) | SumSorted(a) | SumRows(a) | SumRowsSorted(a) | SumCols(a) | Broadcast(a, ..)
            | RepeatRows(a, _) | RepeatCols(a, _) | SliceCols(a, ..) | PadCols(a, ..) => f(a.0),
            ConcatCols(parts) => parts.iter().for_each(|p| f(p.0)),
        }
    }

    fn compute<'a>(
        &'a self,
        i: usize,
        vals: &[Option<Cow<'a, Tensor>>],
    ) -> Result<Cow<'a, Tensor>, AutodiffError> {
        use Op::*;
        let node = &self.nodes[i];
        let v = |x: &Var| -> &Tensor { vals[x.0].as_deref().expect("parent evaluated") };
        let t = match &node.op {
            Input { name } => return Err(AutodiffError::Unbound(name.clone())),
            Const(t) => return Ok(Cow::Borrowed(t)),
            MatMul(a, b) => v(a).matmul(v(b)),
            Transpose(a) => v(a).transpose(),
            Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
            Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y),
            Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
            AddRow(a, row) => {
                let (a, row) = (v(a), v(row));
                let mut out = a.clone();
                let c = a.cols();
                for (k, x) in out.data_mut().iter_mut().enumerate() {
                    *x += row.data()[k % c];
                }
                out
            }
            MulCol(a, col) => {
                let (a, col) = (v(a), v(col));
                let mut out = a.clone();
                let c = a.cols();
                for (k, x) in out.data_mut().iter_mut().enumerate() {
                    *x *= col.data()[k / c];
                }
                out
            }
            Scale(a, k) => v(a).map(|x| x * k),
            AddScalar(a, k) => v(a).map(|x| x + k),
            Mask(a, other) => v(a).map(|x| if x > 0.0 { 1.0 } else { *other }),
            Detach(a) => return Ok(Cow::Owned(v(a).clone())),
            Sin(a) => v(a).map(f64::sin),
            Cos(a) => v(a).map(f64::cos),
            Log(a) => v(a).map(f64::ln),
            Exp(a) => v(a).map(f64::exp),
            Square(a) => v(a).map(|x| x * x),
            Recip(a) => v(a).map(|x| 1.0 / x),
            Softplus(a) => v(a).map(softplus),
            Sigmoid(a) => v(a).map(sigmoid),
            Sum(a) => Tensor::scalar(v(a).sum()),
            SumSorted(a) => Tensor::scalar(sorted_sum(v(a).data().to_vec())),
            SumRowsSorted(a) => {
                let a = v(a);
                Tensor::row(
                    (0..a.cols())
                        .map(|c| sorted_sum((0..a.rows()).map(|r| a.get(r, c)).collect()))
                        .collect(),
                )
            }
            SumRows(a) => {
                let a = v(a);
                let mut out = Tensor::zeros(1, a.cols());
                for r in 0..a.rows() {
                    for (o, x) in out.data_mut().iter_mut().zip(a.row_slice(r)) {
                        *o += x;
                    }
                }
                out
            }
            SumCols(a) => {
                let a = v(a);
                Tensor::column((0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect())
            }
            Broadcast(a, r, c) => Tensor::filled(*r, *c, v(a).item()),
            RepeatRows(a, r) => {
                let a = v(a);
                let mut data = Vec::with_capacity(r * a.cols());
                for _ in 0..*r {
                    data.extend_from_slice(a.data());
                }
                Tensor::from_vec(*r, a.cols(), data)
            }
            RepeatCols(a, c) => {
                let a = v(a);
                let mut data = Vec::with_capacity(a.rows() * c);
                for &x in a.data() {
                    data.extend(std::iter::repeat_n(x, *c));
                }
                Tensor::from_vec(a.rows(), *c, data)
            }
            ConcatCols(parts) => {
                let mut data = Vec::with_capacity(node.rows * node.cols);
                for r in 0..node.rows {
                    for p in parts {
                        data.extend_from_slice(v(p).row_slice(r));
                    }
                }
                Tensor::from_vec(node.rows, node.cols, data)
            }
            SliceCols(a, start, w) => {
                let a = v(a);
                let mut data = Vec::with_capacity(a.rows() * w);
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(r)[*start..start + w]);
                }
                Tensor::from_vec(a.rows(), *w, data)
            }
            PadCols(a, start, total) => {
                let a = v(a);
                let mut out = Tensor::zeros(a.rows(), *total);
                for r in 0..a.rows() {
                    for (k, &x) in a.row_slice(r).iter().enumerate() {
                        out.set(r, start + k, x);
                    }
                }
                out
            }
        };
        Ok(Cow::Owned(t))
    }
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
