use crate::array::Array;
use crate::error::TapeError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddConst(Var),
    MulConst(Var, Array),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Index(Var, usize),
    Outer(Var, Var),
    Embed(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dot(..) => "dot",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Index(..) => "index",
            Op::Outer(..) => "outer",
            Op::Embed(..) => "embed",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Array,
    name: Option<String>,
}

/// A single-use reverse-mode tape.
///
/// Values are computed eagerly as nodes are pushed, so every node's inputs
/// precede it. [`Tape::forward`] designates the scalar loss and validates the
/// recorded values; [`Tape::backward`] consumes the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    loss: Option<Var>,
}

/// Gradients of a loss with respect to every trainable leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    loss: f64,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Gradient for a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics on non-parameters.
    pub fn wrt(&self, var: Var) -> &Array {
        self.get(var)
            .unwrap_or_else(|| panic!("node {} is not a trainable leaf", var.0))
    }
}

type Result<T> = std::result::Result<T, TapeError>;

fn row_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

fn softmax_rows(a: &Array) -> Array {
    let (rows, cols) = a.as_rows().expect("checked rank");
    let mut out = a.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Array::new(a.shape().to_vec(), out)
}

fn log_softmax_rows(a: &Array) -> Array {
    let (rows, cols) = a.as_rows().expect("checked rank");
    let mut out = a.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Array::new(a.shape().to_vec(), out)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
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

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node {
            op,
            value,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> TapeError {
        TapeError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(Op::Leaf { trainable: true }, value)
    }

    pub fn named_param(&mut self, name: impl Into<String>, value: Array) -> Var {
        let v = self.param(value);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf { trainable: false }, value)
    }

    pub fn is_param(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Leaf { trainable: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::MulScalar(a, c), v)
    }

    /// `a + c` for a constant array `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Array) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(self.mismatch(
                "add_const",
                format!("{:?} vs {:?}", self.value(a).shape(), c.shape()),
            ));
        }
        let v = self.value(a).zip_map(c, |x, y| x + y);
        Ok(self.push(Op::AddConst(a), v))
    }

    /// `a ⊙ c` for a constant array `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(self.mismatch(
                "mul_const",
                format!("{:?} vs {:?}", self.value(a).shape(), c.shape()),
            ));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(Op::MulConst(a, c), v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// `max(0, a)`; subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// Hinge `max(0, u)`, the same primitive as [`Tape::relu`].
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    /// `|a|`; subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array::scalar(x.sum() / x.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Inner product of two equally shaped arrays.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Array::scalar(s)))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Array::matrix(m, n, out)))
    }

    /// Adds vector `row` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", a, row, |x, r| x + r)
            .map(|v| self.push(Op::AddRow(a, row), v))
    }

    /// Multiplies every row of matrix `a` elementwise by vector `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("mul_row", a, row, |x, r| x * r)
            .map(|v| self.push(Op::MulRow(a, row), v))
    }

    fn row_op(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        let cols = match (sa, sr) {
            ([_, c], [n]) if c == n => *c,
            _ => return Err(self.mismatch(op, format!("{sa:?} with row {sr:?}"))),
        };
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % cols]))
            .collect();
        Ok(Array::new(sa.to_vec(), data))
    }

    /// Multiplies array `a` by the scalar node `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch(
                "scale",
                format!("scale factor has shape {:?}", self.value(s).shape()),
            ));
        }
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        Ok(self.push(Op::Scale(a, s), v))
    }

    /// Softmax along the last axis of a 1-D or 2-D array (max-shifted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_rows("softmax", a)?;
        let v = softmax_rows(self.value(a));
        Ok(self.push(Op::Softmax(a), v))
    }

    /// Log-softmax along the last axis via max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_rows("log_softmax", a)?;
        let v = log_softmax_rows(self.value(a));
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    fn check_rows(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        self.value(a)
            .as_rows()
            .ok_or_else(|| self.mismatch(op, format!("rank of {:?}", self.value(a).shape())))
    }

    /// Scalar at flat position `i`.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let len = self.value(a).len();
        if i >= len {
            return Err(self.mismatch("index", format!("index {i} out of {len}")));
        }
        let v = Array::scalar(self.value(a).data()[i]);
        Ok(self.push(Op::Index(a, i), v))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, n) = match (sa, sb) {
            ([m], [n]) => (*m, *n),
            _ => return Err(self.mismatch("outer", format!("{sa:?} x {sb:?}"))),
        };
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for xi in x {
            out.extend(y.iter().map(|yj| xi * yj));
        }
        Ok(self.push(Op::Outer(a, b), Array::matrix(m, n, out)))
    }

    /// Places the entries of vector `a` at `positions` in a zero vector of `len`.
    pub fn embed(&mut self, a: Var, positions: &[usize], len: usize) -> Result<Var> {
        let sa = self.value(a).shape();
        if sa != [positions.len()] || positions.iter().any(|&p| p >= len) {
            return Err(self.mismatch("embed", format!("{sa:?} into {len} at {positions:?}")));
        }
        let mut out = vec![0.0; len];
        for (&p, &v) in positions.iter().zip(self.value(a).data()) {
            out[p] = v;
        }
        Ok(self.push(Op::Embed(a, positions.to_vec()), Array::vector(out)))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != len {
            return Err(self.mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let v = Array::new(shape.to_vec(), self.value(a).data().to_vec());
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Mean negative log-likelihood of integer `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.check_rows("cross_entropy", logits)?;
        if labels.len() != rows || labels.iter().any(|&l| l >= cols) {
            return Err(self.mismatch(
                "cross_entropy",
                format!("{rows}x{cols} logits with {} labels", labels.len()),
            ));
        }
        let lp = log_softmax_rows(self.value(logits));
        let nll = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -lp.data()[r * cols + l])
            .sum::<f64>()
            / rows as f64;
        Ok(self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            Array::scalar(nll),
        ))
    }

    /// Designates `loss` as the scalar output and validates every recorded
    /// value up to it.
    pub fn forward(&mut self, loss: Var) -> Result<f64> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss { shape });
        }
        if let Some((i, node)) = self.nodes[..=loss.0]
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
        {
            return Err(TapeError::NonFinite {
                node: i,
                op: node.op.name(),
                name: node.name.clone(),
            });
        }
        self.loss = Some(loss);
        Ok(self.value(loss).item())
    }

    /// Reverse sweep from the loss designated by [`Tape::forward`].
    ///
    /// Every trainable leaf gets a gradient; leaves off every path to the loss
    /// get exact zeros.
    pub fn backward(self) -> Result<Gradients> {
        let loss = self.loss.ok_or(TapeError::NotEvaluated)?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = vec![None; n];
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { trainable } = node.op {
                if trainable {
                    grads[i] = Some(g);
                }
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let loss_value = self.value(loss).item();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { trainable: true } => {
                    if grads[i].is_none() {
                        grads[i] = Some(Array::zeros(node.value.shape()));
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients {
            loss: loss_value,
            grads,
        })
    }

    fn propagate(&self, op: &Op, out: &Array, g: &Array, grads: &mut [Option<Array>]) {
        let mut acc = |v: Var, d: Array| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.zip_map(vb, |x, y| x / y));
                let gb = Array::new(
                    vb.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                        .collect(),
                );
                acc(*b, gb);
            }
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::AddScalar(a) | Op::AddConst(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.map(|x| x * c)),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(val(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => acc(*a, Array::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let va = val(*a);
                acc(*a, Array::full(va.shape(), g.item() / va.len() as f64));
            }
            Op::Dot(a, b) => {
                let s = g.item();
                acc(*a, val(*b).map(|y| y * s));
                acc(*b, val(*a).map(|y| y * s));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let bt = transpose(vb.data(), k, n);
                acc(*a, Array::matrix(m, k, matmul(g.data(), &bt, m, n, k)));
                let at = transpose(va.data(), m, k);
                acc(*b, Array::matrix(k, n, matmul(&at, g.data(), k, m, n)));
            }
            Op::AddRow(a, r) => {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                acc(*a, g.clone());
                acc(*r, Array::vector(row_sums(g.data(), rows, cols)));
            }
            Op::MulRow(a, r) => {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let rv = val(*r).data();
                let ga = Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * rv[i % cols])
                        .collect(),
                );
                acc(*a, ga);
                let prod = g.zip_map(val(*a), |x, y| x * y);
                acc(*r, Array::vector(row_sums(prod.data(), rows, cols)));
            }
            Op::Scale(a, s) => {
                let c = val(*s).item();
                acc(*a, g.map(|x| x * c));
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(*s, Array::full(val(*s).shape(), gs));
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.as_rows().expect("rank checked");
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (y, gy) = (&out.data()[span.clone()], &g.data()[span.clone()]);
                    let inner: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    for (j, dj) in d[span].iter_mut().enumerate() {
                        *dj = y[j] * (gy[j] - inner);
                    }
                }
                acc(*a, Array::new(out.shape().to_vec(), d));
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = out.as_rows().expect("rank checked");
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (l, gl) = (&out.data()[span.clone()], &g.data()[span.clone()]);
                    let total: f64 = gl.iter().sum();
                    for (j, dj) in d[span].iter_mut().enumerate() {
                        *dj = gl[j] - l[j].exp() * total;
                    }
                }
                acc(*a, Array::new(out.shape().to_vec(), d));
            }
            Op::Index(a, i) => {
                let mut d = Array::zeros(val(*a).shape());
                d.data_mut()[*i] = g.item();
                acc(*a, d);
            }
            Op::Outer(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let n = y.len();
                let ga = (0..x.len())
                    .map(|i| (0..n).map(|j| g.data()[i * n + j] * y[j]).sum())
                    .collect();
                let gb = (0..n)
                    .map(|j| (0..x.len()).map(|i| g.data()[i * n + j] * x[i]).sum())
                    .collect();
                acc(*a, Array::vector(ga));
                acc(*b, Array::vector(gb));
            }
            Op::Embed(a, positions) => {
                acc(
                    *a,
                    Array::vector(positions.iter().map(|&p| g.data()[p]).collect()),
                );
            }
            Op::Reshape(a) => {
                acc(*a, Array::new(val(*a).shape().to_vec(), g.data().to_vec()));
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = val(*logits);
                let (rows, cols) = lv.as_rows().expect("rank checked");
                let mut d = softmax_rows(lv).into_data();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * cols + l] -= 1.0;
                }
                let s = g.item() / rows as f64;
                d.iter_mut().for_each(|v| *v *= s);
                acc(*logits, Array::new(lv.shape().to_vec(), d));
            }
        }
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_rows(&Array::vector(logits.to_vec())).into_data()
}

/// `log(sum(exp(x)))` in max-shifted form.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_vector() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        assert_eq!(t.forward(s).unwrap(), 6.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Array::vector(vec![0.0, 0.0]));
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(Array::matrix(1, 2, vec![0.0, 0.0]));
        let l = t.cross_entropy(x, &[1]).unwrap();
        let v = t.forward(l).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(3.0));
        let y = t.square(x);
        t.forward(y).unwrap();
        assert_eq!(t.backward().unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn softmax_dot_jacobian() {
        let mut t = Tape::new();
        let phi = t.param(Array::vector(vec![0.0, 0.0]));
        let v = t.constant(Array::vector(vec![1.0, 0.0]));
        let p = t.softmax(phi).unwrap();
        let l = t.dot(p, v).unwrap();
        t.forward(l).unwrap();
        let g = t.backward().unwrap();
        assert_eq!(g.wrt(phi).data(), &[0.25, -0.25]);
    }

    #[test]
    fn abs_and_hinge_kinks_have_zero_subgradient() {
        for hinge in [false, true] {
            let mut t = Tape::new();
            let u = t.param(Array::scalar(0.0));
            let y = if hinge { t.hinge(u) } else { t.abs(u) };
            t.forward(y).unwrap();
            assert_eq!(t.backward().unwrap().wrt(u).item(), 0.0);
        }
    }

    #[test]
    fn disconnected_param_gets_exact_zero() {
        let mut t = Tape::new();
        let x = t.param(Array::vector(vec![1.0, 2.0]));
        let unused = t.param(Array::matrix(2, 2, vec![1.0; 4]));
        let s = t.sum(x);
        t.forward(s).unwrap();
        let g = t.backward().unwrap();
        assert_eq!(g.wrt(unused), &Array::zeros(&[2, 2]));
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(1.0));
        let _ = t.square(x);
        assert!(matches!(t.backward(), Err(TapeError::NotEvaluated)));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut t = Tape::new();
        let a = t.constant(Array::vector(vec![1.0, 2.0]));
        let b = t.constant(Array::vector(vec![1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(TapeError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_first_offending_node() {
        let mut t = Tape::new();
        let a = t.constant(Array::vector(vec![0.0, 1.0]));
        let l = t.log(a);
        let e = t.exp(l);
        let s = t.sum(e);
        match t.forward(s) {
            Err(TapeError::NonFinite { node, op, .. }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "log");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Array::scalar(2.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        t.forward(z).unwrap();
        assert_eq!(t.backward().unwrap().wrt(x).item(), 5.0);
    }
}
