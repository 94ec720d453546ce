use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Tanh,
    Relu,
    Abs,
    Sqrt,
    Square,
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// The right shape equals a suffix of the left shape.
    Leading,
}

/// What a custom backward rule receives.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub output: &'a [f64],
    pub grad_output: &'a [f64],
}

/// Vector-Jacobian product of a fused op: one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum {
        a: Var,
    },
    SumCols {
        a: Var,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    SliceCols {
        a: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    ExpandCols {
        a: Var,
        n: usize,
    },
    GatherRows {
        a: Var,
        index: Vec<usize>,
        width: usize,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run reverse-mode tape over dense `f64` tensors.
///
/// Nodes are appended in forward execution order; `backward` walks them once
/// in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on non-scalar");
        val[0]
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a leaf that requires grad regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var, AutodiffError> {
        if numel(shape) != values.len() {
            return Err(AutodiffError::InvalidShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    // ---------------------------------------------------------------- element-wise

    /// Unified element-wise entry point. Binary kinds require `b`.
    pub fn elementwise(
        &mut self,
        op: ElementwiseOp,
        a: Var,
        b: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let need_b = |b: Option<Var>| {
            b.ok_or(AutodiffError::MissingOperand {
                op: match op {
                    ElementwiseOp::Add => "add",
                    ElementwiseOp::Sub => "sub",
                    ElementwiseOp::Mul => "mul",
                    _ => "div",
                },
            })
        };
        match op {
            ElementwiseOp::Add => self.add(a, need_b(b)?),
            ElementwiseOp::Sub => self.sub(a, need_b(b)?),
            ElementwiseOp::Mul => self.mul(a, need_b(b)?),
            ElementwiseOp::Div => self.div(a, need_b(b)?),
            ElementwiseOp::Exp => Ok(self.exp(a)),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::Tanh => Ok(self.tanh(a)),
            ElementwiseOp::Relu => Ok(self.relu(a)),
        }
    }

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<Broadcast, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if numel(sb) == 1 {
            Ok(Broadcast::Scalar)
        } else if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Broadcast::Leading)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let bcast = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let nb = vb.len();
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
            BinaryKind::Div => |x, y| x / y,
        };
        let value: Vec<f64> = match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::Leading => va
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % nb]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, rg, Op::Binary { kind, a, b, bcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Ln => f64::ln,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryKind::Abs => f64::abs,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |x| x * x,
        };
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, rg, Op::Unary { kind, a })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    /// `a * scale`
    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x * scale).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, rg, Op::Affine { a, scale })
    }

    /// `a + shift`, gradient passes through unchanged.
    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let c = self.scalar(shift);
        self.binary(BinaryKind::Add, a, c)
            .expect("scalar broadcast always matches")
    }

    /// Identity forward; the result never carries gradient back to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, rg, Op::Clamp { a, lo, hi })
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, m, k, n }))
    }

    // ---------------------------------------------------------------- reductions and layout

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of a matrix: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.matrix_dims("sum_cols", a)?;
        let v = self.value(a);
        let out = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m, 1], out, rg, Op::SumCols { a, cols: n }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if numel(shape) != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { a }))
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if start + len > n {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![m, len],
            out,
            rg,
            Op::SliceCols {
                a,
                cols: n,
                start,
                len,
            },
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::MissingOperand { op: "concat_cols" })?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(vec![m, total], out, rg, Op::ConcatCols { parts }))
    }

    /// Repeats a column vector: `[m, 1] -> [m, n]`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var, AutodiffError> {
        let (m, c) = self.matrix_dims("expand_cols", a)?;
        if c != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "expand_cols",
                lhs: vec![m, c],
                rhs: vec![m, 1],
            });
        }
        let v = self.value(a);
        let out = (0..m * n).map(|i| v[i / n]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![m, n], out, rg, Op::ExpandCols { a, n }))
    }

    /// Selects rows (along the leading dimension) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let rows = shape.first().copied().unwrap_or(0);
        let width: usize = shape.iter().skip(1).product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: rows });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        let rg = self.rg(a);
        Ok(self.push(
            new_shape,
            out,
            rg,
            Op::GatherRows {
                a,
                index: index.to_vec(),
                width,
            },
        ))
    }

    /// Records a fused operation with a hand-written vector-Jacobian product.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Var, AutodiffError> {
        if numel(&shape) != value.len() {
            return Err(AutodiffError::InvalidShape {
                shape,
                len: value.len(),
            });
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates gradients from a scalar `loss` (seed 1.0) to every
    /// reachable node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of `v` into `t` (zeros when unreachable).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<(), AutodiffError> {
        let g = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        };
        t.set_grad(g)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let nb = vb.len();
                let bi = |j: usize| match bcast {
                    Broadcast::Same => j,
                    Broadcast::Scalar => 0,
                    Broadcast::Leading => j % nb,
                };
                acc(*a, &mut |ga| {
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gj,
                            BinaryKind::Mul => gj * vb[bi(j)],
                            BinaryKind::Div => gj / vb[bi(j)],
                        };
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, gj) in g.iter().enumerate() {
                        let y = vb[bi(j)];
                        gb[bi(j)] += match kind {
                            BinaryKind::Add => *gj,
                            BinaryKind::Sub => -gj,
                            BinaryKind::Mul => gj * va[j],
                            BinaryKind::Div => -gj * va[j] / (y * y),
                        };
                    }
                });
            }
            Op::Unary { kind, a } => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j]
                            * match kind {
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Exp => y[j],
                                UnaryKind::Ln => 1.0 / x[j],
                                UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                                UnaryKind::Tanh => 1.0 - y[j] * y[j],
                                UnaryKind::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::Sqrt => 0.5 / y[j],
                                UnaryKind::Square => 2.0 * x[j],
                            };
                    }
                });
            }
            Op::Affine { a, scale } => acc(*a, &mut |ga| {
                for (o, gj) in ga.iter_mut().zip(g) {
                    *o += gj * scale;
                }
            }),
            Op::Clamp { a, lo, hi } => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        if x[j] > *lo && x[j] < *hi {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                // dA = dC · Bᵀ
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SumCols { a, cols } => acc(*a, &mut |ga| {
                for (j, o) in ga.iter_mut().enumerate() {
                    *o += g[j / cols];
                }
            }),
            Op::Reshape { a } => acc(*a, &mut |ga| {
                for (o, gj) in ga.iter_mut().zip(g) {
                    *o += gj;
                }
            }),
            Op::SliceCols {
                a,
                cols,
                start,
                len,
            } => acc(*a, &mut |ga| {
                let rows = g.len() / len.max(&1);
                for i in 0..rows {
                    for c in 0..*len {
                        ga[i * cols + start + c] += g[i * len + c];
                    }
                }
            }),
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |gp| {
                        for i in 0..rows {
                            for c in 0..w {
                                gp[i * w + c] += g[i * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ExpandCols { a, n } => acc(*a, &mut |ga| {
                for (j, gj) in g.iter().enumerate() {
                    ga[j / n] += gj;
                }
            }),
            Op::GatherRows { a, index, width } => acc(*a, &mut |ga| {
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..*width {
                        ga[src * width + c] += g[r * width + c];
                    }
                }
            }),
            Op::Custom {
                name,
                inputs,
                backward,
            } => {
                let ctx = BackwardCtx {
                    inputs: inputs.iter().map(|v| self.nodes[v.0].value.as_slice()).collect(),
                    output: &node.value,
                    grad_output: g,
                };
                let result = backward(&ctx);
                assert_eq!(result.len(), inputs.len(), "custom op {name}: gradient arity");
                for (&v, gi) in inputs.iter().zip(result) {
                    if let Some(gi) = gi {
                        assert_eq!(
                            gi.len(),
                            self.nodes[v.0].value.len(),
                            "custom op {name}: gradient length"
                        );
                        acc(v, &mut |slot| {
                            for (o, x) in slot.iter_mut().zip(&gi) {
                                *o += x;
                            }
                        });
                    }
                }
            }
        }
    }
}
