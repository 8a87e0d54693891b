use std::borrow::Cow;

use super::{check_finite, numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Transpose(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(usize),
    CausalSoftmax {
        x: usize,
        scale: S,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    Abs(usize),
}

struct Node<'a, S: Clone> {
    value: Cow<'a, [S]>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to a leaf, or `None` when the leaf
    /// does not require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get), but unreachable grad-requiring leaves read as zeros.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v).map_or_else(|| vec![S::zero(); len], <[S]>::to_vec)
    }
}

/// Tape of recorded operations. Operands always precede their results, so a
/// single reverse sweep visits nodes in topological order.
///
/// Leaves may borrow their data (frozen weights are never copied).
pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected 2-D operand, got {shape:?}"))),
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let buf = slot.get_or_insert_with(|| vec![S::zero(); len]);
    f(buf);
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record so the graph can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Cow<'a, [S]>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        name: &'static str,
        value: Vec<S>,
        shape: Vec<usize>,
        op: Op<S>,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        debug_assert_eq!(numel(&shape), value.len());
        Ok(self.push(Cow::Owned(value), shape, op, needs_grad))
    }

    fn node(&self, v: Var) -> &Node<'a, S> {
        &self.nodes[v.0]
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf borrowing the tensor's data; it takes part in
    /// differentiation iff the tensor has `requires_grad` set.
    pub fn input(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that owns its data.
    pub fn owned(&mut self, t: Tensor<S>) -> Var {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, needs_grad)
    }

    /// Records a leaf over a borrowed slice.
    pub fn slice_leaf(&mut self, shape: &[usize], data: &'a [S], requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("slice_leaf", format!("{shape:?} vs {} values", data.len())));
        }
        check_finite("slice_leaf", data)?;
        Ok(self.push(Cow::Borrowed(data), shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::from_fn(n.shape.clone(), |i| n.value[i])
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let n = self.node(v);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::dim("scalar_value", format!("shape {:?}", n.shape)))
        }
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// General product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = dims2("matmul", self.shape(a))?;
        let (br, bc) = dims2("matmul", self.shape(b))?;
        let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
        let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a),
            rsa,
            csa,
            self.value(b),
            rsb,
            csb,
            S::zero(),
            &mut out,
            n,
            1,
        );
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push_op("matmul", out, vec![m, n], Op::MatMul { a: a.0, b: b.0, ta, tb }, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Vec<S> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push_op("add", out, self.shape(a).to_vec(), Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push_op("sub", out, self.shape(a).to_vec(), Op::Sub(a.0, b.0), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let needs = self.grad_of(a) || self.grad_of(b);
        self.push_op("mul", out, self.shape(a).to_vec(), Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.grad_of(a);
        self.push_op("scale", out, self.shape(a).to_vec(), Op::Scale(a.0, c), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let out = (0..r * c).map(|i| src[(i % r) * c + i / r]).collect();
        let needs = self.grad_of(a);
        self.push_op("transpose", out, vec![c, r], Op::Transpose(a.0), needs)
    }

    /// Gathers rows of a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embedding", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                op: "embedding",
                detail: format!("id {bad} outside table of {v} rows"),
            });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.grad_of(table);
        self.push_op(
            "embedding",
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (r, d) = dims2("layer_norm", self.shape(x))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer_norm", "gain/bias length must equal row width"));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let dn = S::lit(d as f64);
        let mut xhat = vec![S::zero(); r * d];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.grad_of(x) || self.grad_of(gamma) || self.grad_of(beta);
        let (xhat, rstd) = if needs { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push_op(
            "layer_norm",
            out,
            vec![r, d],
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = S::lit(GELU_C);
        let k = S::lit(GELU_K);
        let half = S::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let needs = self.grad_of(x);
        self.push_op("gelu", out, self.shape(x).to_vec(), Op::Gelu(x.0), needs)
    }

    /// Row-wise softmax of `scale * x` with a causal mask: entry `(i, j)` is
    /// zero for `j > i`.
    pub fn causal_softmax(&mut self, x: Var, scale: S) -> Result<Var> {
        let (r, c) = dims2("causal_softmax", self.shape(x))?;
        let xs = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let visible = (i + 1).min(c);
            let row = &xs[i * c..i * c + visible];
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v * scale));
            let mut total = S::zero();
            for j in 0..visible {
                let e = (row[j] * scale - max).exp();
                out[i * c + j] = e;
                total += e;
            }
            for o in &mut out[i * c..i * c + visible] {
                *o /= total;
            }
        }
        let needs = self.grad_of(x);
        self.push_op(
            "causal_softmax",
            out,
            vec![r, c],
            Op::CausalSoftmax { x: x.0, scale },
            needs,
        )
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])` over the rows of
    /// a `[n x V]` logit matrix. Rows with zero weight are skipped entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Result<Var> {
        let (n, v) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} rows but {} targets and {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("target {bad} outside vocabulary of {v}"),
            });
        }
        let needs = self.grad_of(logits);
        let xs = self.value(logits);
        let mut probs = if needs { vec![S::zero(); n * v] } else { Vec::new() };
        let mut loss = S::zero();
        for r in 0..n {
            let w = weights[r];
            if w == S::zero() {
                continue;
            }
            let row = &xs[r * v..(r + 1) * v];
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(ai, m), (j, &x)| if x > m { (j, x) } else { (ai, m) });
            // log-sum-exp as max + ln(1 + Σ_{j≠argmax} e^{x_j − max}) keeps
            // precision when one logit dominates.
            let rest: S = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &x)| (x - max).exp())
                .sum();
            let log_total = rest.ln_1p();
            let lse = max + log_total;
            loss += w * ((max - row[targets[r]]) + log_total);
            if needs {
                for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                    *p = (x - lse).exp();
                }
            }
        }
        self.push_op(
            "cross_entropy",
            vec![loss],
            Vec::new(),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// `−log softmax(logits)[target]` for a single 1-D logit vector, using the
    /// log-sum-exp stabilized form.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = match shape[..] {
            [v] => v,
            [1, v] => v,
            _ => {
                return Err(Error::dim(
                    "softmax_cross_entropy",
                    format!("expected a logit vector, got {shape:?}"),
                ))
            }
        };
        if target >= v {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                detail: format!("target {target} outside vocabulary of {v}"),
            });
        }
        let row = if shape.len() == 1 {
            self.reshape_row(logits)?
        } else {
            logits
        };
        self.cross_entropy(row, &[target], &[S::one()])
    }

    // 1-D vector viewed as a single row; implemented as a full-width slice.
    fn reshape_row(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).to_vec();
        let n = v.len();
        let needs = self.grad_of(x);
        self.push_op(
            "reshape",
            v,
            vec![1, n],
            Op::Slice {
                x: x.0,
                axis: 2,
                start: 0,
            },
            needs,
        )
    }

    /// Rows (`axis == 0`) or columns (`axis == 1`) `start..end` of a 2-D value.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.shape(x))?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(Error::dim("slice", format!("axis {axis} on a 2-D value"))),
        };
        if start > end || end > extent {
            return Err(Error::Index {
                op: "slice",
                detail: format!("range {start}..{end} outside extent {extent}"),
            });
        }
        let src = self.value(x);
        let (out, shape) = if axis == 0 {
            (src[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (out, vec![r, w])
        };
        let needs = self.grad_of(x);
        self.push_op("slice", out, shape, Op::Slice { x: x.0, axis, start }, needs)
    }

    /// Concatenates 2-D values along rows (`axis == 0`) or columns (`axis == 1`).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero operands"));
        }
        let shapes = xs
            .iter()
            .map(|&x| dims2("concat", self.shape(x)))
            .collect::<Result<Vec<_>>>()?;
        let (r0, c0) = shapes[0];
        let (out, shape) = match axis {
            0 => {
                if shapes.iter().any(|&(_, c)| c != c0) {
                    return Err(Error::dim("concat", "column counts differ"));
                }
                let mut out = Vec::new();
                for &x in xs {
                    out.extend_from_slice(self.value(x));
                }
                let rows = shapes.iter().map(|s| s.0).sum();
                (out, vec![rows, c0])
            }
            1 => {
                if shapes.iter().any(|&(r, _)| r != r0) {
                    return Err(Error::dim("concat", "row counts differ"));
                }
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for (&x, &(_, c)) in xs.iter().zip(&shapes) {
                        out.extend_from_slice(&self.value(x)[i * c..(i + 1) * c]);
                    }
                }
                (out, vec![r0, cols])
            }
            _ => return Err(Error::dim("concat", format!("axis {axis} on 2-D values"))),
        };
        let needs = xs.iter().any(|&x| self.grad_of(x));
        self.push_op(
            "concat",
            out,
            shape,
            Op::Concat {
                xs: xs.iter().map(|x| x.0).collect(),
                axis,
            },
            needs,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().copied().sum::<S>();
        let needs = self.grad_of(a);
        self.push_op("sum", vec![total], Vec::new(), Op::Sum(a.0), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::contract("mean of an empty value"));
        }
        let total = self.value(a).iter().copied().sum::<S>() / S::lit(n as f64);
        let needs = self.grad_of(a);
        self.push_op("mean", vec![total], Vec::new(), Op::Mean(a.0), needs)
    }

    /// Elementwise `|a|`; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v.abs()).collect();
        let needs = self.grad_of(a);
        self.push_op("abs", out, self.shape(a).to_vec(), Op::Abs(a.0), needs)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recording: a second
    /// call fails until [`reset`](Self::reset).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::State("graph already consumed by a backward pass".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss is not recorded on this graph".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let len = |j: usize| self.nodes[j].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (ar, ac) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let (br, bc) = (self.nodes[b].shape[0], self.nodes[b].shape[1]);
                let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
                let (_, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
                if needs(a) {
                    let bv = &self.nodes[b].value;
                    add_into(&mut grads[a], len(a), |ga| {
                        // d op(a) = g · op(b)ᵀ, written through op(a)'s strides.
                        S::gemm(m, n, k, S::one(), g, n, 1, bv, csb, rsb, S::one(), ga, rsa, csa);
                    });
                }
                if needs(b) {
                    let av = &self.nodes[a].value;
                    add_into(&mut grads[b], len(b), |gb| {
                        // d op(b) = op(a)ᵀ · g
                        S::gemm(k, m, n, S::one(), av, csa, rsa, g, n, 1, S::one(), gb, rsb, csb);
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if needs(*a) {
                    add_into(&mut grads[*a], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                    });
                }
                if needs(*b) {
                    add_into(&mut grads[*b], g.len(), |gb| {
                        if neg {
                            gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                        } else {
                            gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let bv = &self.nodes[b].value;
                    add_into(&mut grads[a], g.len(), |ga| {
                        for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv.iter()) {
                            *x += y * w;
                        }
                    });
                }
                if needs(b) {
                    let av = &self.nodes[a].value;
                    add_into(&mut grads[b], g.len(), |gb| {
                        for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av.iter()) {
                            *x += y * w;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    add_into(&mut grads[*a], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)
                    });
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    // out is [c x r]; a is [r x c]
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    add_into(&mut grads[*a], r * c, |ga| {
                        for p in 0..r {
                            for q in 0..c {
                                ga[p * c + q] += g[q * r + p];
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = self.nodes[*table].shape[1];
                    add_into(&mut grads[*table], len(*table), |gt| {
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[row * d + j];
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.nodes[*x].shape[1];
                let r = rstd.len();
                if needs(*gamma) {
                    add_into(&mut grads[*gamma], d, |gg| {
                        for i in 0..r {
                            for j in 0..d {
                                gg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    });
                }
                if needs(*beta) {
                    add_into(&mut grads[*beta], d, |gb| {
                        for i in 0..r {
                            for j in 0..d {
                                gb[j] += g[i * d + j];
                            }
                        }
                    });
                }
                if needs(*x) {
                    let gam = &self.nodes[*gamma].value;
                    let dn = S::lit(d as f64);
                    add_into(&mut grads[*x], r * d, |gx| {
                        for i in 0..r {
                            let mut m1 = S::zero();
                            let mut m2 = S::zero();
                            for j in 0..d {
                                let dh = g[i * d + j] * gam[j];
                                m1 += dh;
                                m2 += dh * xhat[i * d + j];
                            }
                            m1 /= dn;
                            m2 /= dn;
                            for j in 0..d {
                                let dh = g[i * d + j] * gam[j];
                                gx[i * d + j] += rstd[i] * (dh - m1 - xhat[i * d + j] * m2);
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let c = S::lit(GELU_C);
                    let k = S::lit(GELU_K);
                    let half = S::lit(0.5);
                    let three = S::lit(3.0);
                    let av = &self.nodes[*a].value;
                    add_into(&mut grads[*a], g.len(), |ga| {
                        for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                            let t = (c * (v + k * v * v * v)).tanh();
                            let dt = (S::one() - t * t) * c * (S::one() + three * k * v * v);
                            *x += y * (half * (S::one() + t) + half * v * dt);
                        }
                    });
                }
            }
            Op::CausalSoftmax { x, scale } => {
                if needs(*x) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let p = &node.value;
                    add_into(&mut grads[*x], r * c, |gx| {
                        for i in 0..r {
                            let visible = (i + 1).min(c);
                            let row = i * c..i * c + visible;
                            let dot: S = g[row.clone()]
                                .iter()
                                .zip(&p[row.clone()])
                                .map(|(&a, &b)| a * b)
                                .sum();
                            for j in row {
                                gx[j] += *scale * p[j] * (g[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let v = self.nodes[*logits].shape[1];
                    let up = g[0];
                    add_into(&mut grads[*logits], len(*logits), |gl| {
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == S::zero() {
                                continue;
                            }
                            let scale = up * w;
                            for j in 0..v {
                                gl[r * v + j] += scale * probs[r * v + j];
                            }
                            gl[r * v + t] -= scale;
                        }
                    });
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(*x) {
                    let (x, axis, start) = (*x, *axis, *start);
                    let src_shape = &self.nodes[x].shape;
                    add_into(&mut grads[x], len(x), |gx| match axis {
                        0 => {
                            let c = src_shape[1];
                            for (dst, &v) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                                *dst += v;
                            }
                        }
                        1 => {
                            let (r, c) = (src_shape[0], src_shape[1]);
                            let w = g.len() / r.max(1);
                            for i in 0..r {
                                for j in 0..w {
                                    gx[i * c + start + j] += g[i * w + j];
                                }
                            }
                        }
                        _ => gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                    });
                }
            }
            Op::Concat { xs, axis } => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    if needs(x) {
                        add_into(&mut grads[x], r * c, |gx| {
                            if *axis == 0 {
                                for (d, &v) in gx.iter_mut().zip(&g[offset * c..(offset + r) * c]) {
                                    *d += v;
                                }
                            } else {
                                for i in 0..r {
                                    for j in 0..c {
                                        gx[i * c + j] += g[i * total_cols + offset + j];
                                    }
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if needs(*a) {
                    let n = len(*a);
                    let up = if matches!(node.op, Op::Mean(_)) {
                        g[0] / S::lit(n as f64)
                    } else {
                        g[0]
                    };
                    add_into(&mut grads[*a], n, |ga| ga.iter_mut().for_each(|x| *x += up));
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let av = &self.nodes[*a].value;
                    add_into(&mut grads[*a], g.len(), |ga| {
                        for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av.iter()) {
                            if v > S::zero() {
                                *x += y;
                            } else if v < S::zero() {
                                *x -= y;
                            }
                        }
                    });
                }
            }
        }
    }
}
