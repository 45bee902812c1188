//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and `backward` is a single reverse sweep.

use std::fmt;
use std::rc::Rc;

use super::tensor::{as_matrix, gemm, Element, MatRef, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotation tables for [`Graph::rope`]: one `(cos, sin)` pair per
/// token and rotated coordinate pair.
#[derive(Debug, Clone)]
pub struct RotaryTables<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    MatMul(Var, Var),
    Gelu(Var),
    Silu(Var),
    Softmax { x: Var, axis: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, tables: Rc<RotaryTables<T>> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T>, scale: T },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::MatMul(..) => "matmul",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Rope { x, .. } => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Returns how many times `b` repeats inside `a` when `b`'s shape is a suffix
/// of `a`'s shape.
fn suffix_repeats(a: &[usize], b: &[usize], op: &str) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_err!(
            "{op}: shape {b:?} does not broadcast onto {a:?}"
        ));
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of the last backward pass; zeros for nodes the
    /// loss does not depend on.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    /// Clears gradients so `backward` may be called again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        suffix_repeats(av.shape(), bv.shape(), name)?;
        let bd = bv.data();
        let n = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        Tensor::new(av.shape(), data)
    }

    /// `a + b`; `b` may have a suffix of `a`'s shape and is then broadcast
    /// over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x @ w (+ bias)` where `x` has any rank ≥ 1 and the last axis is
    /// contracted.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (d_in, d_out) = as_matrix(self.value(w))?;
        let Some(&last) = shape.last() else {
            return Err(shape_err!("linear on a scalar"));
        };
        if last != d_in {
            return Err(shape_err!(
                "linear: input {:?} does not match weight [{d_in}, {d_out}]",
                shape
            ));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let x2 = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, d_in])?
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        if shape.len() != 2 {
            let mut out_shape = shape[..shape.len() - 1].to_vec();
            out_shape.push(d_out);
            y = self.reshape(y, &out_shape)?;
        }
        Ok(y)
    }

    // ---- normalization -----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if n == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut max = d[idx(0)];
                for j in 1..n {
                    max = max.max(d[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    d[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    d[idx(j)] = d[idx(j)] / total;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err!("rms_norm on a scalar"))?;
        if gv.shape() != [d] {
            return Err(shape_err!(
                "rms_norm gain {:?} does not match feature size {d}",
                gv.shape()
            ));
        }
        let rows = xv.numel() / d.max(1);
        let dn = T::from_usize(d).unwrap();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    // ---- structure ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(shape_err!("concat axis {axis} out of range for {ref_shape:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!(
                    "concat: shape {s:?} incompatible with {ref_shape:?} on axis {axis}"
                ));
            }
            total += s[axis];
        }
        let mut shape = ref_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = &self.nodes[v.0].value;
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sub-range `[start, start + len)` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(shape_err!("split axis {axis} out of range for {shape:?}"));
        }
        let total: usize = sizes.iter().sum();
        if total != shape[axis] {
            return Err(shape_err!(
                "split sizes {sizes:?} sum to {total}, axis {axis} of {shape:?} has {}",
                shape[axis]
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (vocab, d) = as_matrix(tv)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotates consecutive coordinate pairs of `x: [tokens, heads, 2*pairs]`.
    pub fn rope(&mut self, x: Var, tables: Rc<RotaryTables<T>>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let [tokens, heads, dim] = *xv.shape() else {
            return Err(shape_err!("rope expects [tokens, heads, head_dim], got {:?}", xv.shape()));
        };
        if tokens != tables.tokens || dim != 2 * tables.pairs {
            return Err(shape_err!(
                "rope tables cover {} tokens x {} pairs, input is {:?}",
                tables.tokens,
                tables.pairs,
                xv.shape()
            ));
        }
        let mut out = xv.clone();
        rotate_pairs(out.data_mut(), &tables, heads, false);
        Ok(self.push(out, Op::Rope { x, tables }))
    }

    /// Scaled dot-product attention over `[tokens, heads, head_dim]` inputs
    /// with a symmetric token mask.
    ///
    /// Scores of inactive keys are set to the most negative finite value, so
    /// their softmax weight is exactly zero; inactive query rows produce zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, active: Option<&[bool]>) -> Result<Var> {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        let [len, heads, dim] = *qv.shape() else {
            return Err(shape_err!("attention expects [tokens, heads, head_dim], got {:?}", qv.shape()));
        };
        if let Some(mask) = active {
            if mask.len() != len {
                return Err(shape_err!("mask covers {} tokens, sequence has {len}", mask.len()));
            }
            if !mask.iter().any(|&a| a) {
                return Err(Error::Invalid("attention mask has no active token".into()));
            }
        }
        if len == 0 {
            return Err(shape_err!("attention over an empty sequence"));
        }
        let is_active = |i: usize| active.map_or(true, |m| m[i]);
        let scale = T::one() / T::from_usize(dim).unwrap().sqrt();
        let row = heads * dim;
        let mut probs = vec![T::zero(); heads * len * len];
        let mut out = vec![T::zero(); len * row];
        for h in 0..heads {
            let p = &mut probs[h * len * len..(h + 1) * len * len];
            gemm(
                len,
                dim,
                len,
                scale,
                MatRef::strided(&qv.data()[h * dim..], row, 1),
                MatRef::strided(&kv.data()[h * dim..], 1, row),
                T::zero(),
                p,
                len,
            );
            for i in 0..len {
                let r = &mut p[i * len..(i + 1) * len];
                if !is_active(i) {
                    r.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                for (j, x) in r.iter_mut().enumerate() {
                    if !is_active(j) {
                        *x = T::min_value();
                    }
                }
                let max = r.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in r.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in r.iter_mut() {
                    *x = *x / total;
                }
            }
            gemm(
                len,
                len,
                dim,
                T::one(),
                MatRef::row_major(p, len),
                MatRef::strided(&vv.data()[h * dim..], row, 1),
                T::zero(),
                &mut out[h * dim..],
                row,
            );
        }
        let out = Tensor::new(qv.shape(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
        ))
    }

    /// Records an operation whose value and vector-Jacobian product are
    /// supplied by the caller. `backward` receives the input values and the
    /// output gradient and returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, Tensor::ones(lv.shape()))?;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            for (input, grad) in self.vjp(idx, &g)? {
                if self.nodes[input.0].requires_grad {
                    self.accumulate(input, grad)?;
                }
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(existing) => existing.axpy(T::one(), &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn vjp(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                vec![(*a, g.clone()), (*b, reduce_to_suffix(g, val(*b).shape()))]
            }
            Op::Sub(a, b) => vec![
                (*a, g.clone()),
                (*b, reduce_to_suffix(g, val(*b).shape()).map(|x| -x)),
            ],
            Op::Mul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let n = bv.numel();
                let ga = Tensor::from_fn(av.shape(), |i| g.data()[i] * bv.data()[i % n]);
                let mut gb = vec![T::zero(); n];
                for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                    gb[i % n] += gi * ai;
                }
                vec![(*a, ga), (*b, Tensor::new(bv.shape(), gb)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::Square(a) => {
                let two = T::from_f64_lossy(2.0);
                vec![(*a, g.zip_map(val(*a), |gi, x| two * x * gi)?)]
            }
            Op::MatMul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let (m, k) = as_matrix(av)?;
                let (_, n) = as_matrix(bv)?;
                let mut ga = vec![T::zero(); m * k];
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    MatRef::row_major(g.data(), n),
                    MatRef::transposed(bv.data(), n),
                    T::zero(),
                    &mut ga,
                    k,
                );
                let mut gb = vec![T::zero(); k * n];
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    MatRef::transposed(av.data(), k),
                    MatRef::row_major(g.data(), n),
                    T::zero(),
                    &mut gb,
                    n,
                );
                vec![
                    (*a, Tensor::new(&[m, k], ga)?),
                    (*b, Tensor::new(&[k, n], gb)?),
                ]
            }
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |gi, x| gi * gelu_grad(x))?)],
            Op::Silu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * (s + x * s * (T::one() - s))
                })?,
            )],
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape(), gx)?)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = val(*x);
                let gv = val(*gain);
                let d = gv.numel();
                let dn = T::from_usize(d).unwrap();
                let mut gx = Vec::with_capacity(xv.numel());
                let mut ggain = vec![T::zero(); d];
                for ((xr, gr), &r) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(inv_rms) {
                    let mut dot = T::zero();
                    for j in 0..d {
                        ggain[j] += gr[j] * xr[j] * r;
                        dot += gr[j] * gv.data()[j] * xr[j];
                    }
                    let c = r * r * r * dot / dn;
                    for j in 0..d {
                        gx.push(gr[j] * gv.data()[j] * r - xr[j] * c);
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape(), gx)?),
                    (*gain, Tensor::new(&[d], ggain)?),
                ]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).numel()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, v) in grads.iter_mut().zip(inputs) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        gi.extend_from_slice(&g.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(v, gi)| Ok((*v, Tensor::new(val(*v).shape(), gi)?)))
                    .collect::<Result<_>>()?
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::new(xs, gx)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut gt = Tensor::zeros(tv.shape());
                let gd = gt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gd[id * d + j] += g.data()[row * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Rope { x, tables } => {
                let heads = g.shape()[1];
                let mut gx = g.clone();
                rotate_pairs(gx.data_mut(), tables, heads, true);
                vec![(*x, gx)]
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => attention_vjp(val(*q), val(*k), val(*v), probs, *scale, g)
                .map(|[gq, gk, gv]| vec![(*q, gq), (*k, gk), (*v, gv)])?,
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let grads = backward(&vals, g);
                if grads.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "custom op returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn reduce_to_suffix<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    for (i, &x) in g.data().iter().enumerate() {
        out[i % n] += x;
    }
    Tensor::new(shape, out).expect("suffix shape")
}

fn rotate_pairs<T: Element>(data: &mut [T], tables: &RotaryTables<T>, heads: usize, inverse: bool) {
    let pairs = tables.pairs;
    let dim = 2 * pairs;
    for t in 0..tables.tokens {
        let cos = &tables.cos[t * pairs..(t + 1) * pairs];
        let sin = &tables.sin[t * pairs..(t + 1) * pairs];
        for h in 0..heads {
            let base = (t * heads + h) * dim;
            for p in 0..pairs {
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                let x0 = data[base + 2 * p];
                let x1 = data[base + 2 * p + 1];
                data[base + 2 * p] = x0 * c - x1 * s;
                data[base + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn attention_vjp<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    scale: T,
    g: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    let [len, heads, dim] = *q.shape() else {
        unreachable!("attention inputs are rank 3")
    };
    let row = heads * dim;
    let mut gq = vec![T::zero(); len * row];
    let mut gk = vec![T::zero(); len * row];
    let mut gv = vec![T::zero(); len * row];
    let mut dp = vec![T::zero(); len * len];
    for h in 0..heads {
        let p = &probs[h * len * len..(h + 1) * len * len];
        let g_h = MatRef::strided(&g.data()[h * dim..], row, 1);
        // dV = Pᵀ G
        gemm(len, len, dim, T::one(), MatRef::transposed(p, len), g_h, T::zero(), &mut gv[h * dim..], row);
        // dP = G Vᵀ
        gemm(
            len,
            dim,
            len,
            T::one(),
            g_h,
            MatRef::strided(&v.data()[h * dim..], 1, row),
            T::zero(),
            &mut dp,
            len,
        );
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled for the 1/√d factor
        for i in 0..len {
            let pr = &p[i * len..(i + 1) * len];
            let dr = &mut dp[i * len..(i + 1) * len];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot) * scale;
            }
        }
        gemm(
            len,
            len,
            dim,
            T::one(),
            MatRef::row_major(&dp, len),
            MatRef::strided(&k.data()[h * dim..], row, 1),
            T::zero(),
            &mut gq[h * dim..],
            row,
        );
        gemm(
            len,
            len,
            dim,
            T::one(),
            MatRef::transposed(&dp, len),
            MatRef::strided(&q.data()[h * dim..], row, 1),
            T::zero(),
            &mut gk[h * dim..],
            row,
        );
    }
    let shape = q.shape();
    Ok([
        Tensor::new(shape, gq)?,
        Tensor::new(shape, gk)?,
        Tensor::new(shape, gv)?,
    ])
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
