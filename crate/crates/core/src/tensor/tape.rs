//! Define-by-run tape. A forward pass records operations in topological
//! order; `backward` replays their gradient rules in reverse, visiting each
//! node once. The tape is rebuilt per forward pass and must stay on one
//! thread per forward/backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::{Elem, Tensor};

#[derive(Debug, Clone)]
struct MatmulDims {
    out_batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
}

#[derive(Debug)]
enum Op<T: Elem> {
    Leaf,
    Add(usize, usize),
    /// `[rows, c] + [c]`, the `[c]` operand broadcast over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Matmul {
        a: usize,
        b: usize,
        dims: MatmulDims,
    },
    TransposeLast2(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Ln(usize),
    Clamp(usize, T, T),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    MaxAxis {
        a: usize,
        axis: usize,
        arg: Vec<usize>,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    /// Fixed sparse linear map: `out[o] = sum_(i,w) w * in[i]`.
    LinearMap {
        a: usize,
        coeffs: Rc<Vec<Vec<(usize, T)>>>,
    },
}

struct Node<T: Elem> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
}

struct Inner<T: Elem> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// Reverse-mode tape. Cloning is cheap (shared handle).
pub struct Tape<T: Elem> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Elem> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var<T: Elem> {
    tape: Tape<T>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Elem> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

/// Result of a masked softmax: the output plus the indices of rows whose
/// entries were all masked (such rows are all-zero and the caller must
/// decide what that means).
pub struct Softmaxed<T: Elem> {
    pub out: Var<T>,
    pub all_masked_rows: Vec<usize>,
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Var<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            shape: shape.clone(),
            value,
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Records a leaf holding the given tensor.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<T> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Var<T> {
        let n = shape.iter().product();
        self.push(Op::Leaf, shape, vec![T::zero(); n])
    }

    pub fn concat(&self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let mut out_shape = parts[0].shape.clone();
        for p in &parts[1..] {
            if p.shape.len() != rank
                || p.shape[..axis] != out_shape[..axis]
                || p.shape[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: p.shape.clone(),
                });
            }
            out_shape[axis] += p.shape[axis];
        }
        let inner_sz: usize = out_shape[axis + 1..].iter().product();
        let outer: usize = out_shape[..axis].iter().product();
        let total: usize = out_shape.iter().product();
        let mut value = Vec::with_capacity(total);
        let guard = self.inner.borrow();
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner_sz;
                let src = &guard.nodes[p.id].value[o * block..(o + 1) * block];
                value.extend_from_slice(src);
            }
        }
        drop(guard);
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Op::Concat { inputs, axis }, out_shape, value))
    }

    fn value_of(&self, id: usize) -> Vec<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Accumulates gradients of `loss` into every recorded node.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.shape.iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let grad = match inner.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&mut inner, id, &grad);
            inner.grads[id] = Some(grad);
        }
        Ok(())
    }
}

fn accum<T: Elem>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop_node<T: Elem>(inner: &mut Inner<T>, id: usize, dout: &[T]) {
    // Split borrows: node values are read-only, grads are written.
    let (nodes, grads) = (&inner.nodes, &mut inner.grads);
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (g, &d) in accum(grads, *a, dout.len()).iter_mut().zip(dout) {
                *g = *g + d;
            }
            for (g, &d) in accum(grads, *b, dout.len()).iter_mut().zip(dout) {
                *g = *g + d;
            }
        }
        Op::AddRow(a, b) => {
            for (g, &d) in accum(grads, *a, dout.len()).iter_mut().zip(dout) {
                *g = *g + d;
            }
            let c = nodes[*b].value.len();
            let gb = accum(grads, *b, c);
            for (i, &d) in dout.iter().enumerate() {
                gb[i % c] = gb[i % c] + d;
            }
        }
        Op::Sub(a, b) => {
            for (g, &d) in accum(grads, *a, dout.len()).iter_mut().zip(dout) {
                *g = *g + d;
            }
            for (g, &d) in accum(grads, *b, dout.len()).iter_mut().zip(dout) {
                *g = *g - d;
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let bv = &nodes[b].value;
            {
                let ga = accum(grads, a, dout.len());
                for i in 0..dout.len() {
                    ga[i] = ga[i] + dout[i] * bv[i];
                }
            }
            let av = &nodes[a].value;
            let gb = accum(grads, b, dout.len());
            for i in 0..dout.len() {
                gb[i] = gb[i] + dout[i] * av[i];
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            let ga = accum(grads, *a, dout.len());
            for i in 0..dout.len() {
                ga[i] = ga[i] + dout[i] * s;
            }
        }
        Op::Matmul { a, b, dims } => {
            let (a, b) = (*a, *b);
            let (p, q, r) = (dims.p, dims.q, dims.r);
            let batches = batch_offsets(dims);
            let bv = &nodes[b].value;
            {
                let ga = accum(grads, a, nodes[a].value.len());
                for (oa, ob, oc) in &batches {
                    // dA = dC · Bᵀ
                    let dc = &dout[oc * p * r..(oc + 1) * p * r];
                    let bb = &bv[ob * q * r..(ob + 1) * q * r];
                    let da = &mut ga[oa * p * q..(oa + 1) * p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut acc = T::zero();
                            let dci = &dc[i * r..(i + 1) * r];
                            let bk = &bb[k * r..(k + 1) * r];
                            for j in 0..r {
                                acc = acc + dci[j] * bk[j];
                            }
                            da[i * q + k] = da[i * q + k] + acc;
                        }
                    }
                }
            }
            let av = &nodes[a].value;
            let gb = accum(grads, b, nodes[b].value.len());
            for (oa, ob, oc) in &batches {
                // dB = Aᵀ · dC
                let dc = &dout[oc * p * r..(oc + 1) * p * r];
                let aa = &av[oa * p * q..(oa + 1) * p * q];
                let db = &mut gb[ob * q * r..(ob + 1) * q * r];
                for i in 0..p {
                    for k in 0..q {
                        let s = aa[i * q + k];
                        if s == T::zero() {
                            continue;
                        }
                        let dci = &dc[i * r..(i + 1) * r];
                        let dbk = &mut db[k * r..(k + 1) * r];
                        for j in 0..r {
                            dbk[j] = dbk[j] + s * dci[j];
                        }
                    }
                }
            }
        }
        Op::TransposeLast2(a) => {
            let a = *a;
            let shape = &node.shape;
            let rank = shape.len();
            let (p, q) = (shape[rank - 2], shape[rank - 1]);
            let batch: usize = shape[..rank - 2].iter().product();
            let ga = accum(grads, a, dout.len());
            for bidx in 0..batch {
                let src = &dout[bidx * p * q..(bidx + 1) * p * q];
                let dst = &mut ga[bidx * p * q..(bidx + 1) * p * q];
                // node shape is the transposed [.., p, q]; input is [.., q, p]
                for i in 0..p {
                    for j in 0..q {
                        dst[j * p + i] = dst[j * p + i] + src[i * q + j];
                    }
                }
            }
        }
        Op::Relu(a) => {
            let a = *a;
            let av = &nodes[a].value;
            let ga = accum(grads, a, dout.len());
            for i in 0..dout.len() {
                if av[i] > T::zero() {
                    ga[i] = ga[i] + dout[i];
                }
            }
        }
        Op::Gelu(a) => {
            let a = *a;
            let av = &nodes[a].value;
            let ga = accum(grads, a, dout.len());
            let half = T::from_f64(0.5);
            let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            for i in 0..dout.len() {
                let x = av[i];
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                ga[i] = ga[i] + dout[i] * (cdf + x * pdf);
            }
        }
        Op::Sigmoid(a) => {
            let a = *a;
            let yv = &node.value;
            let ga = accum(grads, a, dout.len());
            for i in 0..dout.len() {
                ga[i] = ga[i] + dout[i] * yv[i] * (T::one() - yv[i]);
            }
        }
        Op::Ln(a) => {
            let a = *a;
            let av = &nodes[a].value;
            let ga = accum(grads, a, dout.len());
            for i in 0..dout.len() {
                ga[i] = ga[i] + dout[i] / av[i];
            }
        }
        Op::Clamp(a, lo, hi) => {
            let (a, lo, hi) = (*a, *lo, *hi);
            let av = &nodes[a].value;
            let ga = accum(grads, a, dout.len());
            for i in 0..dout.len() {
                if av[i] > lo && av[i] < hi {
                    ga[i] = ga[i] + dout[i];
                }
            }
        }
        Op::MaskedSoftmax(a) => {
            // Masked entries have y = 0 so they receive no gradient,
            // matching the "masked entries are constants" rule.
            let a = *a;
            let yv = &node.value;
            let k = *node.shape.last().unwrap();
            let ga = accum(grads, a, dout.len());
            for row in 0..dout.len() / k {
                let y = &yv[row * k..(row + 1) * k];
                let d = &dout[row * k..(row + 1) * k];
                let mut dot = T::zero();
                for j in 0..k {
                    dot = dot + d[j] * y[j];
                }
                let g = &mut ga[row * k..(row + 1) * k];
                for j in 0..k {
                    g[j] = g[j] + y[j] * (d[j] - dot);
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let c = gv.len();
            let rows = xv.len() / c;
            let cf = T::from_f64(c as f64);
            {
                let gx = accum(grads, x, xv.len());
                for row in 0..rows {
                    let xr = &xv[row * c..(row + 1) * c];
                    let d = &dout[row * c..(row + 1) * c];
                    let mut mean = T::zero();
                    for &v in xr {
                        mean = mean + v;
                    }
                    mean = mean / cf;
                    let mut var = T::zero();
                    for &v in xr {
                        let t = v - mean;
                        var = var + t * t;
                    }
                    var = var / cf;
                    let inv_std = T::one() / (var + eps).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv_std;
                        let dxh = d[j] * gv[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                    }
                    m1 = m1 / cf;
                    m2 = m2 / cf;
                    let g = &mut gx[row * c..(row + 1) * c];
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv_std;
                        let dxh = d[j] * gv[j];
                        g[j] = g[j] + inv_std * (dxh - m1 - xh * m2);
                    }
                }
            }
            {
                let gg = accum(grads, gamma, c);
                for row in 0..rows {
                    let xr = &xv[row * c..(row + 1) * c];
                    let d = &dout[row * c..(row + 1) * c];
                    let mut mean = T::zero();
                    for &v in xr {
                        mean = mean + v;
                    }
                    mean = mean / cf;
                    let mut var = T::zero();
                    for &v in xr {
                        let t = v - mean;
                        var = var + t * t;
                    }
                    var = var / cf;
                    let inv_std = T::one() / (var + eps).sqrt();
                    for j in 0..c {
                        gg[j] = gg[j] + d[j] * (xr[j] - mean) * inv_std;
                    }
                }
            }
            let gb = accum(grads, beta, c);
            for row in 0..rows {
                let d = &dout[row * c..(row + 1) * c];
                for j in 0..c {
                    gb[j] = gb[j] + d[j];
                }
            }
        }
        Op::MaxAxis { a, axis, arg } => {
            let a = *a;
            let in_shape = &nodes[a].shape;
            let len = in_shape[*axis];
            let inner_sz: usize = in_shape[*axis + 1..].iter().product();
            let ga = accum(grads, a, nodes[a].value.len());
            for (o, &am) in arg.iter().enumerate() {
                let outer = o / inner_sz;
                let inner_i = o % inner_sz;
                let src_idx = (outer * len + am) * inner_sz + inner_i;
                ga[src_idx] = ga[src_idx] + dout[o];
            }
        }
        Op::MeanAxis { a, axis } => {
            let a = *a;
            let in_shape = &nodes[a].shape;
            let len = in_shape[*axis];
            let inner_sz: usize = in_shape[*axis + 1..].iter().product();
            let scale = T::one() / T::from_f64(len as f64);
            let ga = accum(grads, a, nodes[a].value.len());
            for (o, &d) in dout.iter().enumerate() {
                let outer = o / inner_sz;
                let inner_i = o % inner_sz;
                for j in 0..len {
                    let idx = (outer * len + j) * inner_sz + inner_i;
                    ga[idx] = ga[idx] + d * scale;
                }
            }
        }
        Op::SumAll(a) => {
            let d = dout[0];
            let ga = accum(grads, *a, nodes[*a].value.len());
            for g in ga.iter_mut() {
                *g = *g + d;
            }
        }
        Op::Reshape(a) => {
            let ga = accum(grads, *a, dout.len());
            for i in 0..dout.len() {
                ga[i] = ga[i] + dout[i];
            }
        }
        Op::Concat { inputs, axis } => {
            let inner_sz: usize = node.shape[*axis + 1..].iter().product();
            let outer: usize = node.shape[..*axis].iter().product();
            let inputs = inputs.clone();
            let mut cursor = 0usize;
            for o in 0..outer {
                for &inp in &inputs {
                    let block = nodes[inp].shape[*axis] * inner_sz;
                    let gi = accum(grads, inp, nodes[inp].value.len());
                    let dst = &mut gi[o * block..(o + 1) * block];
                    for (g, &d) in dst.iter_mut().zip(&dout[cursor..cursor + block]) {
                        *g = *g + d;
                    }
                    cursor += block;
                }
            }
        }
        Op::Slice { a, axis, start } => {
            let a = *a;
            let in_shape = &nodes[a].shape;
            let out_len_axis = node.shape[*axis];
            let inner_sz: usize = in_shape[*axis + 1..].iter().product();
            let outer: usize = in_shape[..*axis].iter().product();
            let in_axis = in_shape[*axis];
            let ga = accum(grads, a, nodes[a].value.len());
            for o in 0..outer {
                for j in 0..out_len_axis {
                    let src = (o * out_len_axis + j) * inner_sz;
                    let dst = (o * in_axis + start + j) * inner_sz;
                    for t in 0..inner_sz {
                        ga[dst + t] = ga[dst + t] + dout[src + t];
                    }
                }
            }
        }
        Op::LinearMap { a, coeffs } => {
            let coeffs = Rc::clone(coeffs);
            let ga = accum(grads, *a, nodes[*a].value.len());
            for (o, terms) in coeffs.iter().enumerate() {
                let d = dout[o];
                if d == T::zero() {
                    continue;
                }
                for &(idx, w) in terms {
                    ga[idx] = ga[idx] + w * d;
                }
            }
        }
    }
}

fn batch_offsets(dims: &MatmulDims) -> Vec<(usize, usize, usize)> {
    let nb: usize = dims.out_batch.iter().product::<usize>().max(1);
    let rank = dims.out_batch.len();
    let mut out = Vec::with_capacity(nb);
    for flat in 0..nb {
        let mut rem = flat;
        let mut oa = 0usize;
        let mut ob = 0usize;
        let mut stride_a = 1usize;
        let mut stride_b = 1usize;
        // decompose flat index right-to-left
        let mut idx = vec![0usize; rank];
        for d in (0..rank).rev() {
            idx[d] = rem % dims.out_batch[d];
            rem /= dims.out_batch[d];
        }
        for d in (0..rank).rev() {
            let ia = if dims.a_batch[d] == 1 { 0 } else { idx[d] };
            let ib = if dims.b_batch[d] == 1 { 0 } else { idx[d] };
            oa += ia * stride_a;
            ob += ib * stride_b;
            stride_a *= dims.a_batch[d];
            stride_b *= dims.b_batch[d];
        }
        out.push((oa, ob, flat));
    }
    out
}

impl<T: Elem> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        let data = self.tape.value_of(self.id);
        Tensor::new(self.shape.clone(), data).expect("node value matches shape")
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.tape.inner.borrow().nodes[self.id].value[0]
    }

    /// Gradient accumulated by the last `backward`, if this node was reached.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let inner = self.tape.inner.borrow();
        inner
            .grads
            .get(self.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    fn same_tape(&self, other: &Var<T>) {
        debug_assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars must live on the same tape"
        );
    }

    fn unary(&self, op: fn(usize) -> Op<T>, value: Vec<T>) -> Var<T> {
        self.tape.push(op(self.id), self.shape.clone(), value)
    }

    fn map_values(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .iter()
            .map(|&x| f(x))
            .collect()
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other);
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| x + y).collect()
        };
        Ok(self
            .tape
            .push(Op::Add(self.id, other.id), self.shape.clone(), value))
    }

    /// Adds a `[c]` vector to every row of a `[..., c]` tensor.
    pub fn add_row(&self, row: &Var<T>) -> Result<Var<T>> {
        self.same_tape(row);
        let c = *self.shape.last().unwrap_or(&0);
        if row.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[row.id].value;
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + b[i % c])
                .collect()
        };
        Ok(self
            .tape
            .push(Op::AddRow(self.id, row.id), self.shape.clone(), value))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other);
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| x - y).collect()
        };
        Ok(self
            .tape
            .push(Op::Sub(self.id, other.id), self.shape.clone(), value))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other);
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| x * y).collect()
        };
        Ok(self
            .tape
            .push(Op::Mul(self.id, other.id), self.shape.clone(), value))
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let value = self.map_values(|x| x * s);
        self.tape
            .push(Op::Scale(self.id, s), self.shape.clone(), value)
    }

    /// Batched matrix product `[..., p, q] x [..., q, r] -> [..., p, r]`;
    /// leading dimensions must agree or broadcast from size 1.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.same_tape(other);
        let (sa, sb) = (&self.shape, &other.shape);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let p = sa[sa.len() - 2];
        let q = sa[sa.len() - 1];
        let r = sb[sb.len() - 1];
        let rank = sa.len().max(sb.len()) - 2;
        let mut a_batch = vec![1usize; rank];
        let mut b_batch = vec![1usize; rank];
        a_batch[rank - (sa.len() - 2)..].copy_from_slice(&sa[..sa.len() - 2]);
        b_batch[rank - (sb.len() - 2)..].copy_from_slice(&sb[..sb.len() - 2]);
        let mut out_batch = vec![1usize; rank];
        for d in 0..rank {
            out_batch[d] = match (a_batch[d], b_batch[d]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: sa.clone(),
                        rhs: sb.clone(),
                    })
                }
            };
        }
        let dims = MatmulDims {
            out_batch: out_batch.clone(),
            a_batch,
            b_batch,
            p,
            q,
            r,
        };
        let batches = batch_offsets(&dims);
        let mut value = vec![T::zero(); batches.len() * p * r];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let bv = &inner.nodes[other.id].value;
            for (oa, ob, oc) in &batches {
                let a = &av[oa * p * q..(oa + 1) * p * q];
                let b = &bv[ob * q * r..(ob + 1) * q * r];
                let c = &mut value[oc * p * r..(oc + 1) * p * r];
                for i in 0..p {
                    let ci = &mut c[i * r..(i + 1) * r];
                    for k in 0..q {
                        let s = a[i * q + k];
                        if s == T::zero() {
                            continue;
                        }
                        let bk = &b[k * r..(k + 1) * r];
                        for j in 0..r {
                            ci[j] = ci[j] + s * bk[j];
                        }
                    }
                }
            }
        }
        let mut out_shape = out_batch;
        out_shape.push(p);
        out_shape.push(r);
        Ok(self.tape.push(
            Op::Matmul {
                a: self.id,
                b: other.id,
                dims,
            },
            out_shape,
            value,
        ))
    }

    pub fn transpose_last2(&self) -> Result<Var<T>> {
        let rank = self.shape.len();
        if rank < 2 {
            return Err(Error::Contract(format!(
                "transpose_last2 requires rank >= 2, got {:?}",
                self.shape
            )));
        }
        let (p, q) = (self.shape[rank - 2], self.shape[rank - 1]);
        let batch: usize = self.shape[..rank - 2].iter().product();
        let mut value = vec![T::zero(); self.numel()];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            for b in 0..batch {
                let src = &av[b * p * q..(b + 1) * p * q];
                let dst = &mut value[b * p * q..(b + 1) * p * q];
                for i in 0..p {
                    for j in 0..q {
                        dst[j * p + i] = src[i * q + j];
                    }
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[rank - 2] = q;
        out_shape[rank - 1] = p;
        Ok(self
            .tape
            .push(Op::TransposeLast2(self.id), out_shape, value))
    }

    pub fn relu(&self) -> Var<T> {
        let v = self.map_values(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(Op::Relu, v)
    }

    pub fn gelu(&self) -> Var<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let v = self.map_values(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.unary(Op::Gelu, v)
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.map_values(|x| T::one() / (T::one() + (-x).exp()));
        self.unary(Op::Sigmoid, v)
    }

    pub fn ln(&self) -> Var<T> {
        let v = self.map_values(|x| x.ln());
        self.unary(Op::Ln, v)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let v = self.map_values(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.tape
            .push(Op::Clamp(self.id, lo, hi), self.shape.clone(), v)
    }

    /// Softmax over the last dimension with an optional additive mask whose
    /// entries are 0 (unmasked) or the dtype's mask constant. Masked
    /// positions are exactly 0 in the output; rows where every entry is
    /// masked come back all-zero and are reported in `all_masked_rows`.
    pub fn masked_softmax_lastdim(&self, mask: Option<&Tensor<T>>) -> Result<Softmaxed<T>> {
        let k = *self.shape.last().ok_or_else(|| {
            Error::Contract("softmax of a rank-0 tensor".into())
        })?;
        if let Some(m) = mask {
            let mk = m.shape().last().copied().unwrap_or(0);
            if mk != k || self.numel() % m.numel() != 0 {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax_lastdim",
                    lhs: self.shape.clone(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let threshold = T::mask_value() * T::from_f64(0.5);
        let mut all_masked_rows = Vec::new();
        let mut value = vec![T::zero(); self.numel()];
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            let rows = av.len() / k;
            for row in 0..rows {
                let logits = &av[row * k..(row + 1) * k];
                let mut z: Vec<T> = logits.to_vec();
                let mut masked = vec![false; k];
                if let Some(m) = mask {
                    let md = m.data();
                    let base = (row * k) % md.len();
                    for j in 0..k {
                        let mv = md[base + j];
                        z[j] = z[j] + mv;
                        masked[j] = mv < threshold;
                    }
                }
                let mut maxv = T::neg_infinity();
                for j in 0..k {
                    if !masked[j] && z[j] > maxv {
                        maxv = z[j];
                    }
                }
                let out = &mut value[row * k..(row + 1) * k];
                if maxv == T::neg_infinity() {
                    all_masked_rows.push(row);
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..k {
                    if masked[j] {
                        out[j] = T::zero();
                    } else {
                        out[j] = (z[j] - maxv).exp();
                        sum = sum + out[j];
                    }
                }
                for j in 0..k {
                    out[j] = out[j] / sum;
                }
            }
        }
        let out = self
            .tape
            .push(Op::MaskedSoftmax(self.id), self.shape.clone(), value);
        Ok(Softmaxed {
            out,
            all_masked_rows,
        })
    }

    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let c = *self.shape.last().unwrap_or(&0);
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let mut value = vec![T::zero(); self.numel()];
        {
            let inner = self.tape.inner.borrow();
            let xv = &inner.nodes[self.id].value;
            let gv = &inner.nodes[gamma.id].value;
            let bv = &inner.nodes[beta.id].value;
            let cf = T::from_f64(c as f64);
            for row in 0..xv.len() / c {
                let xr = &xv[row * c..(row + 1) * c];
                let mut mean = T::zero();
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean / cf;
                let mut var = T::zero();
                for &v in xr {
                    let t = v - mean;
                    var = var + t * t;
                }
                var = var / cf;
                let inv_std = T::one() / (var + eps).sqrt();
                let out = &mut value[row * c..(row + 1) * c];
                for j in 0..c {
                    out[j] = (xr[j] - mean) * inv_std * gv[j] + bv[j];
                }
            }
        }
        Ok(self.tape.push(
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            self.shape.clone(),
            value,
        ))
    }

    /// Max over one axis; gradient routes to the lowest-index maximum.
    pub fn max_axis(&self, axis: usize) -> Result<Var<T>> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let len = self.shape[axis];
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut value = Vec::with_capacity(outer * inner_sz);
        let mut arg = Vec::with_capacity(outer * inner_sz);
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            for o in 0..outer {
                for t in 0..inner_sz {
                    let mut best = av[o * len * inner_sz + t];
                    let mut best_j = 0usize;
                    for j in 1..len {
                        let v = av[(o * len + j) * inner_sz + t];
                        if v > best {
                            best = v;
                            best_j = j;
                        }
                    }
                    value.push(best);
                    arg.push(best_j);
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.tape.push(
            Op::MaxAxis {
                a: self.id,
                axis,
                arg,
            },
            out_shape,
            value,
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<T>> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        let len = self.shape[axis];
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let scale = T::one() / T::from_f64(len as f64);
        let mut value = Vec::with_capacity(outer * inner_sz);
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            for o in 0..outer {
                for t in 0..inner_sz {
                    let mut s = T::zero();
                    for j in 0..len {
                        s = s + av[(o * len + j) * inner_sz + t];
                    }
                    value.push(s * scale);
                }
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self
            .tape
            .push(Op::MeanAxis { a: self.id, axis }, out_shape, value))
    }

    pub fn sum_all(&self) -> Var<T> {
        let s = {
            let inner = self.tape.inner.borrow();
            let mut s = T::zero();
            for &v in &inner.nodes[self.id].value {
                s = s + v;
            }
            s
        };
        self.tape.push(Op::SumAll(self.id), vec![1], vec![s])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let v = self.tape.value_of(self.id);
        Ok(self.tape.push(Op::Reshape(self.id), shape, v))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        if start + len > self.shape[axis] {
            return Err(Error::Contract(format!(
                "slice {}..{} out of bounds for axis size {}",
                start,
                start + len,
                self.shape[axis]
            )));
        }
        let inner_sz: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let in_axis = self.shape[axis];
        let mut value = Vec::with_capacity(outer * len * inner_sz);
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            for o in 0..outer {
                let base = (o * in_axis + start) * inner_sz;
                value.extend_from_slice(&av[base..base + len * inner_sz]);
            }
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            out_shape,
            value,
        ))
    }

    /// Applies a fixed sparse linear map (used by RoIAlign and patch
    /// extraction, whose sampling weights do not depend on tensor values).
    pub fn linear_map(
        &self,
        coeffs: Rc<Vec<Vec<(usize, T)>>>,
        out_shape: Vec<usize>,
    ) -> Result<Var<T>> {
        if coeffs.len() != out_shape.iter().product::<usize>() {
            return Err(Error::Contract(format!(
                "linear_map: {} coefficient rows for output shape {:?}",
                coeffs.len(),
                out_shape
            )));
        }
        let n = self.numel();
        let mut value = Vec::with_capacity(coeffs.len());
        {
            let inner = self.tape.inner.borrow();
            let av = &inner.nodes[self.id].value;
            for terms in coeffs.iter() {
                let mut s = T::zero();
                for &(idx, w) in terms {
                    debug_assert!(idx < n);
                    s = s + w * av[idx];
                }
                value.push(s);
            }
        }
        Ok(self
            .tape
            .push(Op::LinearMap { a: self.id, coeffs }, out_shape, value))
    }
}
