use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;

use super::array::{numel, ComplexArray, RealArray, Value};
use super::param::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::spectral;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

/// Numpy-style right-aligned broadcast of two shapes.
#[derive(Debug)]
struct Broadcast {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Ok(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    fn visit(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let outer: usize = self.out[..last].iter().product();
        let mut idx = vec![0usize; last];
        let (mut a_base, mut b_base) = (0usize, 0usize);
        for o in 0..outer {
            let base = o * inner;
            for i in 0..inner {
                f(base + i, a_base + i * sa, b_base + i * sb);
            }
            for d in (0..last).rev() {
                idx[d] += 1;
                a_base += self.a_strides[d];
                b_base += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                a_base -= self.a_strides[d] * self.out[d];
                b_base -= self.b_strides[d] * self.out[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(usize, usize, Arc<Broadcast>),
    Sub(usize, usize, Arc<Broadcast>),
    Mul(usize, usize, Arc<Broadcast>),
    ComplexAdd(usize, usize, Arc<Broadcast>),
    ComplexMul(usize, usize, Arc<Broadcast>),
    /// real (lhs) times complex (rhs)
    RealComplexMul(usize, usize, Arc<Broadcast>),
    Scale(usize, f64),
    MatMul { a: usize, w: usize, rows: usize, k: usize, n: usize },
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, outer: usize, len: usize, inner: usize, scale: f64 },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Reshape(usize),
    Gather(usize, Arc<Vec<usize>>),
    Concat { a: usize, b: usize, outer: usize, a_inner: usize, b_inner: usize },
    Rfft { a: usize, n: usize },
    Irfft { a: usize, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Reverse-mode record of one forward pass.
///
/// Every op eagerly stores its output; backward walks the nodes in reverse
/// and accumulates adjoints. Complex values are differentiated as pairs of
/// independent reals, with gradients stored as `dL/dre + j dL/dim`.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: next_generation(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.backward_done = false;
        self.nodes.push(Node { value, op });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::Tape(
                "handle does not belong to the current recording of this tape".into(),
            ));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Value> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn real(&self, v: Var) -> Result<&RealArray> {
        self.value(v)?
            .as_real()
            .ok_or_else(|| Error::Tape("expected a real value, found complex".into()))
    }

    pub fn complex(&self, v: Var) -> Result<&ComplexArray> {
        self.value(v)?
            .as_complex()
            .ok_or_else(|| Error::Tape("expected a complex value, found real".into()))
    }

    fn real_at(&self, v: Var, op: &'static str) -> Result<(usize, &RealArray)> {
        let i = self.idx(v)?;
        match &self.nodes[i].value {
            Value::Real(a) => Ok((i, a)),
            Value::Complex(_) => Err(Error::Tape(format!("{op}: expected a real input"))),
        }
    }

    fn complex_at(&self, v: Var, op: &'static str) -> Result<(usize, &ComplexArray)> {
        let i = self.idx(v)?;
        match &self.nodes[i].value {
            Value::Complex(a) => Ok((i, a)),
            Value::Real(_) => Err(Error::Tape(format!("{op}: expected a complex input"))),
        }
    }

    pub fn constant(&mut self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Constant)
    }

    /// Records a parameter leaf holding a snapshot of its current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn real_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize, Arc<Broadcast>) -> Op,
    ) -> Result<Var> {
        let (ia, va) = self.real_at(a, op)?;
        let (ib, vb) = self.real_at(b, op)?;
        let plan = Broadcast::new(op, va.shape(), vb.shape())?;
        let mut out = vec![0.0; numel(&plan.out)];
        let (da, db) = (va.data(), vb.data());
        plan.visit(|o, i, j| out[o] = f(da[i], db[j]));
        let value = RealArray::from_parts(plan.out.clone(), out);
        Ok(self.push(value.into(), make(ia, ib, Arc::new(plan))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.real_binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.real_binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.real_binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn complex_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Complex64, Complex64) -> Complex64,
        make: fn(usize, usize, Arc<Broadcast>) -> Op,
    ) -> Result<Var> {
        let (ia, va) = self.complex_at(a, op)?;
        let (ib, vb) = self.complex_at(b, op)?;
        let plan = Broadcast::new(op, va.shape(), vb.shape())?;
        let mut out = vec![Complex64::new(0.0, 0.0); numel(&plan.out)];
        let (da, db) = (va.data(), vb.data());
        plan.visit(|o, i, j| out[o] = f(da[i], db[j]));
        let value = ComplexArray::from_parts(plan.out.clone(), out);
        Ok(self.push(value.into(), make(ia, ib, Arc::new(plan))))
    }

    pub fn complex_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.complex_binary("complex_add", a, b, |x, y| x + y, Op::ComplexAdd)
    }

    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.complex_binary("complex_mul", a, b, |x, y| x * y, Op::ComplexMul)
    }

    /// Real array scaling a complex array elementwise (with broadcasting).
    pub fn real_complex_mul(&mut self, real: Var, complex: Var) -> Result<Var> {
        let op = "real_complex_mul";
        let (ia, va) = self.real_at(real, op)?;
        let (ib, vb) = self.complex_at(complex, op)?;
        let plan = Broadcast::new(op, va.shape(), vb.shape())?;
        let mut out = vec![Complex64::new(0.0, 0.0); numel(&plan.out)];
        let (da, db) = (va.data(), vb.data());
        plan.visit(|o, i, j| out[o] = db[j] * da[i]);
        let value = ComplexArray::from_parts(plan.out.clone(), out);
        Ok(self.push(value.into(), Op::RealComplexMul(ia, ib, Arc::new(plan))))
    }

    /// Multiplies a real or complex value by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = match &self.nodes[ia].value {
            Value::Real(x) => Value::Real(RealArray::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * factor).collect(),
            )),
            Value::Complex(x) => Value::Complex(ComplexArray::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * factor).collect(),
            )),
        };
        Ok(self.push(value, Op::Scale(ia, factor)))
    }

    /// `a (..., K) x w (K, N) -> (..., N)`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "matmul")?;
        let (iw, vw) = self.real_at(w, "matmul")?;
        let (sa, sw) = (va.shape(), vw.shape());
        if sa.is_empty() || sw.len() != 2 || sa[sa.len() - 1] != sw[0] {
            return Err(Error::shape("matmul", sa, sw));
        }
        let k = sw[0];
        let n = sw[1];
        let rows = va.len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, va.data(), (k, 1), vw.data(), (n, 1), &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = RealArray::from_parts(shape, out);
        Ok(self.push(value.into(), Op::MatMul { a: ia, w: iw, rows, k, n }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "relu")?;
        let value = RealArray::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        );
        Ok(self.push(value.into(), Op::Relu(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "square")?;
        let value = RealArray::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&v| v * v).collect(),
        );
        Ok(self.push(value.into(), Op::Square(ia)))
    }

    /// Sum of all elements as a one-element array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "sum")?;
        let s = va.data().iter().sum();
        Ok(self.push(RealArray::scalar(s).into(), Op::Sum(ia)))
    }

    /// Mean of all elements as a one-element array.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "mean")?;
        if va.is_empty() {
            return Err(Error::Tape("mean of an empty array".into()));
        }
        let s: f64 = va.data().iter().sum();
        let m = s / va.len() as f64;
        Ok(self.push(RealArray::scalar(m).into(), Op::Mean(ia)))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = match &self.nodes[ia].value {
            Value::Real(x) => {
                let d = x.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                Value::Real(RealArray::from_parts(out_shape, out))
            }
            Value::Complex(x) => {
                let d = x.data();
                let mut out = vec![Complex64::new(0.0, 0.0); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                Value::Complex(ComplexArray::from_parts(out_shape, out))
            }
        };
        Ok(self.push(
            value,
            Op::SumAxis {
                a: ia,
                outer,
                len,
                inner,
                scale,
            },
        ))
    }

    /// Sums out one axis (real or complex).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Averages out one axis (real or complex).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (ia, va) = self.real_at(a, "softmax")?;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = va.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = RealArray::from_parts(shape, out);
        Ok(self.push(
            value.into(),
            Op::Softmax {
                a: ia,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let old = self.nodes[ia].value.shape().to_vec();
        if numel(&old) != numel(shape) {
            return Err(Error::shape("reshape", &old, shape));
        }
        let value = match &self.nodes[ia].value {
            Value::Real(x) => Value::Real(RealArray::from_parts(shape.to_vec(), x.data().to_vec())),
            Value::Complex(x) => {
                Value::Complex(ComplexArray::from_parts(shape.to_vec(), x.data().to_vec()))
            }
        };
        Ok(self.push(value, Op::Reshape(ia)))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let (ia, va) = self.real_at(a, "gather")?;
        if numel(shape) != index.len() {
            return Err(Error::shape("gather", &[index.len()], shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= va.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                va.len()
            )));
        }
        let d = va.data();
        let out = index.iter().map(|&i| d[i]).collect();
        let value = RealArray::from_parts(shape.to_vec(), out);
        Ok(self.push(value.into(), Op::Gather(ia, index)))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * full + l) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, Arc::new(index), &out_shape)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ia, va) = self.real_at(a, "concat")?;
        let (ib, vb) = self.real_at(b, "concat")?;
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner = va.len() / outer.max(1);
        let b_inner = vb.len() / outer.max(1);
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&vb.data()[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = RealArray::from_parts(shape, out);
        Ok(self.push(
            value.into(),
            Op::Concat {
                a: ia,
                b: ib,
                outer,
                a_inner,
                b_inner,
            },
        ))
    }

    /// Non-overlapping average pooling along the last axis.
    pub fn avg_pool(&mut self, a: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(a)?.to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("avg_pool of a scalar"))?;
        if kernel == 0 || n % kernel != 0 {
            return Err(Error::invalid(format!(
                "pool kernel {kernel} does not divide length {n}"
            )));
        }
        let mut split = shape.clone();
        split.pop();
        split.push(n / kernel);
        split.push(kernel);
        let r = self.reshape(a, &split)?;
        self.mean_axis(r, split.len() - 1)
    }

    /// Forward real transform along the last axis: `(..., N) -> (..., N/2+1)`.
    pub fn rfft(&mut self, a: Var) -> Result<Var> {
        let (ia, va) = self.real_at(a, "rfft")?;
        let n = *va.shape().last().ok_or_else(|| Error::invalid("rfft of a scalar"))?;
        if n == 0 {
            return Err(Error::invalid("rfft of an empty axis"));
        }
        let out = spectral::rfft_rows(va.data(), n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = spectral::bin_count(n);
        let value = ComplexArray::from_parts(shape, out);
        Ok(self.push(value.into(), Op::Rfft { a: ia, n }))
    }

    /// Inverse real transform along the last axis: `(..., n/2+1) -> (..., n)`.
    pub fn irfft(&mut self, a: Var, n: usize) -> Result<Var> {
        let (ia, va) = self.complex_at(a, "irfft")?;
        let k = *va.shape().last().ok_or_else(|| Error::invalid("irfft of a scalar"))?;
        if n == 0 || k != spectral::bin_count(n) {
            return Err(Error::invalid(format!(
                "irfft: {k} bins cannot be inverted to length {n}"
            )));
        }
        let out = spectral::irfft_rows(va.data(), n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = RealArray::from_parts(shape, out);
        Ok(self.push(value.into(), Op::Irfft { a: ia, n }))
    }

    /// Reverse pass from a one-element loss. Clears the tape afterwards;
    /// handles recorded before the call become invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward called twice without a new forward pass".into(),
            ));
        }
        let li = self.idx(loss)?;
        match &self.nodes[li].value {
            Value::Real(x) if x.len() == 1 => {}
            v => {
                return Err(Error::Tape(format!(
                    "backward needs a real scalar loss, got shape {:?}",
                    v.shape()
                )))
            }
        }
        let mut grads: Vec<Option<Value>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Value::Real(RealArray::scalar(1.0)));
        let mut out = Gradients::default();
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        self.nodes.clear();
        self.generation = next_generation();
        self.backward_done = true;
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Value,
        grads: &mut [Option<Value>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let real = |j: usize| nodes[j].value.as_real().expect("real node");
        let cplx = |j: usize| nodes[j].value.as_complex().expect("complex node");
        let mut acc = |j: usize, v: Value| match &mut grads[j] {
            Some(existing) => existing.add_assign(&v),
            slot @ None => *slot = Some(v),
        };
        let greal = |g: &Value| g.as_real().expect("real gradient").data().to_vec();
        let gcplx = |g: &Value| g.as_complex().expect("complex gradient").data().to_vec();

        match &nodes[i].op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let g = greal(&g);
                let mut ga = vec![0.0; real(*a).len()];
                let mut gb = vec![0.0; real(*b).len()];
                plan.visit(|o, x, y| {
                    ga[x] += g[o];
                    gb[y] += sign * g[o];
                });
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
                acc(*b, RealArray::from_parts(real(*b).shape().to_vec(), gb).into());
            }
            Op::Mul(a, b, plan) => {
                let g = greal(&g);
                let (da, db) = (real(*a).data(), real(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                plan.visit(|o, x, y| {
                    ga[x] += g[o] * db[y];
                    gb[y] += g[o] * da[x];
                });
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
                acc(*b, RealArray::from_parts(real(*b).shape().to_vec(), gb).into());
            }
            Op::ComplexAdd(a, b, plan) => {
                let g = gcplx(&g);
                let zero = Complex64::new(0.0, 0.0);
                let mut ga = vec![zero; cplx(*a).len()];
                let mut gb = vec![zero; cplx(*b).len()];
                plan.visit(|o, x, y| {
                    ga[x] += g[o];
                    gb[y] += g[o];
                });
                acc(*a, ComplexArray::from_parts(cplx(*a).shape().to_vec(), ga).into());
                acc(*b, ComplexArray::from_parts(cplx(*b).shape().to_vec(), gb).into());
            }
            Op::ComplexMul(a, b, plan) => {
                let g = gcplx(&g);
                let (da, db) = (cplx(*a).data(), cplx(*b).data());
                let zero = Complex64::new(0.0, 0.0);
                let mut ga = vec![zero; da.len()];
                let mut gb = vec![zero; db.len()];
                plan.visit(|o, x, y| {
                    ga[x] += g[o] * db[y].conj();
                    gb[y] += g[o] * da[x].conj();
                });
                acc(*a, ComplexArray::from_parts(cplx(*a).shape().to_vec(), ga).into());
                acc(*b, ComplexArray::from_parts(cplx(*b).shape().to_vec(), gb).into());
            }
            Op::RealComplexMul(a, b, plan) => {
                let g = gcplx(&g);
                let (da, db) = (real(*a).data(), cplx(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![Complex64::new(0.0, 0.0); db.len()];
                plan.visit(|o, x, y| {
                    ga[x] += g[o].re * db[y].re + g[o].im * db[y].im;
                    gb[y] += g[o] * da[x];
                });
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
                acc(*b, ComplexArray::from_parts(cplx(*b).shape().to_vec(), gb).into());
            }
            Op::Scale(a, f) => {
                let v = match g {
                    Value::Real(x) => Value::Real(RealArray::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().map(|v| v * f).collect(),
                    )),
                    Value::Complex(x) => Value::Complex(ComplexArray::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().map(|v| v * f).collect(),
                    )),
                };
                acc(*a, v);
            }
            Op::MatMul { a, w, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let g = greal(&g);
                let (da, dw) = (real(*a).data(), real(*w).data());
                let mut ga = vec![0.0; rows * k];
                // ga = g (rows x n) * w^T (n x k)
                gemm(rows, n, k, &g, (n, 1), dw, (1, n), &mut ga);
                let mut gw = vec![0.0; k * n];
                // gw = a^T (k x rows) * g (rows x n)
                gemm(k, rows, n, da, (1, k), &g, (n, 1), &mut gw);
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
                acc(*w, RealArray::from_parts(real(*w).shape().to_vec(), gw).into());
            }
            Op::Relu(a) => {
                let g = greal(&g);
                let x = real(*a);
                let ga = x
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*a, RealArray::from_parts(x.shape().to_vec(), ga).into());
            }
            Op::Square(a) => {
                let g = greal(&g);
                let x = real(*a);
                let ga = x.data().iter().zip(&g).map(|(&v, &gv)| 2.0 * v * gv).collect();
                acc(*a, RealArray::from_parts(x.shape().to_vec(), ga).into());
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = real(*a);
                let mut s = greal(&g)[0];
                if matches!(nodes[i].op, Op::Mean(_)) {
                    s /= x.len() as f64;
                }
                acc(*a, RealArray::filled(x.shape().to_vec(), s).into());
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
                scale,
            } => {
                let (outer, len, inner, scale) = (*outer, *len, *inner, *scale);
                let shape = nodes[*a].value.shape().to_vec();
                let v = match g {
                    Value::Real(gx) => {
                        let gd = gx.data();
                        let mut ga = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                    *d = s * scale;
                                }
                            }
                        }
                        Value::Real(RealArray::from_parts(shape, ga))
                    }
                    Value::Complex(gx) => {
                        let gd = gx.data();
                        let mut ga = vec![Complex64::new(0.0, 0.0); outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                                    *d = s * scale;
                                }
                            }
                        }
                        Value::Complex(ComplexArray::from_parts(shape, ga))
                    }
                };
                acc(*a, v);
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let g = greal(&g);
                let y = nodes[i].value.as_real().expect("softmax output").data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + c;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            ga[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
            }
            Op::Reshape(a) => {
                let shape = nodes[*a].value.shape().to_vec();
                let v = match g {
                    Value::Real(x) => Value::Real(RealArray::from_parts(shape, x.into_data())),
                    Value::Complex(x) => {
                        Value::Complex(ComplexArray::from_parts(shape, x.data().to_vec()))
                    }
                };
                acc(*a, v);
            }
            Op::Gather(a, index) => {
                let g = greal(&g);
                let x = real(*a);
                let mut ga = vec![0.0; x.len()];
                for (&src, gv) in index.iter().zip(&g) {
                    ga[src] += gv;
                }
                acc(*a, RealArray::from_parts(x.shape().to_vec(), ga).into());
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let g = greal(&g);
                let (outer, ai, bi) = (*outer, *a_inner, *b_inner);
                let mut ga = Vec::with_capacity(outer * ai);
                let mut gb = Vec::with_capacity(outer * bi);
                for o in 0..outer {
                    let base = o * (ai + bi);
                    ga.extend_from_slice(&g[base..base + ai]);
                    gb.extend_from_slice(&g[base + ai..base + ai + bi]);
                }
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
                acc(*b, RealArray::from_parts(real(*b).shape().to_vec(), gb).into());
            }
            Op::Rfft { a, n } => {
                let g = gcplx(&g);
                let ga = spectral::rfft_adjoint_rows(&g, *n);
                acc(*a, RealArray::from_parts(real(*a).shape().to_vec(), ga).into());
            }
            Op::Irfft { a, n } => {
                let g = greal(&g);
                let ga = spectral::irfft_adjoint_rows(&g, *n);
                acc(*a, ComplexArray::from_parts(cplx(*a).shape().to_vec(), ga).into());
            }
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n)` with (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the slices cover the strided extents described by (m, k, n) and
    // the given strides; `c` is contiguous row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> RealArray {
        RealArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_softmax_and_complex_unit() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3], &[-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.real(r).unwrap().data(), &[0.0, 0.0, 2.0]);

        let z = t.constant(arr(&[2], &[0.0, 0.0]));
        let s = t.softmax(z, 0).unwrap();
        assert_eq!(t.real(s).unwrap().data(), &[0.5, 0.5]);

        let one = t.constant(ComplexArray::new(vec![1], vec![Complex64::new(1.0, 0.0)]).unwrap());
        let j = t.constant(ComplexArray::new(vec![1], vec![Complex64::new(0.0, 1.0)]).unwrap());
        let p = t.complex_mul(one, j).unwrap();
        assert_eq!(t.complex(p).unwrap().data()[0], Complex64::new(0.0, 1.0));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(RealArray::zeros(vec![2, 3]));
        let b = t.constant(RealArray::zeros(vec![4]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4]"), "{err}");
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn broadcast_matches_explicit_expansion() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.constant(arr(&[2, 1], &[10.0, 20.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.shape(c).unwrap(), &[2, 2, 3]);
        assert_eq!(
            t.real(c).unwrap().data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 14.0, 15.0, 16.0, 24.0, 25.0, 26.0]
        );
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", RealArray::scalar(1.0));

        // mean((w x - y)^2) at the minimum
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let x = t.constant(arr(&[2], &[1.0, 2.0]));
        let y = t.constant(arr(&[2], &[1.0, 2.0]));
        let p = t.mul(wv, x).unwrap();
        let d = t.sub(p, y).unwrap();
        let s = t.square(d).unwrap();
        let l = t.mean(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().as_real().unwrap().data(), &[0.0]);

        // loss = w
        let wv = t.param(&store, w);
        let g = t.backward(wv).unwrap();
        assert_eq!(g.get(w).unwrap().as_real().unwrap().data(), &[1.0]);

        // mean(relu(w x)), w = 2, x = [1, -1]
        store.set_value(w, RealArray::scalar(2.0).into()).unwrap();
        let wv = t.param(&store, w);
        let x = t.constant(arr(&[2], &[1.0, -1.0]));
        let p = t.mul(wv, x).unwrap();
        let r = t.relu(p).unwrap();
        let l = t.mean(r).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().as_real().unwrap().data(), &[0.5]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.constant(RealArray::zeros(vec![2]));
        assert!(t.backward(x).is_err());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err(), "second backward must fail");
        let y = t.constant(RealArray::zeros(vec![2]));
        assert!(t.add(x, y).is_err(), "stale handle must be rejected");
    }

    #[test]
    fn unreachable_params_keep_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", RealArray::scalar(3.0));
        let b = store.add("b", RealArray::scalar(4.0));
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let _bv = t.param(&store, b);
        let l = t.square(av).unwrap();
        let g = t.backward(l).unwrap();
        store.set_grads(&g);
        assert_eq!(store.get(a).grad.as_real().unwrap().data(), &[6.0]);
        assert_eq!(store.get(b).grad.as_real().unwrap().data(), &[0.0]);
    }
}
