//! Tape-based reverse-mode graph.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the vector-Jacobian product. Nodes are created in topological
//! order, so `backward` is a single sweep over the tape in reverse.

use crate::store::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::{conv, loss, lstm, norm, AutodiffError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Input,
    Param(ParamId),
    Reshape { x: Var },
    Sum { x: Var },
    Scale { x: Var, factor: T },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    ConcatLast { a: Var, b: Var },
    Softmax { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Conv1d(conv::Conv1dSaved),
    BatchNormTrain(norm::BatchNormSaved<T>),
    BatchNormEval(norm::BatchNormEvalSaved<T>),
    Lstm(lstm::LstmSaved<T>),
    WeightedCe(loss::WeightedCeSaved<T>),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced: {value:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a store entry; its gradient lands in the store on `backward`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// Concatenates two tensors along their last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(AutodiffError::Shape(format!(
                "concat_last: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = da + db;
        let rows = self.value(a).numel() / da.max(1);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&xa[r * da..(r + 1) * da]);
            data.extend_from_slice(&xb[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatLast { a, b }, needs))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let classes = *src
            .shape()
            .last()
            .ok_or_else(|| AutodiffError::Shape("softmax: scalar input".into()))?;
        let mut data = src.data().to_vec();
        if classes > 0 {
            for row in data.chunks_mut(classes) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x }, needs))
    }

    /// Affine map `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(AutodiffError::Shape(format!(
                "linear: input {sx:?}, weight {sw:?}, bias {sb:?} (expected [n, in], [out, in], [out])"
            )));
        }
        let (n, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * d_out];
        for i in 0..n {
            let row = &xs[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let wrow = &ws[o * d_in..(o + 1) * d_in];
                out[i * d_out + o] = bs[o] + dot(row, wrow);
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Inverted dropout: in training, each unit is zeroed with probability `p`
    /// and survivors are scaled by `1/(1-p)`. Outside training this is the identity.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Max pooling over the last axis of `[batch, ch, length]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(AutodiffError::Shape(format!("maxpool1d: expected [batch, ch, len], got {s:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(AutodiffError::InvalidArgument("maxpool1d: window and stride must be ≥ 1".into()));
        }
        let (rows, len) = (s[0] * s[1], s[2]);
        if window > len {
            return Err(AutodiffError::Shape(format!(
                "maxpool1d: window {window} exceeds length {len}"
            )));
        }
        let out_len = (len - window) / stride + 1;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &xs[r * len..(r + 1) * len];
            for j in 0..out_len {
                let start = j * stride;
                let mut best = start;
                for k in start + 1..start + window {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                out.push(row[best]);
                argmax.push(r * len + best);
            }
        }
        let value = Tensor::new(vec![s[0], s[1], out_len], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// Propagates d`loss`/d(node) through the tape and accumulates parameter
    /// gradients into `store`. Existing gradient buffers are added to, not reset.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarBackward(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Reshape { x } => self.accumulate(&mut grads, *x, g),
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    self.accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Scale { x, factor } => {
                    let gx = g.iter().map(|&v| v * *factor).collect();
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *b, g.clone());
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(vb).map(|(&d, &y)| d * y).collect();
                    let gb = g.iter().zip(va).map(|(&d, &x)| d * x).collect();
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let xs = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xs)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::ConcatLast { a, b } => {
                    let sa = self.shape(*a);
                    let da = sa[sa.len() - 1];
                    let sb = self.shape(*b);
                    let db = sb[sb.len() - 1];
                    let rows = self.value(*a).numel() / da.max(1);
                    let mut ga = Vec::with_capacity(rows * da);
                    let mut gb = Vec::with_capacity(rows * db);
                    for r in 0..rows {
                        let row = &g[r * (da + db)..(r + 1) * (da + db)];
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let classes = *node.value.shape().last().expect("softmax keeps rank");
                    let mut gx = vec![T::zero(); y.len()];
                    for ((yr, gr), out) in y
                        .chunks(classes)
                        .zip(g.chunks(classes))
                        .zip(gx.chunks_mut(classes))
                    {
                        let s = dot(yr, gr);
                        for k in 0..classes {
                            out[k] = yr[k] * (gr[k] - s);
                        }
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let sx = self.shape(x);
                    let (n, d_in) = (sx[0], sx[1]);
                    let d_out = self.shape(w)[0];
                    let (xs, ws) = (self.value(x).data(), self.value(w).data());
                    if self.needs(x) {
                        let mut gx = vec![T::zero(); n * d_in];
                        for i in 0..n {
                            let out = &mut gx[i * d_in..(i + 1) * d_in];
                            for o in 0..d_out {
                                axpy(g[i * d_out + o], &ws[o * d_in..(o + 1) * d_in], out);
                            }
                        }
                        self.accumulate(&mut grads, x, gx);
                    }
                    if self.needs(w) {
                        let mut gw = vec![T::zero(); d_out * d_in];
                        for i in 0..n {
                            let row = &xs[i * d_in..(i + 1) * d_in];
                            for o in 0..d_out {
                                axpy(g[i * d_out + o], row, &mut gw[o * d_in..(o + 1) * d_in]);
                            }
                        }
                        self.accumulate(&mut grads, w, gw);
                    }
                    if self.needs(b) {
                        let mut gb = vec![T::zero(); d_out];
                        for row in g.chunks(d_out) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (&src, &d) in argmax.iter().zip(&g) {
                        gx[src] += d;
                    }
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::Conv1d(saved) => conv::backward(self, saved, &g, &mut grads),
                Op::BatchNormTrain(saved) => norm::backward_train(self, saved, &g, &mut grads),
                Op::BatchNormEval(saved) => norm::backward_eval(self, saved, &g, &mut grads),
                Op::Lstm(saved) => lstm::backward(self, saved, &node.value, &g, &mut grads),
                Op::WeightedCe(saved) => loss::backward(self, saved, &g, &mut grads),
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `out += alpha · x`
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
