//! Reverse-mode differentiation tape over [`Tensor`] values.
//!
//! Operations append a node holding their forward value and enough context to
//! compute vector-Jacobian products. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients for every node that depends on a leaf
//! created with `requires_grad = true`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu_grad, Tensor, LAYER_NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    Softmax(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    WeightedMeanRows { x: Var, w: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; exactly zero when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.dims[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.dims[v.0].clone()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = self.value(x).scale_rows(self.value(s))?;
        Ok(self.push(v, Op::ScaleRows(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).scale(s).checked("scale")?;
        Ok(self.push(v, Op::Scale(x, s), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: T) -> Result<Var> {
        let v = self.value(x).softmax_rows(temperature)?;
        Ok(self.push(v, Op::Softmax(x, temperature), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).gelu().checked("gelu")?;
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sigmoid().checked("sigmoid")?;
        Ok(self.push(v, Op::Sigmoid(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).layer_norm(self.value(gain), self.value(bias))?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias }, &[x, gain, bias]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose_last2();
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&vals)?
        };
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(idx)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let v = Tensor::new([1], vec![s])?.checked("sum")?;
        Ok(self.push(v, Op::Sum(x), &[x]))
    }

    /// `Σ_i w_i x_i / Σ_i w_i` over the rows of `x`; result is `1×C`.
    pub fn weighted_mean_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cols) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || wv.len() != n {
            return Err(Error::shape(format!(
                "weighted mean of {:?} with {} weights",
                xv.dims(),
                wv.len()
            )));
        }
        let total = wv.sum();
        if !(total > T::zero()) {
            return Err(Error::Numeric("pooling weights sum to zero".into()));
        }
        let mut out = vec![T::zero(); cols];
        for i in 0..n {
            let wi = wv.data()[i] / total;
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += wi * v;
            }
        }
        let v = Tensor::new([1, cols], out)?.checked("weighted_mean_rows")?;
        Ok(self.push(v, Op::WeightedMeanRows { x, w }, &[x, w]))
    }

    /// Mean softmax cross-entropy of `logits` (B×K) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if lv.rank() != 2 || targets.len() != b || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape(format!(
                "cross entropy of {:?} against {} targets",
                lv.dims(),
                targets.len()
            )));
        }
        let probs = lv.softmax_rows(T::one())?;
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.get2(i, t).max(T::min_positive_value()).ln();
        }
        loss /= T::from_usize(b).unwrap();
        let v = Tensor::new([1], vec![loss])?.checked("cross_entropy")?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Accumulates d`loss`/d`v` for every recorded node. `loss` must hold a single value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).dims().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at node {idx}")));
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        *slot = Some(match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose_last2())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose_last2().matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let gb = g.sum_axis(0)?.reshape(self.value(*b).dims().to_vec())?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::ScaleRows(x, s) => {
                let sv = self.value(*s);
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.scale_rows(sv)?)?;
                }
                if self.requires_grad(*s) {
                    let xv = self.value(*x);
                    let gs: Vec<T> = (0..xv.rows())
                        .map(|i| xv.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(sv.dims().to_vec(), gs)?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::Softmax(x, temp) => {
                let n = out.cols();
                let mut gx = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&y, &d)| y * (d - dot) / *temp));
                }
                self.accumulate(grads, *x, Tensor::new(out.dims().to_vec(), gx)?)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| d * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), gx)?)?;
            }
            Op::Sigmoid(x) => {
                let gx: Vec<T> = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.dims().to_vec(), gx)?)?;
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, g, grads)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose_last2())?,
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, cl) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut gx = Tensor::zeros([r, cl]);
                for i in 0..r {
                    gx.data_mut()[i * cl + start..i * cl + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let cl = xv.cols();
                let mut gx = Tensor::zeros(xv.dims().to_vec());
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, &src) in gx.data_mut()[i * cl..(i + 1) * cl].iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).dims().to_vec(), d))?;
            }
            Op::WeightedMeanRows { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let total = wv.sum();
                let gy = g.data();
                if self.requires_grad(*x) {
                    let mut gx = Tensor::zeros(xv.dims().to_vec());
                    let cl = xv.cols();
                    for i in 0..xv.rows() {
                        let wi = wv.data()[i] / total;
                        for (dst, &d) in gx.data_mut()[i * cl..(i + 1) * cl].iter_mut().zip(gy) {
                            *dst = wi * d;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.requires_grad(*w) {
                    let y_dot: T = out.data().iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    let gw: Vec<T> = (0..xv.rows())
                        .map(|i| {
                            let x_dot: T = xv.row(i).iter().zip(gy).map(|(&a, &b)| a * b).sum();
                            (x_dot - y_dot) / total
                        })
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(wv.dims().to_vec(), gw)?)?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let mut probs = lv.softmax_rows(T::one())?;
                let scale = g.data()[0] / T::from_usize(targets.len()).unwrap();
                let k = probs.cols();
                for (i, &t) in targets.iter().enumerate() {
                    probs.data_mut()[i * k + t] -= T::one();
                }
                self.accumulate(grads, *logits, probs.scale(scale))?;
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let n = xv.cols();
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut gx = Vec::with_capacity(xv.len());
        let mut ggain = vec![T::zero(); n];
        let mut gbias = vec![T::zero(); n];
        for (xr, dr) in xv.data().chunks(n).zip(g.data().chunks(n)) {
            let mean = xr.iter().copied().sum::<T>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * inv).collect();
            let dxhat: Vec<T> = dr.iter().zip(gv.data()).map(|(&d, &w)| d * w).collect();
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
            for k in 0..n {
                ggain[k] += dr[k] * xhat[k];
                gbias[k] += dr[k];
                gx.push(inv / nf * (nf * dxhat[k] - sum_d - xhat[k] * sum_dx));
            }
        }
        self.accumulate(grads, x, Tensor::new(xv.dims().to_vec(), gx)?)?;
        if self.requires_grad(gain) {
            self.accumulate(grads, gain, Tensor::new(gv.dims().to_vec(), ggain)?)?;
        }
        if self.requires_grad(bias) {
            let bd = self.value(bias).dims().to_vec();
            self.accumulate(grads, bias, Tensor::new(bd, gbias)?)?;
        }
        Ok(())
    }
}
