//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough bookkeeping to push gradients back to its parents.
//! Tensors are flat row-major buffers; feature maps use `[C, H, W]` and are
//! treated as `[C, N]` with `N = H * W` by the pixel-wise operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaskedMean {
        input: Var,
        weights: Vec<F>,
        total: F,
    },
    Cosine {
        feat: Var,
        other: Var,
    },
    Lerp {
        a: Var,
        b: Var,
        t: F,
    },
    Broadcast {
        input: Var,
    },
    Mean(Vec<Var>),
    Sub(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Bce {
        prob: Var,
        target: Vec<F>,
        eps: F,
    },
    LinComb(Vec<(Var, F)>),
    SelectCols {
        input: Var,
        cols: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeCols(Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<F> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); len],
        }
    }
}

/// A recording of differentiable computations.
#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(msg: alloc::string::String) -> Error {
    Error::Shape(msg)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Vec<F>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Records a constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Vec<F>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    fn leaf(&mut self, value: Vec<F>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if value.len() != numel(shape) {
            return Err(shape_err(alloc::format!(
                "leaf of {} values cannot have shape {:?}",
                value.len(),
                shape
            )));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    /// Splits a `[C, ...]` shape into `(C, N)`.
    fn cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let c = s.first().copied().unwrap_or(1);
        let n = if s.len() <= 1 { 1 } else { numel(&s[1..]) };
        (c, n)
    }

    /// Strided 2-D convolution with zero padding. `input` is `[Ci, H, W]`,
    /// `weight` is `[Co, Ci, k, k]`, `bias` is `[Co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let ish = self.shape(input).to_vec();
        let wsh = self.shape(weight).to_vec();
        let bsh = self.shape(bias).to_vec();
        if ish.len() != 3 || wsh.len() != 4 || bsh.len() != 1 {
            return Err(shape_err(alloc::format!(
                "conv2d expects [C,H,W], [O,C,k,k], [O]; got {ish:?}, {wsh:?}, {bsh:?}"
            )));
        }
        let (ci, h, w) = (ish[0], ish[1], ish[2]);
        let (co, wci, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if wci != ci || bsh[0] != co || stride == 0 {
            return Err(shape_err(alloc::format!(
                "conv2d channel mismatch: input {ish:?}, weight {wsh:?}, bias {bsh:?}, stride {stride}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(alloc::format!(
                "conv2d kernel larger than padded input {ish:?}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![F::zero(); co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for v in plane.iter_mut() {
                *v = b[o];
            }
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = wt[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            vec![co, ho, wo],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Relu(a), rg)
    }

    /// Weighted average over the columns of a `[C, N]` tensor:
    /// `out[c] = sum_p w[p] * x[c, p] / sum_p w[p]`. The weights are
    /// constants (masks), so no gradient flows into them.
    pub fn masked_mean(&mut self, input: Var, weights: Vec<F>) -> Result<Var> {
        let (c, n) = self.cols(input);
        if weights.len() != n {
            return Err(shape_err(alloc::format!(
                "masked_mean: {} weights for {} pixels",
                weights.len(),
                n
            )));
        }
        let total: F = weights.iter().copied().sum();
        if !(total > F::zero()) {
            return Err(Error::DegenerateMask(alloc::string::String::from(
                "mask selects no pixels",
            )));
        }
        let x = self.value(input);
        let mut out = vec![F::zero(); c];
        for (ch, o) in out.iter_mut().enumerate() {
            let row = &x[ch * n..(ch + 1) * n];
            let mut acc = F::zero();
            for (xv, wv) in row.iter().zip(&weights) {
                if *wv != F::zero() {
                    acc = acc + *xv * *wv;
                }
            }
            *o = acc / total;
        }
        let rg = self.rg(input);
        Ok(self.push(
            out,
            vec![c],
            Op::MaskedMean {
                input,
                weights,
                total,
            },
            rg,
        ))
    }

    /// Per-pixel cosine similarity between the columns of `feat` (`[C, N]`)
    /// and either a single vector `[C]` or a per-pixel field `[C, N]`.
    /// Positions where either side has zero norm get similarity 0.
    pub fn cosine(&mut self, feat: Var, other: Var) -> Result<Var> {
        let (c, n) = self.cols(feat);
        let osh = self.shape(other).to_vec();
        let field = match osh.len() {
            1 if osh[0] == c => false,
            _ if osh.first() == Some(&c) && numel(&osh) == c * n => true,
            _ => {
                return Err(shape_err(alloc::format!(
                    "cosine: feature {:?} against {:?}",
                    self.shape(feat),
                    osh
                )))
            }
        };
        let x = self.value(feat);
        let p = self.value(other);
        let mut out = vec![F::zero(); n];
        let pnorm_vec = if field {
            F::zero()
        } else {
            norm_strided(p, 0, 1, c)
        };
        for (pix, o) in out.iter_mut().enumerate() {
            let mut dot = F::zero();
            let mut xn = F::zero();
            let mut pn = F::zero();
            for ch in 0..c {
                let xv = x[ch * n + pix];
                let pv = if field { p[ch * n + pix] } else { p[ch] };
                dot = dot + xv * pv;
                xn = xn + xv * xv;
                if field {
                    pn = pn + pv * pv;
                }
            }
            let xn = xn.sqrt();
            let pn = if field { pn.sqrt() } else { pnorm_vec };
            *o = if xn > F::zero() && pn > F::zero() {
                dot / (xn * pn)
            } else {
                F::zero()
            };
        }
        let rg = self.rg(feat) || self.rg(other);
        Ok(self.push(out, vec![n], Op::Cosine { feat, other }, rg))
    }

    /// `t * a + (1 - t) * b`.
    pub fn lerp(&mut self, a: Var, b: Var, t: F) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(alloc::format!(
                "lerp: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let one_t = F::one() - t;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| t * x + one_t * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Lerp { a, b, t }, rg))
    }

    /// Repeats a `[C]` vector across `n` columns, giving `[C, n]`.
    pub fn broadcast(&mut self, input: Var, n: usize) -> Result<Var> {
        let sh = self.shape(input);
        if sh.len() != 1 {
            return Err(shape_err(alloc::format!(
                "broadcast expects [C], got {sh:?}"
            )));
        }
        let c = sh[0];
        let x = self.value(input);
        let mut out = Vec::with_capacity(c * n);
        for &v in x {
            out.extend(core::iter::repeat_n(v, n));
        }
        let rg = self.rg(input);
        Ok(self.push(out, vec![c, n], Op::Broadcast { input }, rg))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err(alloc::string::String::from("mean of zero tensors")))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        let mut out = vec![F::zero(); numel(&shape)];
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err(alloc::format!(
                    "mean: {:?} vs {:?}",
                    self.shape(v),
                    shape
                )));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o = *o + x;
            }
        }
        let k = F::of(inputs.len() as f64);
        for o in out.iter_mut() {
            *o = *o / k;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, shape, Op::Mean(inputs.to_vec()), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(alloc::format!(
                "sub: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Sigmoid(a), rg)
    }

    /// Mean binary cross entropy of foreground probabilities against a
    /// `{0, 1}` target, with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, prob: Var, target: Vec<F>, eps: F) -> Result<Var> {
        let p = self.value(prob);
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err(alloc::format!(
                "bce: {} predictions vs {} targets",
                p.len(),
                target.len()
            )));
        }
        let hi = F::one() - eps;
        let mut acc = F::zero();
        for (&pv, &t) in p.iter().zip(&target) {
            let pc = pv.max(eps).min(hi);
            acc = acc - (t * pc.ln() + (F::one() - t) * (F::one() - pc).ln());
        }
        let loss = acc / F::of(p.len() as f64);
        let rg = self.rg(prob);
        Ok(self.push(vec![loss], vec![1], Op::Bce { prob, target, eps }, rg))
    }

    /// `sum_i w_i * x_i` over equally shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| shape_err(alloc::string::String::from("empty linear combination")))?;
        let shape = self.shape(first).to_vec();
        let mut out = vec![F::zero(); numel(&shape)];
        for &(v, w) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err(alloc::format!(
                    "lin_comb: {:?} vs {:?}",
                    self.shape(v),
                    shape
                )));
            }
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o = *o + w * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, shape, Op::LinComb(terms.to_vec()), rg))
    }

    /// Gathers columns of a `[C, N]` tensor into `[C, M]`.
    pub fn select_cols(&mut self, input: Var, cols: Vec<usize>) -> Result<Var> {
        let (c, n) = self.cols(input);
        if let Some(&bad) = cols.iter().find(|&&i| i >= n) {
            return Err(shape_err(alloc::format!(
                "select_cols: column {bad} out of {n}"
            )));
        }
        let x = self.value(input);
        let m = cols.len();
        let mut out = vec![F::zero(); c * m];
        for ch in 0..c {
            for (j, &col) in cols.iter().enumerate() {
                out[ch * m + j] = x[ch * n + col];
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, vec![c, m], Op::SelectCols { input, cols }, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.cols(a);
        let (k2, n) = self.cols(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err(alloc::format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(shape_err(alloc::format!(
                "transpose expects 2-D, got {:?}",
                self.shape(a)
            )));
        }
        let (m, n) = self.cols(a);
        let out = transpose_raw(self.value(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(out, vec![n, m], Op::Transpose(a), rg))
    }

    /// Softmax along each row of a `[m, n]` tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(shape_err(alloc::format!(
                "softmax_rows expects 2-D, got {:?}",
                self.shape(a)
            )));
        }
        let (m, n) = self.cols(a);
        let x = self.value(a);
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mx).exp();
                s = s + *o;
            }
            for o in out[r * n..(r + 1) * n].iter_mut() {
                *o = *o / s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![m, n], Op::SoftmaxRows(a), rg))
    }

    /// Scales each column of `[C, N]` to unit L2 norm; zero columns stay zero.
    pub fn normalize_cols(&mut self, a: Var) -> Var {
        let (c, n) = self.cols(a);
        let x = self.value(a);
        let mut out = x.to_vec();
        for col in 0..n {
            let nv = norm_strided(x, col, n, c);
            if nv > F::zero() {
                for ch in 0..c {
                    out[ch * n + col] = x[ch * n + col] / nv;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::NormalizeCols(a), rg)
    }

    /// Backpropagates from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::NonFinite {
                context: alloc::string::String::from("loss"),
                iteration: None,
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.push_back(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => self.conv2d_back(*input, *weight, *bias, *stride, *pad, &node.shape, g, grads),
            Op::Relu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d: Vec<F> = x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                        .collect();
                    accumulate(grads, *a, &d);
                }
            }
            Op::MaskedMean {
                input,
                weights,
                total,
            } => {
                if self.rg(*input) {
                    let (c, n) = self.cols(*input);
                    let mut d = vec![F::zero(); c * n];
                    for ch in 0..c {
                        let gc = g[ch] / *total;
                        for (p, &w) in weights.iter().enumerate() {
                            d[ch * n + p] = gc * w;
                        }
                    }
                    accumulate(grads, *input, &d);
                }
            }
            Op::Cosine { feat, other } => self.cosine_back(*feat, *other, &node.value, g, grads),
            Op::Lerp { a, b, t } => {
                if self.rg(*a) {
                    let d: Vec<F> = g.iter().map(|&v| v * *t).collect();
                    accumulate(grads, *a, &d);
                }
                if self.rg(*b) {
                    let one_t = F::one() - *t;
                    let d: Vec<F> = g.iter().map(|&v| v * one_t).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Broadcast { input } => {
                if self.rg(*input) {
                    let c = self.shape(*input)[0];
                    let n = node.shape[1];
                    let d: Vec<F> = (0..c)
                        .map(|ch| g[ch * n..(ch + 1) * n].iter().copied().sum())
                        .collect();
                    accumulate(grads, *input, &d);
                }
            }
            Op::Mean(inputs) => {
                let k = F::of(inputs.len() as f64);
                let d: Vec<F> = g.iter().map(|&v| v / k).collect();
                for &v in inputs {
                    if self.rg(v) {
                        accumulate(grads, v, &d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let d: Vec<F> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let d: Vec<F> = g.iter().map(|&v| v * *s).collect();
                    accumulate(grads, *a, &d);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let d: Vec<F> = node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (F::one() - y))
                        .collect();
                    accumulate(grads, *a, &d);
                }
            }
            Op::Bce { prob, target, eps } => {
                if self.rg(*prob) {
                    let p = self.value(*prob);
                    let nf = F::of(p.len() as f64);
                    let hi = F::one() - *eps;
                    let d: Vec<F> = p
                        .iter()
                        .zip(target)
                        .map(|(&pv, &t)| {
                            if pv > *eps && pv < hi {
                                -g[0] * (t / pv - (F::one() - t) / (F::one() - pv)) / nf
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    accumulate(grads, *prob, &d);
                }
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        let d: Vec<F> = g.iter().map(|&x| x * w).collect();
                        accumulate(grads, v, &d);
                    }
                }
            }
            Op::SelectCols { input, cols } => {
                if self.rg(*input) {
                    let (c, n) = self.cols(*input);
                    let m = cols.len();
                    let mut d = vec![F::zero(); c * n];
                    for ch in 0..c {
                        for (j, &col) in cols.iter().enumerate() {
                            d[ch * n + col] = d[ch * n + col] + g[ch * m + j];
                        }
                    }
                    accumulate(grads, *input, &d);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.cols(*a);
                let n = self.cols(*b).1;
                if self.rg(*a) {
                    // dA = dC * B^T
                    let bt = transpose_raw(self.value(*b), k, n);
                    let d = matmul_raw(g, &bt, m, n, k);
                    accumulate(grads, *a, &d);
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let at = transpose_raw(self.value(*a), m, k);
                    let d = matmul_raw(&at, g, k, m, n);
                    accumulate(grads, *b, &d);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (m, n) = self.cols(*a);
                    let d = transpose_raw(g, n, m);
                    accumulate(grads, *a, &d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let (m, n) = self.cols(*a);
                    let y = &node.value;
                    let mut d = vec![F::zero(); m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, *a, &d);
                }
            }
            Op::NormalizeCols(a) => {
                if self.rg(*a) {
                    let (c, n) = self.cols(*a);
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = vec![F::zero(); c * n];
                    for col in 0..n {
                        let nv = norm_strided(x, col, n, c);
                        if nv > F::zero() {
                            let mut dot = F::zero();
                            for ch in 0..c {
                                dot = dot + y[ch * n + col] * g[ch * n + col];
                            }
                            for ch in 0..c {
                                d[ch * n + col] = (g[ch * n + col] - y[ch * n + col] * dot) / nv;
                            }
                        }
                    }
                    accumulate(grads, *a, &d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_back(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let ish = self.shape(input);
        let wsh = self.shape(weight);
        let (ci, h, w) = (ish[0], ish[1], ish[2]);
        let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let x = self.value(input);
        let wt = self.value(weight);
        if self.rg(bias) {
            let d: Vec<F> = (0..co)
                .map(|o| g[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum())
                .collect();
            accumulate(grads, bias, &d);
        }
        let need_w = self.rg(weight);
        let need_x = self.rg(input);
        let mut dw = if need_w {
            vec![F::zero(); wt.len()]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![F::zero(); x.len()]
        } else {
            Vec::new()
        };
        for o in 0..co {
            let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..kw {
                        let widx = ((o * ci + c) * kh + ky) * kw + kx;
                        let (ox0, ox1) = valid_range(wo, w, kx, stride, pad);
                        let wv = wt[widx];
                        let mut acc = F::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            if need_w {
                                let row = &xin[iy * w..(iy + 1) * w];
                                for ox in ox0..ox1 {
                                    acc = acc + grow[ox] * row[ox * stride + kx - pad];
                                }
                            }
                            if need_x {
                                let base = c * h * w + iy * w;
                                for ox in ox0..ox1 {
                                    let i = base + ox * stride + kx - pad;
                                    dx[i] = dx[i] + wv * grow[ox];
                                }
                            }
                        }
                        if need_w {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
        if need_w {
            accumulate(grads, weight, &dw);
        }
        if need_x {
            accumulate(grads, input, &dx);
        }
    }

    fn cosine_back(
        &self,
        feat: Var,
        other: Var,
        sims: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (c, n) = self.cols(feat);
        let field = self.shape(other).len() > 1;
        let x = self.value(feat);
        let p = self.value(other);
        let need_x = self.rg(feat);
        let need_p = self.rg(other);
        let mut dx = if need_x {
            vec![F::zero(); x.len()]
        } else {
            Vec::new()
        };
        let mut dp = if need_p {
            vec![F::zero(); p.len()]
        } else {
            Vec::new()
        };
        let pnorm_vec = if field {
            F::zero()
        } else {
            norm_strided(p, 0, 1, c)
        };
        for pix in 0..n {
            let xn = norm_strided(x, pix, n, c);
            let pn = if field {
                norm_strided(p, pix, n, c)
            } else {
                pnorm_vec
            };
            if !(xn > F::zero() && pn > F::zero()) || g[pix] == F::zero() {
                continue;
            }
            let s = sims[pix];
            let gp = g[pix];
            let inv = F::one() / (xn * pn);
            for ch in 0..c {
                let xv = x[ch * n + pix];
                let pidx = if field { ch * n + pix } else { ch };
                let pv = p[pidx];
                if need_x {
                    dx[ch * n + pix] = dx[ch * n + pix] + gp * (pv * inv - s * xv / (xn * xn));
                }
                if need_p {
                    dp[pidx] = dp[pidx] + gp * (xv * inv - s * pv / (pn * pn));
                }
            }
        }
        if need_x {
            accumulate(grads, feat, &dx);
        }
        if need_p {
            accumulate(grads, other, &dp);
        }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, d: &[F]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(d) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Output positions `[lo, hi)` whose tap `k` lands inside an input of
/// length `len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, stride, pad, len) = (k as isize, stride as isize, pad as isize, len as isize);
    // o * stride + k - pad in [0, len)
    let lo = if pad > k {
        (pad - k + stride - 1) / stride
    } else {
        0
    };
    let hi = (len - 1 + pad - k).div_euclid(stride) + 1;
    let hi = hi.clamp(0, out_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

fn norm_strided<F: Real>(x: &[F], start: usize, step: usize, count: usize) -> F {
    let mut s = F::zero();
    for i in 0..count {
        let v = x[start + i * step];
        s = s + v * v;
    }
    s.sqrt()
}

fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Real>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
