//! Tape of recorded operations and the reverse sweep over it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

use super::tensor::{numel, ParamId, ParamSet, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Relu(Var),
    AvgPool { input: Var, size: usize },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softmax { input: Var, cols: usize },
    MaskedLogSoftmax { input: Var, allowed: Vec<bool> },
    SoftmaxCrossEntropy { logits: Var, target: usize },
    Dropout { input: Var, factors: Vec<T> },
    Reshape(Var),
    Concat(Vec<Var>),
    WeightedSum { input: Var, coeffs: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Dynamic computation graph, rebuilt for every forward pass.
///
/// Values are computed eagerly as ops are recorded. Parameters enter via
/// [`Graph::param`] and receive gradients from [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Valid output columns `[lo, hi)` for kernel offset `kj`: those whose input
/// column `ox * stride + kj - pad` lies inside `[0, width)`.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // need ox * s + kj < width + p
    let hi = if g.width + p > kj { ((g.width + p - kj - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npos = g.positions();
    // every entry is written exactly once, padding included
    let mut cols = Vec::with_capacity(g.patch() * npos);
    let zero = T::zero();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        cols.resize(cols.len() + g.out_w, zero);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    cols.resize(cols.len() + lo, zero);
                    let ix0 = lo * s + kj - g.pad;
                    if s == 1 {
                        cols.extend_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    } else {
                        cols.extend(src_row[ix0..].iter().step_by(s).take(hi - lo).copied());
                    }
                    cols.resize(cols.len() + g.out_w - hi, zero);
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), g.patch() * npos);
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let npos = g.positions();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let inp = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let ix0 = lo * s + kj - g.pad;
                    for (d, v) in dst_row[ix0..].iter_mut().step_by(s).zip(inp) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// Forward-only graph: intermediate buffers are dropped and
    /// [`Graph::backward`] fails.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if self.record { op } else { Op::Leaf(None) };
        self.nodes.push(Node { shape, value, needs_grad: needs_grad && self.record, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant input.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf(None))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var, AutodiffError> {
        let t = Tensor::new(shape, values)?;
        Ok(self.input(&t))
    }

    /// Records a trainable parameter; its gradient flows back into `params`.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let t = params.get(id);
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf(Some(id)))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b, m, k, n }))
    }

    /// 2D convolution of a `[C,H,W]` input with `[O,C,k,k]` weights and an
    /// optional `[O]` bias. The kernel must be odd-sized.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument { op: "conv2d", msg: "stride must be positive".into() });
        }
        let kernel = sw[2];
        if si[1] + 2 * pad < kernel || si[2] + 2 * pad < kernel {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &sw));
            }
        }
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            out_channels: sw[0],
            kernel,
            stride,
            pad,
            out_h: (si[1] + 2 * pad - kernel) / stride + 1,
            out_w: (si[2] + 2 * pad - kernel) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let npos = geom.positions();
        let mut out = vec![T::zero(); geom.out_channels * npos];
        if let Some(b) = bias {
            for (o, row) in out.chunks_exact_mut(npos).enumerate() {
                let bv = self.nodes[b.0].value[o];
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm(
            geom.out_channels,
            geom.patch(),
            npos,
            T::one(),
            self.value(weight),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        let ng = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let cols = if self.record { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.out_channels, geom.out_h, geom.out_w],
            out,
            ng,
            Op::Conv2d { input, weight, bias, geom, cols },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Relu(a))
    }

    /// Sign of every ReLU input recorded so far (true where active). Two
    /// evaluations with equal patterns lie on the same linear piece of each
    /// ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Non-overlapping `size x size` average pooling of a `[C,H,W]` tensor.
    pub fn avg_pool2d(&mut self, input: Var, size: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || size == 0 || !s[1].is_multiple_of(size) || !s[2].is_multiple_of(size) {
            return Err(mismatch("avg_pool2d", &s, &[size, size]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / size, w / size);
        let inv = T::one() / T::from_usize_lossy(size * size);
        let x = self.value(input);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = &mut out[(ch * oh + y / size) * ow..(ch * oh + y / size + 1) * ow];
                for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(size)) {
                    *d += chunk.iter().copied().sum::<T>();
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.needs(input);
        Ok(self.push(vec![c, oh, ow], out, ng, Op::AvgPool { input, size }))
    }

    /// `[C,H,W] -> [C]` channel means.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(mismatch("global_avg_pool", &s, &[]));
        }
        let plane = s[1] * s[2];
        let inv = T::one() / T::from_usize_lossy(plane);
        let out = self.value(a).chunks_exact(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let ng = self.needs(a);
        Ok(self.push(vec![s[0]], out, ng, Op::GlobalAvgPool(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&v| v * s).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, ng, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = vec![self.value(a).iter().copied().sum()];
        let ng = self.needs(a);
        self.push(vec![], out, ng, Op::Sum(a))
    }

    /// Row-wise softmax of a `[rows, cols]` tensor; a vector is one row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        let cols = match s.len() {
            1 => s[0],
            2 => s[1],
            _ => return Err(mismatch("softmax", &s, &[])),
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.needs(a);
        Ok(self.push(s, out, ng, Op::Softmax { input: a, cols }))
    }

    /// Log-softmax of a vector restricted to the `allowed` entries. Entries
    /// outside the support are `-inf` and receive no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 || s[0] != allowed.len() {
            return Err(mismatch("masked_log_softmax", &s, &[allowed.len()]));
        }
        if !allowed.iter().any(|&x| x) {
            return Err(AutodiffError::InvalidArgument { op: "masked_log_softmax", msg: "empty support".into() });
        }
        let x = self.value(a);
        let max = x.iter().zip(allowed).filter(|(_, &ok)| ok).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
        let z: T = x.iter().zip(allowed).filter(|(_, &ok)| ok).map(|(&v, _)| (v - max).exp()).sum();
        let lse = max + z.ln();
        let out = x.iter().zip(allowed).map(|(&v, &ok)| if ok { v - lse } else { T::neg_infinity() }).collect();
        let ng = self.needs(a);
        Ok(self.push(s, out, ng, Op::MaskedLogSoftmax { input: a, allowed: allowed.to_vec() }))
    }

    /// Scalar `-log softmax(logits)[target]` for a logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 || target >= s[0] {
            return Err(mismatch("softmax_cross_entropy", &s, &[target]));
        }
        let x = self.value(logits);
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let out = vec![lse - x[target]];
        let ng = self.needs(logits);
        Ok(self.push(vec![], out, ng, Op::SoftmaxCrossEntropy { logits, target }))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)` during training;
    /// identity otherwise.
    pub fn dropout(&mut self, a: Var, p: T, training: bool, seed: u64) -> Result<Var, AutodiffError> {
        if !(p >= T::zero() && p < T::one()) {
            return Err(AutodiffError::InvalidArgument { op: "dropout", msg: format!("p = {p} not in [0, 1)") });
        }
        if !training || p == T::zero() {
            return Ok(self.reshape(a, self.shape(a).to_vec()).expect("same shape"));
        }
        let keep = T::one() / (T::one() - p);
        let pf = p.to_f64().unwrap_or(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < pf { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, ng, Op::Dropout { input: a, factors }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        if numel(&shape) != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape, out, ng, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, vec![n]).expect("flatten preserves size")
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(mismatch("concat", self.shape(p), &[]));
            }
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let n = out.len();
        Ok(self.push(vec![n], out, ng, Op::Concat(parts.to_vec())))
    }

    /// Scalar `sum_i coeffs[i] * a[i]`; terms with a zero coefficient are
    /// skipped, so non-finite entries there do not poison the result.
    pub fn weighted_sum(&mut self, a: Var, coeffs: &[T]) -> Result<Var, AutodiffError> {
        if self.value(a).len() != coeffs.len() {
            return Err(mismatch("weighted_sum", self.shape(a), &[coeffs.len()]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(coeffs)
            .filter(|(_, &c)| c != T::zero())
            .map(|(&v, &c)| v * c)
            .sum();
        let ng = self.needs(a);
        Ok(self.push(vec![], vec![out], ng, Op::WeightedSum { input: a, coeffs: coeffs.to_vec() }))
    }

    /// Reverse sweep from a scalar `loss`, adding `d loss / d p` into the
    /// gradient of every parameter recorded with [`Graph::param`].
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<(), AutodiffError> {
        if !self.record {
            return Err(AutodiffError::NotRecorded);
        }
        let ls = &self.nodes[loss.0];
        if ls.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: ls.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, contrib: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => add_into(acc, &contrib),
                    None => grads[v.0] = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => {
                    if let Some(acc) = params.get_mut(*id).grad_mut() {
                        add_into(acc, &g);
                    }
                }
                Op::Leaf(None) => {}
                Op::MatMul { a, b, m, k, n } => {
                    if self.needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(*m, *n, *k, T::one(), &g, false, self.value(*b), true, T::zero(), &mut da);
                        send(*a, da, &mut grads);
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(*k, *m, *n, T::one(), self.value(*a), true, &g, false, T::zero(), &mut db);
                        send(*b, db, &mut grads);
                    }
                }
                Op::Conv2d { input, weight, bias, geom, cols } => {
                    let npos = geom.positions();
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            let db = g.chunks_exact(npos).map(|r| r.iter().copied().sum()).collect();
                            send(*b, db, &mut grads);
                        }
                    }
                    if self.needs(*weight) {
                        let mut dw = vec![T::zero(); geom.out_channels * geom.patch()];
                        T::gemm(geom.out_channels, npos, geom.patch(), T::one(), &g, false, cols, true, T::zero(), &mut dw);
                        send(*weight, dw, &mut grads);
                    }
                    if self.needs(*input) {
                        let mut dcols = vec![T::zero(); geom.patch() * npos];
                        T::gemm(geom.patch(), geom.out_channels, npos, T::one(), self.value(*weight), true, &g, false, T::zero(), &mut dcols);
                        let mut dx = vec![T::zero(); geom.channels * geom.height * geom.width];
                        col2im(&dcols, geom, &mut dx);
                        send(*input, dx, &mut grads);
                    }
                }
                Op::Relu(a) => {
                    let d = self.value(*a).iter().zip(&g).map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() }).collect();
                    send(*a, d, &mut grads);
                }
                Op::AvgPool { input, size } => {
                    let s = self.shape(*input);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (h / size, w / size);
                    let inv = T::one() / T::from_usize_lossy(size * size);
                    let mut d = Vec::with_capacity(c * h * w);
                    for ch in 0..c {
                        for y in 0..h {
                            let src = &g[(ch * oh + y / size) * ow..(ch * oh + y / size + 1) * ow];
                            for &v in src {
                                d.extend(std::iter::repeat_n(v * inv, *size));
                            }
                            d.resize((ch * h + y + 1) * w, T::zero());
                        }
                    }
                    send(*input, d, &mut grads);
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(*a);
                    let plane = s[1] * s[2];
                    let inv = T::one() / T::from_usize_lossy(plane);
                    let mut d = Vec::with_capacity(s[0] * plane);
                    for &gv in &g {
                        d.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    send(*a, d, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(&gv, &y)| gv * y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(&gv, &x)| gv * x).collect();
                    send(*a, da, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::Scale(a, s) => {
                    send(*a, g.iter().map(|&gv| gv * *s).collect(), &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, vec![g[0]; self.value(*a).len()], &mut grads);
                }
                Op::Softmax { input, cols } => {
                    let y = &node.value;
                    let mut d = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in d.chunks_exact_mut(*cols).zip(y.chunks_exact(*cols)).zip(g.chunks_exact(*cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    send(*input, d, &mut grads);
                }
                Op::MaskedLogSoftmax { input, allowed } => {
                    let total: T = g.iter().zip(allowed).filter(|(_, &ok)| ok).map(|(&gv, _)| gv).sum();
                    let d = node
                        .value
                        .iter()
                        .zip(&g)
                        .zip(allowed)
                        .map(|((&lp, &gv), &ok)| if ok { gv - lp.exp() * total } else { T::zero() })
                        .collect();
                    send(*input, d, &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let x = self.value(*logits);
                    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = x.iter().map(|&v| (v - max).exp()).sum();
                    let d = x
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let p = (v - max).exp() / z;
                            let onehot = if i == *target { T::one() } else { T::zero() };
                            g[0] * (p - onehot)
                        })
                        .collect();
                    send(*logits, d, &mut grads);
                }
                Op::Dropout { input, factors } => {
                    send(*input, g.iter().zip(factors).map(|(&gv, &f)| gv * f).collect(), &mut grads);
                }
                Op::Reshape(a) => send(*a, g, &mut grads),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        send(p, g[off..off + n].to_vec(), &mut grads);
                        off += n;
                    }
                }
                Op::WeightedSum { input, coeffs } => {
                    send(*input, coeffs.iter().map(|&c| c * g[0]).collect(), &mut grads);
                }
            }
        }
        Ok(())
    }
}
