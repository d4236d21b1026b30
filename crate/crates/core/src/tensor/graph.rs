use super::params::{ParamId, ParamStore};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct Conv {
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d(Var, Var, Conv),
    MaxPool2d(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    Log(Var, T),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Upsample2d(Var, usize),
    FitSpatial(Var),
    BatchNorm2d { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if it required one.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc = *acc + *v;
                }
            }
        }
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4], TensorError> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => Err(shape_err(op, format!("expected NCHW input, got {shape:?}"))),
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, conv: Conv, ho: usize, wo: usize, col: &mut [T]) {
    let (s, p) = (conv.stride, conv.pad as isize);
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((ci * kh + i) * kw + j) * plane..][..plane];
                for oh in 0..ho {
                    let ih = (oh * s + i) as isize - p;
                    let out = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let xr = &xc[ih as usize * w..(ih as usize + 1) * w];
                    if s == 1 {
                        // iw = ow + j - p; valid ow range
                        let lo = (p - j as isize).max(0) as usize;
                        let hi = ((w as isize + p - j as isize).min(wo as isize)).max(lo as isize) as usize;
                        out[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let start = (lo as isize + j as isize - p) as usize;
                            out[lo..hi].copy_from_slice(&xr[start..start + hi - lo]);
                        }
                    } else {
                        for (ow, o) in out.iter_mut().enumerate() {
                            let iw = (ow * s + j) as isize - p;
                            *o = if iw < 0 || iw >= w as isize { T::zero() } else { xr[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, conv: Conv, ho: usize, wo: usize, dx: &mut [T]) {
    let (s, p) = (conv.stride, conv.pad as isize);
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((ci * kh + i) * kw + j) * plane..][..plane];
                for oh in 0..ho {
                    let ih = (oh * s + i) as isize - p;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dr = &mut dxc[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * s + j) as isize - p;
                        if iw >= 0 && iw < w as isize {
                            dr[iw as usize] = dr[iw as usize] + row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn flush<T: Scalar>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a copy of a stored parameter; frozen parameters enter
    /// as constants so their gradient stays exactly zero.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        Ok(self.param(store, store.id(name)?))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: ta.shape().to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::from_f64c(scale), T::from_f64c(shift));
        let tx = self.value(x);
        let t = Tensor { shape: tx.shape().to_vec(), data: tx.data().iter().map(|&v| s * v + b).collect() };
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, s), rg)
    }

    /// Adds `bias[c]` along axis 1 of `x` (`[N, C, ...]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(shape_err("add_bias", format!("x {shape:?}, bias {:?}", self.shape(bias))));
        }
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bc = b[i % shape[1]];
            chunk.iter_mut().for_each(|v| *v = *v + bc);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias), rg))
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", format!("{sa:?} · {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// 2D convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [n, c, h, wd] = dims4("conv2d", self.shape(x))?;
        let [o, c2, kh, kw] = dims4("conv2d", self.shape(w))?;
        if c != c2 {
            return Err(shape_err("conv2d", format!("input has {c} channels, kernel expects {c2}")));
        }
        if stride == 0 {
            return Err(TensorError::Argument { op: "conv2d", detail: "stride must be positive".into() });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Argument { op: "conv2d", detail: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})") });
        }
        let conv = Conv { stride, pad };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); n * o * plane];
        let mut col = vec![T::zero(); ckk * plane];
        for b in 0..n {
            im2col(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, conv, ho, wo, &mut col);
            T::gemm(o, ckk, plane, ws, false, &col, false, &mut out[b * o * plane..(b + 1) * o * plane], false);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape: vec![n, o, ho, wo], data: out }, Op::Conv2d(x, w, conv), rg))
    }

    /// Max pooling with a square `k × k` window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("max_pool2d", self.shape(x))?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(TensorError::Argument { op: "max_pool2d", detail: format!("window {k} stride {stride} on {h}x{w}") });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * stride * w + ow * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oh * stride + i) * w + ow * stride + j;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    arg.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, ho, wo], data: out }, Op::MaxPool2d(x, arg), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let tx = self.value(x);
        let t = Tensor { shape: tx.shape().to_vec(), data: tx.data().iter().map(|&v| f(v)).collect() };
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Saturated outputs below the normal range are flushed to zero;
    /// subnormal arithmetic is very slow on common CPUs.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| flush(T::one() / (T::one() + (-v).exp())), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| flush(v.exp()), Op::Exp(x))
    }

    /// `ln(max(x, floor))`
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::from_f64c(floor);
        self.unary(x, move |v| v.max(fl).ln(), Op::Log(x, fl))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(last.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.numel().max(1)).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let n = *s.first().ok_or_else(|| shape_err("flatten", "scalar input"))?;
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("upsample2d", self.shape(x))?;
        if factor == 0 {
            return Err(TensorError::Argument { op: "upsample2d", detail: "factor must be positive".into() });
        }
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oh in 0..ho {
                let row = &src[(oh / factor) * w..(oh / factor + 1) * w];
                for ow in 0..wo {
                    data.push(row[ow / factor]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, ho, wo], data }, Op::Upsample2d(x, factor), rg))
    }

    /// Crops or zero-pads the spatial dims to `h × w`, anchored top-left.
    pub fn fit_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let [n, c, hi, wi] = dims4("fit_spatial", self.shape(x))?;
        if (hi, wi) == (h, w) {
            return Ok(x);
        }
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); n * c * h * w];
        let (ch, cw) = (h.min(hi), w.min(wi));
        for plane in 0..n * c {
            for r in 0..ch {
                let src = &xs[plane * hi * wi + r * wi..][..cw];
                data[plane * h * w + r * w..][..cw].copy_from_slice(src);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, Op::FitSpatial(x), rg))
    }

    /// Per-channel normalisation with batch statistics over `N, H, W`.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let [n, c, h, w] = dims4("batch_norm2d", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm2d", format!("gamma/beta must be [{c}]")));
        }
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let eps = T::from_f64c(eps);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); xs.len()];
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * hw;
            let mut mean = T::zero();
            for b in 0..n {
                mean = mean + xs[idx(b)..idx(b) + hw].iter().copied().sum::<T>();
            }
            mean = mean / m;
            let mut var = T::zero();
            for b in 0..n {
                var = var + xs[idx(b)..idx(b) + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            var = var / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                for i in idx(b)..idx(b) + hw {
                    xhat[i] = (xs[i] - mean) * is;
                    out[i] = g[ch] * xhat[i] + bta[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor { shape: vec![n, c, h, w], data: out },
            Op::BatchNorm2d { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            // interior gradients are dropped as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Convenience: backward and accumulate parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(&mut grads[v.0], gy.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gy.to_vec());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], gy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], gy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    add_into(&mut grads[b.0], gy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Affine(x, s) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.iter().map(|&g| g * *s).collect());
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.to_vec());
                }
                if wants(*b) {
                    let shape = self.nodes[x.0].value.shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product::<usize>().max(1);
                    let mut gb = vec![T::zero(); c];
                    for (i, chunk) in gy.chunks(inner).enumerate() {
                        gb[i % c] = gb[i % c] + chunk.iter().copied().sum::<T>();
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gy, false, val(*b), true, &mut ga, false);
                    add_into(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), true, gy, false, &mut gb, false);
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d(x, w, conv) => {
                let [n, c, h, wd] = dims4("conv2d", self.nodes[x.0].value.shape()).unwrap();
                let [o, _, kh, kw] = dims4("conv2d", self.nodes[w.0].value.shape()).unwrap();
                let [_, _, ho, wo] = dims4("conv2d", node.value.shape()).unwrap();
                let (ckk, plane) = (c * kh * kw, ho * wo);
                let xs = val(*x);
                let ws = val(*w);
                let mut col = vec![T::zero(); ckk * plane];
                let mut gw = wants(*w).then(|| vec![T::zero(); o * ckk]);
                let mut gx = wants(*x).then(|| vec![T::zero(); n * c * h * wd]);
                let mut dcol = vec![T::zero(); if gx.is_some() { ckk * plane } else { 0 }];
                for b in 0..n {
                    let gyb = &gy[b * o * plane..(b + 1) * o * plane];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&xs[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, kh, kw, *conv, ho, wo, &mut col);
                        T::gemm(o, plane, ckk, gyb, false, &col, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        T::gemm(ckk, o, plane, ws, true, gyb, false, &mut dcol, false);
                        col2im(&dcol, c, h, wd, kh, kw, *conv, ho, wo, &mut gx[b * c * h * wd..(b + 1) * c * h * wd]);
                    }
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[w.0], gw);
                }
                if let Some(gx) = gx {
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::MaxPool2d(x, arg) => {
                if wants(*x) {
                    let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                    for (&i, &g) in arg.iter().zip(gy) {
                        gx[i] = gx[i] + g;
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let g = gy.iter().zip(val(*x)).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let g = gy.iter().zip(node.value.data()).map(|(&g, &y)| flush(g * y * (T::one() - y))).collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    let g = gy.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Log(x, floor) => {
                if wants(*x) {
                    let g = gy.iter().zip(val(*x)).map(|(&g, &v)| if v > *floor { g / v } else { T::zero() }).collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let last = *node.value.shape().last().unwrap();
                    let mut g = Vec::with_capacity(gy.len());
                    for (grow, yrow) in gy.chunks(last).zip(node.value.data().chunks(last)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        g.extend(grow.iter().zip(yrow).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], vec![gy[0]; self.nodes[x.0].value.numel()]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let g = gy[0] / T::from_usize(n.max(1)).unwrap();
                    add_into(&mut grads[x.0], vec![g; n]);
                }
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if wants(v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[start..start + len * inner]);
                        }
                        add_into(&mut grads[v.0], g);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(&mut grads[x.0], gy.to_vec());
                }
            }
            Op::Upsample2d(x, f) => {
                if wants(*x) {
                    let [n, c, h, w] = dims4("upsample2d", self.nodes[x.0].value.shape()).unwrap();
                    let (ho, wo) = (h * f, w * f);
                    let mut g = vec![T::zero(); n * c * h * w];
                    for plane in 0..n * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let dst = plane * h * w + (oh / f) * w + ow / f;
                                g[dst] = g[dst] + gy[plane * ho * wo + oh * wo + ow];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::FitSpatial(x) => {
                if wants(*x) {
                    let [n, c, hi, wi] = dims4("fit_spatial", self.nodes[x.0].value.shape()).unwrap();
                    let [_, _, h, w] = dims4("fit_spatial", node.value.shape()).unwrap();
                    let (ch, cw) = (h.min(hi), w.min(wi));
                    let mut g = vec![T::zero(); n * c * hi * wi];
                    for plane in 0..n * c {
                        for r in 0..ch {
                            g[plane * hi * wi + r * wi..][..cw].copy_from_slice(&gy[plane * h * w + r * w..][..cw]);
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::BatchNorm2d { x, gamma, beta, xhat, inv_std } => {
                let [n, c, h, w] = dims4("batch_norm2d", node.value.shape()).unwrap();
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let g = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); n * c * hw];
                for ch in 0..c {
                    let ranges = (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for r in ranges.clone() {
                        for i in r {
                            sum_dy = sum_dy + gy[i];
                            sum_dy_xhat = sum_dy_xhat + gy[i] * xhat[i];
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let k = g[ch] * inv_std[ch] / m;
                    for r in ranges {
                        for i in r {
                            gx[i] = k * (m * gy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                        }
                    }
                }
                if wants(*x) {
                    add_into(&mut grads[x.0], gx);
                }
                if wants(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if wants(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.input(Tensor::zeros(&[1, 8]));
        let s = g.softmax(z).unwrap();
        assert!(g.value(s).data().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.input(t(&[1, 2, 5, 4], &data));
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0 centre
        k[18 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = g.input(t(&[2, 2, 3, 3], &k));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, w, 1, 1).is_err());
        let w = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, w, 0, 1).is_err());
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn linear_gradient_and_accumulation() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.insert("w", t(&[1, 3], &[0.5, -1.0, 2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, wid);
        let x = g.input(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad, vec![1.0, 2.0, 3.0]);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(wid).grad, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("enc.w", t(&[2], &[1.0, 2.0]));
        let b = store.insert("head.w", t(&[2], &[3.0, 4.0]));
        store.set_trainable("enc.", false);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let p = g.mul(va, vb).unwrap();
        let loss = g.sum(p);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad, vec![0.0, 0.0]);
        assert_eq!(store.get(b).grad, vec![1.0, 2.0]);
    }
}
