//! Tape of recorded operations and reverse-mode differentiation.

use rayon::prelude::*;

use super::kernels::{conv_out_size, Window};
use super::{GradError, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-norm training forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize },
    ConvTranspose2d { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu { x: Var },
    AvgPool2 { x: Var },
    Concat { parts: Vec<Var> },
    Scale { x: Var, k: T },
    Add { a: Var, b: Var },
    L1 { pred: Var, target: Tensor<T>, weight: T },
    Dot { x: Var, c: Tensor<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation. Inputs are copied
/// in, so no operation ever mutates caller data.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, left: &[usize], right: &[usize]) -> GradError {
    GradError::Shape { op: op.into(), left: left.to_vec(), right: right.to_vec() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// 3x3 cross-correlation with zero padding 1. Weights are `(Cout, Cin, 3, 3)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, GradError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4("conv2d")?;
        if !(stride == 1 || stride == 2) {
            return Err(GradError::Domain(format!("conv2d stride {stride}")));
        }
        if wv.shape.len() != 4 || wv.shape[1] != c || wv.shape[2] != 3 || wv.shape[3] != 3 {
            return Err(shape_err("conv2d", &xv.shape, &wv.shape));
        }
        let cout = wv.shape[0];
        let win = Window { c, h, w: wd, k: 3, stride, pad: 1, ho: conv_out_size(h, stride), wo: conv_out_size(wd, stride) };
        let out_len = cout * win.cols();
        let mut out = vec![T::zero(); n * out_len];
        let in_len = c * h * wd;
        out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
            let mut cols = vec![T::zero(); win.rows() * win.cols()];
            win.im2col(&xv.data[b * in_len..(b + 1) * in_len], &mut cols);
            T::gemm(cout, win.rows(), win.cols(), &wv.data, false, &cols, false, dst, false);
        });
        let value = Tensor { shape: vec![n, cout, win.ho, win.wo], data: out };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride }, needs))
    }

    /// 4x4 transposed convolution, stride 2, padding 1: exact 2x upsampling.
    /// Weights are `(Cin, Cout, 4, 4)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4("conv_transpose2d")?;
        if wv.shape.len() != 4 || wv.shape[0] != c || wv.shape[2] != 4 || wv.shape[3] != 4 {
            return Err(shape_err("conv_transpose2d", &xv.shape, &wv.shape));
        }
        let cout = wv.shape[1];
        let win = Window { c: cout, h: 2 * h, w: 2 * wd, k: 4, stride: 2, pad: 1, ho: h, wo: wd };
        let out_len = cout * 4 * h * wd;
        let in_len = c * h * wd;
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(b, dst)| {
            let mut cols = vec![T::zero(); win.rows() * win.cols()];
            T::gemm(win.rows(), c, win.cols(), &wv.data, true, &xv.data[b * in_len..(b + 1) * in_len], false, &mut cols, false);
            win.col2im(&cols, dst);
        });
        let value = Tensor { shape: vec![n, cout, 2 * h, 2 * wd], data: out };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::ConvTranspose2d { x, w }, needs))
    }

    /// Adds a per-channel bias of shape `(C)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (_, c, h, w) = xv.dims4("add_bias")?;
        if bv.shape != [c] {
            return Err(shape_err("add_bias", &xv.shape, &bv.shape));
        }
        let hw = h * w;
        let mut data = xv.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + bv.data[(i / hw) % c];
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddBias { x, b }, needs))
    }

    /// Batch normalization over `(N, H, W)` per channel. Train mode returns the
    /// batch statistics so the caller can update its running averages; eval
    /// mode normalizes with `running` (mean, variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>), GradError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("batch_norm")?;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("batch_norm", &xv.shape, &self.value(gamma).shape));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(GradError::Domain(format!("batch norm over {count} element(s) per channel")));
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xv.data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xv.data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / cnt;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                let (m, v) = running.ok_or_else(|| GradError::Domain("eval batch norm needs running stats".into()))?;
                if m.len() != c || v.len() != c {
                    return Err(shape_err("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.data.len()];
        let mut out = vec![T::zero(); xv.data.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / hw) % c;
            *xh = (xv.data[i] - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        let value = Tensor { shape: xv.shape.clone(), data: out };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let batch = mode == BnMode::Train;
        Ok((self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch }, needs), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| v.max(T::zero())).collect() };
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, GradError> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(GradError::Domain(format!("avg_pool2 of odd size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for x_ in 0..wo {
                    let s = src[2 * y * w + 2 * x_] + src[2 * y * w + 2 * x_ + 1] + src[(2 * y + 1) * w + 2 * x_] + src[(2 * y + 1) * w + 2 * x_ + 1];
                    out[p * ho * wo + y * wo + x_] = s * quarter;
                }
            }
        }
        let value = Tensor { shape: vec![n, c, ho, wo], data: out };
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool2 { x }, needs))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let first = self.value(parts[0]).dims4("concat")?;
        let mut total_c = 0;
        for &p in parts {
            let (n, c, h, w) = self.value(p).dims4("concat")?;
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(shape_err("concat", &self.value(parts[0]).shape, &self.value(p).shape));
            }
            total_c += c;
        }
        let (n, _, h, w) = first;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape[1];
                data.extend_from_slice(&v.data[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { shape: vec![n, total_c, h, w], data }, Op::Concat { parts: parts.to_vec() }, needs))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let xv = self.value(x);
        let value = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&v| v * k).collect() };
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, k }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err("add", &av.shape, &bv.shape));
        }
        let value = Tensor { shape: av.shape.clone(), data: av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect() };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// `weight * mean |pred - target|` as a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, weight: T) -> Result<Var, GradError> {
        let pv = self.value(pred);
        if pv.shape != target.shape {
            return Err(shape_err("l1_loss", &pv.shape, &target.shape));
        }
        if pv.is_empty() {
            return Err(GradError::Domain("l1_loss of an empty tensor".into()));
        }
        let s: T = pv.data.iter().zip(&target.data).map(|(&p, &t)| (p - t).abs()).sum();
        let value = Tensor::scalar(weight * s / T::from_usize(pv.len()).unwrap());
        let needs = self.needs(pred);
        Ok(self.push(value, Op::L1 { pred, target: target.clone(), weight }, needs))
    }

    /// `sum(x * c)` for a constant `c`: projects a tensor onto a scalar.
    pub fn dot(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, GradError> {
        let xv = self.value(x);
        if xv.shape != c.shape {
            return Err(shape_err("dot", &xv.shape, &c.shape));
        }
        let value = Tensor::scalar(xv.data.iter().zip(&c.data).map(|(&a, &b)| a * b).sum());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Dot { x, c: c.clone() }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data.iter().copied().sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, GradError> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", &self.value(root).shape, &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e = *e + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4("conv2d").unwrap();
                let cout = wv.shape[0];
                let win = Window { c, h, w: wd, k: 3, stride: *stride, pad: 1, ho: conv_out_size(h, *stride), wo: conv_out_size(wd, *stride) };
                let in_len = c * h * wd;
                let out_len = cout * win.cols();
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    let mut cols = vec![T::zero(); win.rows() * win.cols()];
                    for b in 0..n {
                        win.im2col(&xv.data[b * in_len..(b + 1) * in_len], &mut cols);
                        T::gemm(cout, win.cols(), win.rows(), &g[b * out_len..(b + 1) * out_len], false, &cols, true, &mut dw, true);
                    }
                    acc(*w, dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    dx.par_chunks_mut(in_len).enumerate().for_each(|(b, dst)| {
                        let mut dcols = vec![T::zero(); win.rows() * win.cols()];
                        T::gemm(win.rows(), cout, win.cols(), &wv.data, true, &g[b * out_len..(b + 1) * out_len], false, &mut dcols, false);
                        win.col2im(&dcols, dst);
                    });
                    acc(*x, dx);
                }
            }
            Op::ConvTranspose2d { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4("conv_transpose2d").unwrap();
                let cout = wv.shape[1];
                let win = Window { c: cout, h: 2 * h, w: 2 * wd, k: 4, stride: 2, pad: 1, ho: h, wo: wd };
                let in_len = c * h * wd;
                let out_len = cout * 4 * h * wd;
                let unfold = |b: usize| {
                    let mut dcols = vec![T::zero(); win.rows() * win.cols()];
                    win.im2col(&g[b * out_len..(b + 1) * out_len], &mut dcols);
                    dcols
                };
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for b in 0..n {
                        let dcols = unfold(b);
                        T::gemm(c, win.cols(), win.rows(), &xv.data[b * in_len..(b + 1) * in_len], false, &dcols, true, &mut dw, true);
                    }
                    acc(*w, dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    dx.par_chunks_mut(in_len).enumerate().for_each(|(b, dst)| {
                        let dcols = unfold(b);
                        T::gemm(c, win.rows(), win.cols(), &wv.data, false, &dcols, false, dst, false);
                    });
                    acc(*x, dx);
                }
            }
            Op::AddBias { x, b } => {
                let (_, c, h, w) = self.value(*x).dims4("add_bias").unwrap();
                let hw = h * w;
                if self.needs(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        db[(i / hw) % c] = db[(i / hw) % c] + gi;
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm").unwrap();
                let hw = h * w;
                let gv = &self.value(*gamma).data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] = dgamma[ch] + gi * xhat[i];
                    dbeta[ch] = dbeta[ch] + gi;
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * hw).unwrap();
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / hw) % c;
                        *d = if *batch {
                            gv[ch] * inv_std[ch] / m * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                        } else {
                            gv[ch] * inv_std[ch] * g[i]
                        };
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu { x } => {
                let out = &node.value.data;
                acc(*x, g.iter().zip(out).map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() }).collect());
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4("avg_pool2").unwrap();
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + yy * w + xx] = g[p * ho * wo + (yy / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = node.value.dims4("concat").unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            d.extend_from_slice(&g[start..start + c * hw]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            Op::Scale { x, k } => acc(*x, g.iter().map(|&v| v * *k).collect()),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::L1 { pred, target, weight } => {
                let pv = self.value(*pred);
                let k = g[0] * *weight / T::from_usize(pv.len()).unwrap();
                acc(
                    *pred,
                    pv.data
                        .iter()
                        .zip(&target.data)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d > T::zero() {
                                k
                            } else if d < T::zero() {
                                -k
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Dot { x, c } => acc(*x, c.data.iter().map(|&v| v * g[0]).collect()),
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).len()]),
        }
    }
}

/// Result of [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` if it does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
