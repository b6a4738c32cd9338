//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use crate::kernels::{self, ConvGeometry};
use crate::{Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dCfg {
    pub const SAME3: Self = Self { stride: 1, pad: 1 };
    pub const POINTWISE: Self = Self { stride: 1, pad: 0 };
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Warp { image: Var, flow: Var },
    ConvexUpsample { flow: Var, logits: Var, factor: usize },
    Gram(Var),
    DiffX(Var),
    DiffY(Var),
    ScaleChannels { x: Var, w: Var },
    ChannelNormalize(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn chw_of(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        _ => panic!("expected a C×H×W tensor, got {shape:?}"),
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn offset(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.mean());
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of scalar nodes, each scaled by its weight.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var, TensorError> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| TensorError::ShapeMismatch("weighted_sum of no terms".into()))
    }

    /// 2-D convolution of a C×H×W input with `w: O×C×k×k` and optional `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (in_c, in_h, in_w) = match xs[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(TensorError::ShapeMismatch(format!("conv input {xs:?}"))),
        };
        let (out_c, k) = match ws[..] {
            [o, c, kh, kw] if c == in_c && kh == kw => (o, kh),
            _ => return Err(TensorError::ShapeMismatch(format!("conv weight {ws:?} for input {xs:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(TensorError::ShapeMismatch(format!("conv bias {:?}", self.shape(b))));
            }
        }
        if in_h + 2 * cfg.pad < k || in_w + 2 * cfg.pad < k || cfg.stride == 0 {
            return Err(TensorError::ShapeMismatch(format!("conv kernel {k} on {in_h}×{in_w}")));
        }
        let geom = ConvGeometry {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: k,
            stride: cfg.stride,
            pad: cfg.pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::from_vec(&[out_c, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// ×2 bilinear upsampling with half-pixel centres.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_of(self.shape(x));
        let data = kernels::upsample2x_forward(c, h, w, self.value(x).data());
        let value = Tensor::from_vec(&[c, 2 * h, 2 * w], data).expect("upsample shape");
        let rg = self.rg(x);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// 2×2 average pooling (×½ bilinear resampling). Requires even sides.
    pub fn avgpool2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = chw_of(self.shape(x));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!("avgpool2x on odd size {h}×{w}")));
        }
        let data = kernels::avgpool2x_forward(c, h, w, self.value(x).data());
        let value = Tensor::from_vec(&[c, h / 2, w / 2], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool2x(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = self.value(x).narrow_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    /// Backward bilinear warp of `image` (C×H×W) by `flow` (2×H×W, pixels).
    pub fn warp(&mut self, image: Var, flow: Var) -> Result<Var, TensorError> {
        let (c, h, w) = chw_of(self.shape(image));
        if self.shape(flow) != [2, h, w] {
            return Err(TensorError::ShapeMismatch(format!(
                "flow {:?} for image {:?}",
                self.shape(flow),
                self.shape(image)
            )));
        }
        let data = kernels::warp_forward(c, h, w, self.value(image).data(), self.value(flow).data());
        let value = Tensor::from_vec(&[c, h, w], data)?;
        let rg = self.rg(image) || self.rg(flow);
        Ok(self.push(value, Op::Warp { image, flow }, rg))
    }

    /// Convex upsampling of `flow` (C×h×w) by `factor` with mask logits
    /// `(9·factor²)×h×w`.
    pub fn convex_upsample(&mut self, flow: Var, logits: Var, factor: usize) -> Result<Var, TensorError> {
        let (c, h, w) = chw_of(self.shape(flow));
        let mc = kernels::convex_mask_channels(factor);
        if self.shape(logits) != [mc, h, w] {
            return Err(TensorError::ShapeMismatch(format!(
                "mask logits {:?}, expected [{mc}, {h}, {w}]",
                self.shape(logits)
            )));
        }
        let data = kernels::convex_upsample_forward(c, h, w, factor, self.value(flow).data(), self.value(logits).data());
        let value = Tensor::from_vec(&[c, h * factor, w * factor], data)?;
        let rg = self.rg(flow) || self.rg(logits);
        Ok(self.push(value, Op::ConvexUpsample { flow, logits, factor }, rg))
    }

    /// Channel Gram matrix `F Fᵀ / (C·H·W)` of a C×H×W tensor.
    pub fn gram(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_of(self.shape(x));
        let n = h * w;
        let norm = T::lit((c * n) as f64);
        let mut out = vec![T::zero(); c * c];
        T::gemm(
            c,
            n,
            c,
            T::one() / norm,
            self.value(x).data(),
            n as isize,
            1,
            self.value(x).data(),
            1,
            n as isize,
            T::zero(),
            &mut out,
            c as isize,
            1,
        );
        let value = Tensor::from_vec(&[c, c], out).expect("gram shape");
        let rg = self.rg(x);
        self.push(value, Op::Gram(x), rg)
    }

    /// Forward difference along x: `C×H×(W−1)`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_of(self.shape(x));
        let src = self.value(x);
        let value = Tensor::from_fn(&[c, h, w.saturating_sub(1)], |i| {
            src.at3(i[0], i[1], i[2] + 1) - src.at3(i[0], i[1], i[2])
        });
        let rg = self.rg(x);
        self.push(value, Op::DiffX(x), rg)
    }

    /// Forward difference along y: `C×(H−1)×W`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_of(self.shape(x));
        let src = self.value(x);
        let value = Tensor::from_fn(&[c, h.saturating_sub(1), w], |i| {
            src.at3(i[0], i[1] + 1, i[2]) - src.at3(i[0], i[1], i[2])
        });
        let rg = self.rg(x);
        self.push(value, Op::DiffY(x), rg)
    }

    /// Multiplies channel `c` of `x` by `w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (c, h, wd) = chw_of(self.shape(x));
        if self.shape(w) != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "channel weights {:?} for {c} channels",
                self.shape(w)
            )));
        }
        let weights = self.value(w).data().to_vec();
        let plane = h * wd;
        let mut value = self.value(x).clone();
        for (ch, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = *v * weights[ch];
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleChannels { x, w }, rg))
    }

    /// Unit-normalises the channel vector at every pixel (`ε = 1e-10`).
    pub fn channel_normalize(&mut self, x: Var) -> Var {
        let (c, h, w) = chw_of(self.shape(x));
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * plane];
        for p in 0..plane {
            let norm = channel_norm(src, c, plane, p);
            for ch in 0..c {
                out[ch * plane + p] = src[ch * plane + p] / norm;
            }
        }
        let value = Tensor::from_vec(&[c, h, w], out).expect("normalize shape");
        let rg = self.rg(x);
        self.push(value, Op::ChannelNormalize(x), rg)
    }

    /// Reverse sweep from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contribution: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Mutable, zero-initialised gradient buffer for `v`.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = g.zip_map(self.value(b), |x, y| x * y).expect("mul grad");
                    self.accumulate(grads, a, d);
                }
                if self.rg(b) {
                    let d = g.zip_map(self.value(a), |x, y| x * y).expect("mul grad");
                    self.accumulate(grads, b, d);
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::Offset(x) => self.accumulate(grads, x, g.clone()),
            &Op::Relu(x) => {
                let d = g
                    .zip_map(self.value(x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("relu grad");
                self.accumulate(grads, x, d);
            }
            &Op::LeakyRelu(x, slope) => {
                let d = g
                    .zip_map(self.value(x), |gv, xv| if xv > T::zero() { gv } else { gv * slope })
                    .expect("lrelu grad");
                self.accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = g.zip_map(value, |gv, y| gv * y * (T::one() - y)).expect("sigmoid grad");
                self.accumulate(grads, x, d);
            }
            &Op::Abs(x) => {
                let d = g.zip_map(self.value(x), |gv, xv| gv * sign(xv)).expect("abs grad");
                self.accumulate(grads, x, d);
            }
            &Op::Square(x) => {
                let d = g.zip_map(self.value(x), |gv, xv| gv * T::lit(2.0) * xv).expect("square grad");
                self.accumulate(grads, x, d);
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv));
            }
            &Op::Mean(x) => {
                let n = T::lit(self.value(x).len() as f64);
                self.accumulate(grads, x, Tensor::full(self.shape(x), g.item() / n));
            }
            &Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(x).data().to_vec();
                let wv = self.value(w).data().to_vec();
                let mut dx = self.rg(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.rg(w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|&b| self.rg(b)).map(|_| vec![T::zero(); geom.out_c]);
                kernels::conv2d_backward(&geom, &xv, &wv, g.data(), dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx).expect("conv dx"));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw).expect("conv dw"));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, b, Tensor::from_vec(&[geom.out_c], db).expect("conv db"));
                }
            }
            &Op::Upsample2x(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                if let Some(d) = self.slot(grads, x) {
                    kernels::upsample2x_backward(c, h, w, g.data(), d);
                }
            }
            &Op::AvgPool2x(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                if let Some(d) = self.slot(grads, x) {
                    kernels::avgpool2x_backward(c, h, w, g.data(), d);
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[0];
                    if self.rg(p) {
                        let piece = g.narrow_channels(start, c).expect("concat grad");
                        self.accumulate(grads, p, piece);
                    }
                    start += c;
                }
            }
            &Op::Narrow { x, start } => {
                let (_, h, w) = chw_of(self.shape(x));
                let plane = h * w;
                if let Some(d) = self.slot(grads, x) {
                    let dst = &mut d[start * plane..start * plane + g.len()];
                    for (a, &b) in dst.iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
            }
            &Op::Warp { image, flow } => {
                let (c, h, w) = chw_of(self.shape(image));
                let img = self.value(image).data().to_vec();
                let fl = self.value(flow).data().to_vec();
                let mut d_img = self.rg(image).then(|| vec![T::zero(); img.len()]);
                let mut d_flow = self.rg(flow).then(|| vec![T::zero(); fl.len()]);
                kernels::warp_backward(c, h, w, &img, &fl, g.data(), d_img.as_deref_mut(), d_flow.as_deref_mut());
                if let Some(d) = d_img {
                    self.accumulate(grads, image, Tensor::from_vec(&[c, h, w], d).expect("warp grad"));
                }
                if let Some(d) = d_flow {
                    self.accumulate(grads, flow, Tensor::from_vec(&[2, h, w], d).expect("warp grad"));
                }
            }
            &Op::ConvexUpsample { flow, logits, factor } => {
                let (c, h, w) = chw_of(self.shape(flow));
                let fl = self.value(flow).data().to_vec();
                let lg = self.value(logits).data().to_vec();
                let mut d_flow = self.rg(flow).then(|| vec![T::zero(); fl.len()]);
                let mut d_logits = self.rg(logits).then(|| vec![T::zero(); lg.len()]);
                kernels::convex_upsample_backward(c, h, w, factor, &fl, &lg, g.data(), d_flow.as_deref_mut(), d_logits.as_deref_mut());
                if let Some(d) = d_flow {
                    self.accumulate(grads, flow, Tensor::from_vec(&[c, h, w], d).expect("convex grad"));
                }
                if let Some(d) = d_logits {
                    let shape = self.shape(logits).to_vec();
                    self.accumulate(grads, logits, Tensor::from_vec(&shape, d).expect("convex grad"));
                }
            }
            &Op::Gram(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                let n = h * w;
                let norm = T::lit((c * n) as f64);
                // dX = (G + Gᵀ) X / norm
                let gs = g.data();
                let sym: Vec<T> = (0..c * c).map(|k| gs[k] + gs[(k % c) * c + k / c]).collect();
                if let Some(d) = self.slot(grads, x) {
                    T::gemm(
                        c,
                        c,
                        n,
                        T::one() / norm,
                        &sym,
                        c as isize,
                        1,
                        self.nodes[x.0].value.data(),
                        n as isize,
                        1,
                        T::one(),
                        d,
                        n as isize,
                        1,
                    );
                }
            }
            &Op::DiffX(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                if let Some(d) = self.slot(grads, x) {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w - 1 {
                                let gv = g.data()[(ch * h + y) * (w - 1) + xx];
                                let base = (ch * h + y) * w + xx;
                                d[base + 1] = d[base + 1] + gv;
                                d[base] = d[base] - gv;
                            }
                        }
                    }
                }
            }
            &Op::DiffY(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                if let Some(d) = self.slot(grads, x) {
                    for ch in 0..c {
                        for y in 0..h - 1 {
                            for xx in 0..w {
                                let gv = g.data()[(ch * (h - 1) + y) * w + xx];
                                let base = (ch * h + y) * w + xx;
                                d[base + w] = d[base + w] + gv;
                                d[base] = d[base] - gv;
                            }
                        }
                    }
                }
            }
            &Op::ScaleChannels { x, w } => {
                let (c, h, wd) = chw_of(self.shape(x));
                let plane = h * wd;
                if self.rg(x) {
                    let weights = self.value(w).data().to_vec();
                    let mut d = g.clone();
                    for (ch, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                        for v in chunk {
                            *v = *v * weights[ch];
                        }
                    }
                    self.accumulate(grads, x, d);
                }
                if self.rg(w) {
                    let xv = self.value(x).data();
                    let dw: Vec<T> = (0..c)
                        .map(|ch| (0..plane).map(|p| g.data()[ch * plane + p] * xv[ch * plane + p]).sum())
                        .collect();
                    self.accumulate(grads, w, Tensor::from_vec(&[c], dw).expect("scale grad"));
                }
            }
            &Op::ChannelNormalize(x) => {
                let (c, h, w) = chw_of(self.shape(x));
                let plane = h * w;
                let src = self.value(x).data().to_vec();
                if let Some(d) = self.slot(grads, x) {
                    for p in 0..plane {
                        let norm = channel_norm(&src, c, plane, p);
                        // y = x / n  ⇒  dx = (g − y (y·g)) / n
                        let dot: T = (0..c).map(|ch| value.data()[ch * plane + p] * g.data()[ch * plane + p]).sum();
                        for ch in 0..c {
                            let idx = ch * plane + p;
                            d[idx] = d[idx] + (g.data()[idx] - value.data()[idx] * dot) / norm;
                        }
                    }
                }
            }
        }
    }
}

fn channel_norm<T: Scalar>(src: &[T], c: usize, plane: usize, p: usize) -> T {
    let sq: T = (0..c).map(|ch| src[ch * plane + p] * src[ch * plane + p]).sum();
    (sq + T::lit(1e-10)).sqrt()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
