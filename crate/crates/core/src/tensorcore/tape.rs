use std::rc::Rc;

use rand::Rng;

use super::conv::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::UNKNOWN;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant linear operator applied inside the graph, e.g. a fixed pairwise filter.
///
/// Backward applies the adjoint, so the operator itself carries no trainable state.
pub trait LinearOperator<T: Scalar> {
    fn name(&self) -> &str;
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn apply_adjoint(&self, g: &Tensor<T>) -> Result<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxChannels(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleChannels {
        x: Var,
        w: Var,
    },
    MixChannels {
        x: Var,
        m: Var,
    },
    Sum(Var),
    MaskedCrossEntropy {
        logits: Var,
        targets: Rc<[u8]>,
        probs: Vec<T>,
        count: usize,
    },
    Linear {
        x: Var,
        op: Rc<dyn LinearOperator<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2(_) => "upsample_bilinear2",
            Op::Concat(..) => "concat_channels",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::MixChannels { .. } => "mix_channels",
            Op::Sum(_) => "sum",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::Linear { .. } => "linear_operator",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Register a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(
                format!("{}#{}", op.name(), self.nodes.len()),
                "non-finite output",
            ));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Relu(x)
            | Op::MaxPool2 { x, .. }
            | Op::Upsample2(x)
            | Op::Dropout { x, .. }
            | Op::SoftmaxChannels(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::MaskedCrossEntropy { logits: x, .. }
            | Op::Linear { x, .. } => vec![x],
            Op::Concat(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::ScaleChannels { x, w } => vec![x, w],
            Op::MixChannels { x, m } => vec![x, m],
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Config(format!(
                "{op}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    /// Same-padded, stride-1 convolution. `w` is `(cout, cin, k, k)` with odd `k`; `b` is `(cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Config(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let d = ConvDims {
            batch,
            cin,
            cout,
            h,
            w: wd,
            k: kh,
        };
        let mut out = vec![T::zero(); batch * cout * h * wd];
        conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
            &mut out,
        );
        let value = Tensor::new(&[batch, cout, h, wd], out)?;
        self.push(value, Op::Conv2d { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2. Spatial extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "max_pool2: spatial dims {h}x{w} must be even"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push(value, Op::MaxPool2 { x, argmax })
    }

    /// Bilinear x2 upsampling with half-pixel centers and edge clamping.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    o[oy * ow + ox] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                        + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push(value, Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Config(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for n in 0..ba {
            out.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        self.push(value, Op::Concat(a, b))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Disabled or `p == 0` returns `x`
    /// itself, so the output is bit-identical to the input.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        enabled: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !enabled || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push(value, Op::Dropout { x, mask })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let mut out = self.value(x).data().to_vec();
        softmax_channels_inplace(&mut out, b, c, h * w);
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::SoftmaxChannels(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    /// Multiply channel `c` of a `(b, c, h, w)` tensor by `w[c]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        if self.value(w).shape() != [c] {
            return Err(Error::Config(format!(
                "scale_channels: weights {:?} for {c} channels",
                self.value(w).shape()
            )));
        }
        let hw = h * wd;
        let wv = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[(i / hw) % c])
            .collect();
        let value = Tensor::new(&[b, c, h, wd], data)?;
        self.push(value, Op::ScaleChannels { x, w })
    }

    /// Per-pixel channel mixing `y[l] = sum_k m[l, k] * x[k]` with a `(c, c)` matrix.
    pub fn mix_channels(&mut self, x: Var, m: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(m).shape() != [c, c] {
            return Err(Error::Config(format!(
                "mix_channels: matrix {:?} for {c} channels",
                self.value(m).shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); b * c * hw];
        let (xd, md) = (self.value(x).data(), self.value(m).data());
        for n in 0..b {
            T::gemm(
                c,
                c,
                hw,
                T::one(),
                md,
                c as isize,
                1,
                &xd[n * c * hw..(n + 1) * c * hw],
                hw as isize,
                1,
                T::zero(),
                &mut out[n * c * hw..(n + 1) * c * hw],
                hw as isize,
                1,
            );
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::MixChannels { x, m })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Mean of `-log softmax(logits)[target]` over pixels whose target is not `UNKNOWN`.
    ///
    /// `targets` holds one label per `(batch, pixel)`. When every target is unknown the loss
    /// is zero and so is every gradient.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let (b, c, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(Error::Config(format!(
                "masked_cross_entropy: {} targets for {} pixels",
                targets.len(),
                b * hw
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != UNKNOWN && t as usize >= c) {
            return Err(Error::Config(format!(
                "masked_cross_entropy: target label {bad} with only {c} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let count = targets.iter().filter(|&&t| t != UNKNOWN).count();
        let mut total = T::zero();
        let src = self.value(logits).data();
        for n in 0..b {
            for p in 0..hw {
                let t = targets[n * hw + p];
                if t == UNKNOWN {
                    continue;
                }
                let base = n * c * hw + p;
                let mut mx = src[base];
                for k in 1..c {
                    mx = mx.max(src[base + k * hw]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    z = z + (src[base + k * hw] - mx).exp();
                }
                total = total + (z.ln() + mx - src[base + t as usize * hw]);
            }
        }
        softmax_channels_inplace(&mut probs, b, c, hw);
        let loss = if count == 0 {
            log::warn!("masked_cross_entropy: every target is unknown; loss is zero");
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let targets: Rc<[u8]> = Rc::from(targets);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        )
    }

    /// Apply a constant linear operator.
    pub fn linear(&mut self, x: Var, op: Rc<dyn LinearOperator<T>>) -> Result<Var> {
        let value = op.apply(self.value(x))?;
        if value.shape() != self.value(x).shape() {
            return Err(Error::Config(format!(
                "linear operator {} changed shape",
                op.name()
            )));
        }
        self.push(value, Op::Linear { x, op })
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("shapes checked")
    }

    /// Reverse pass from a scalar `loss`. Every node upstream of `loss` that requires a
    /// gradient receives the accumulated derivative.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b } => {
                let (batch, cin, h, wd) = self.value(x).dims4()?;
                let (cout, _, k, _) = self.value(w).dims4()?;
                let d = ConvDims {
                    batch,
                    cin,
                    cout,
                    h,
                    w: wd,
                    k,
                };
                let need = |v: Var| self.nodes[v.0].requires_grad;
                let mut dx = need(x).then(|| vec![T::zero(); self.value(x).len()]);
                let mut dw = need(w).then(|| vec![T::zero(); self.value(w).len()]);
                let mut db = b
                    .filter(|&b| need(b))
                    .map(|b| vec![T::zero(); self.value(b).len()]);
                conv::backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    gd,
                    &d,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, |acc| add_into(acc, &dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, |acc| add_into(acc, &dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, b, |acc| add_into(acc, &db));
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |acc| {
                    for ((a, &gv), &v) in acc.iter_mut().zip(gd).zip(xv) {
                        if v > T::zero() {
                            *a = *a + gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    for (&idx, &gv) in argmax.iter().zip(gd) {
                        acc[idx as usize] = acc[idx as usize] + gv;
                    }
                });
            }
            &Op::Upsample2(x) => {
                let (b, c, h, w) = self.value(x).dims4()?;
                let (oh, ow) = (2 * h, 2 * w);
                let ty = upsample_taps(h);
                let tx = upsample_taps(w);
                self.accumulate(grads, x, |acc| {
                    for plane in 0..b * c {
                        let gp = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                        let a = &mut acc[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                                let gv = gp[oy * ow + ox];
                                a[y0 * w + x0] = a[y0 * w + x0] + gv * wy0 * wx0;
                                a[y0 * w + x1] = a[y0 * w + x1] + gv * wy0 * wx1;
                                a[y1 * w + x0] = a[y1 * w + x0] + gv * wy1 * wx0;
                                a[y1 * w + x1] = a[y1 * w + x1] + gv * wy1 * wx1;
                            }
                        }
                    }
                });
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?.1;
                let hw = h * w;
                let ct = ca + cb;
                self.accumulate(grads, a, |acc| {
                    for i in 0..n {
                        add_into(
                            &mut acc[i * ca * hw..(i + 1) * ca * hw],
                            &gd[i * ct * hw..(i * ct + ca) * hw],
                        );
                    }
                });
                self.accumulate(grads, b, |acc| {
                    for i in 0..n {
                        add_into(
                            &mut acc[i * cb * hw..(i + 1) * cb * hw],
                            &gd[(i * ct + ca) * hw..(i + 1) * ct * hw],
                        );
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gv), &m) in acc.iter_mut().zip(gd).zip(mask) {
                        *a = *a + gv * m;
                    }
                });
            }
            &Op::SoftmaxChannels(x) => {
                let (b, c, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let s = node.value.data();
                self.accumulate(grads, x, |acc| {
                    for n in 0..b {
                        for p in 0..hw {
                            let base = n * c * hw + p;
                            let mut dot = T::zero();
                            for k in 0..c {
                                dot = dot + gd[base + k * hw] * s[base + k * hw];
                            }
                            for k in 0..c {
                                let i = base + k * hw;
                                acc[i] = acc[i] + s[i] * (gd[i] - dot);
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |acc| add_into(acc, gd));
                self.accumulate(grads, b, |acc| add_into(acc, gd));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |acc| add_into(acc, gd));
                self.accumulate(grads, b, |acc| {
                    for (x, &gv) in acc.iter_mut().zip(gd) {
                        *x = *x - gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |acc| {
                    for ((x, &gv), &o) in acc.iter_mut().zip(gd).zip(bv) {
                        *x = *x + gv * o;
                    }
                });
                self.accumulate(grads, b, |acc| {
                    for ((x, &gv), &o) in acc.iter_mut().zip(gd).zip(av) {
                        *x = *x + gv * o;
                    }
                });
            }
            &Op::Scale(x, s) => {
                self.accumulate(grads, x, |acc| {
                    for (a, &gv) in acc.iter_mut().zip(gd) {
                        *a = *a + gv * s;
                    }
                });
            }
            &Op::ScaleChannels { x, w } => {
                let (_, c, h, wd) = self.value(x).dims4()?;
                let hw = h * wd;
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                self.accumulate(grads, x, |acc| {
                    for (i, (a, &gv)) in acc.iter_mut().zip(gd).enumerate() {
                        *a = *a + gv * wv[(i / hw) % c];
                    }
                });
                self.accumulate(grads, w, |acc| {
                    for (i, (&gv, &v)) in gd.iter().zip(xv).enumerate() {
                        let k = (i / hw) % c;
                        acc[k] = acc[k] + gv * v;
                    }
                });
            }
            &Op::MixChannels { x, m } => {
                let (b, c, h, w) = self.value(x).dims4()?;
                let hw = h * w;
                let (xv, mv) = (self.value(x).data(), self.value(m).data());
                self.accumulate(grads, x, |acc| {
                    for n in 0..b {
                        // dx = M^T g
                        T::gemm(
                            c,
                            c,
                            hw,
                            T::one(),
                            mv,
                            1,
                            c as isize,
                            &gd[n * c * hw..(n + 1) * c * hw],
                            hw as isize,
                            1,
                            T::one(),
                            &mut acc[n * c * hw..(n + 1) * c * hw],
                            hw as isize,
                            1,
                        );
                    }
                });
                self.accumulate(grads, m, |acc| {
                    for n in 0..b {
                        // dM += g x^T
                        T::gemm(
                            c,
                            hw,
                            c,
                            T::one(),
                            &gd[n * c * hw..(n + 1) * c * hw],
                            hw as isize,
                            1,
                            &xv[n * c * hw..(n + 1) * c * hw],
                            1,
                            hw as isize,
                            T::one(),
                            acc,
                            c as isize,
                            1,
                        );
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate(grads, x, |acc| {
                    for a in acc.iter_mut() {
                        *a = *a + gv;
                    }
                });
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let (b, c, h, w) = self.value(*logits).dims4()?;
                let hw = h * w;
                let scale = gd[0] / T::of(*count as f64);
                self.accumulate(grads, *logits, |acc| {
                    for n in 0..b {
                        for p in 0..hw {
                            let t = targets[n * hw + p];
                            if t == UNKNOWN {
                                continue;
                            }
                            let base = n * c * hw + p;
                            for k in 0..c {
                                let i = base + k * hw;
                                let onehot = if k == t as usize { T::one() } else { T::zero() };
                                acc[i] = acc[i] + scale * (probs[i] - onehot);
                            }
                        }
                    }
                });
            }
            Op::Linear { x, op } => {
                let back = op.apply_adjoint(g)?;
                self.accumulate(grads, *x, |acc| add_into(acc, back.data()));
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}

/// Channel softmax on a `(b, c, hw)` buffer, in place.
pub fn softmax_channels_inplace<T: Scalar>(data: &mut [T], b: usize, c: usize, hw: usize) {
    for n in 0..b {
        for p in 0..hw {
            let base = n * c * hw + p;
            let mut mx = data[base];
            for k in 1..c {
                mx = mx.max(data[base + k * hw]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (data[base + k * hw] - mx).exp();
                data[base + k * hw] = e;
                z = z + e;
            }
            for k in 0..c {
                data[base + k * hw] = data[base + k * hw] / z;
            }
        }
    }
}

/// Source taps `(i0, i1, w0, w1)` for each of the `2n` outputs of a half-pixel x2 upsample.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                if i == 0 {
                    (0, 0, 1.0, 0.0)
                } else {
                    (i - 1, i, 0.25, 0.75)
                }
            } else if i + 1 >= n {
                (i, i, 1.0, 0.0)
            } else {
                (i, i + 1, 0.75, 0.25)
            }
        })
        .collect()
}
