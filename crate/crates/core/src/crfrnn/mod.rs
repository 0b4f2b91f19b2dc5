//! Mean-field CRF unrolled as a differentiable layer on top of the segmentation network,
//! with per-label kernel weights and a learned label-compatibility matrix.


use std::rc::Rc;

use rand::Rng;

use crate::densecrf::{CrfParams, GaussianKernel, Truncation};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMap};
use crate::rng;
use crate::scalar::Scalar;
use crate::segnet::{self, adam_step, make_batch, unet_logits, BatchSampler, NetParams, TrainConfig, TrainReport};
use crate::tensorcore::{softmax_channels_inplace, LinearOperator, Tape, Tensor, Var};

/// Learnable layer parameters plus fixed bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfRnnParams<T> {
    /// Appearance-kernel weight per label, shape `[L]`.
    pub w1: Tensor<T>,
    /// Smoothness-kernel weight per label, shape `[L]`.
    pub w2: Tensor<T>,
    /// Compatibility `mu[l, l']`, shape `[L, L]`.
    pub compat: Tensor<T>,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub n_unroll: usize,
    pub truncation: Truncation,
    /// Gradient steps applied so far.
    pub steps: u64,
}

/// Initial shared kernel weights. Kernel sums are unnormalized, so the weights start small.
pub const DEFAULT_W1: f64 = 1e-4;
pub const DEFAULT_W2: f64 = 1e-3;

impl<T: Scalar> CrfRnnParams<T> {
    /// Potts compatibility and the same kernel weights for every label.
    pub fn new(
        num_labels: usize,
        w1: f64,
        w2: f64,
        sigma_alpha: f64,
        sigma_beta: f64,
        sigma_gamma: f64,
        n_unroll: usize,
    ) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Config("CRF-RNN needs at least two labels".into()));
        }
        if n_unroll == 0 {
            return Err(Error::Config("n_unroll must be >= 1".into()));
        }
        if !(sigma_alpha > 0.0 && sigma_beta > 0.0 && sigma_gamma > 0.0) {
            return Err(Error::Config("CRF-RNN bandwidths must be > 0".into()));
        }
        let compat = Tensor::from_fn(&[num_labels, num_labels], |i| {
            if i / num_labels == i % num_labels { T::zero() } else { T::one() }
        });
        Ok(CrfRnnParams {
            w1: Tensor::full(&[num_labels], T::of(w1)),
            w2: Tensor::full(&[num_labels], T::of(w2)),
            compat,
            sigma_alpha,
            sigma_beta,
            sigma_gamma,
            n_unroll,
            truncation: Truncation::Auto,
            steps: 0,
        })
    }

    /// Default profile for images `width` pixels wide: the spatial appearance bandwidth is
    /// 160 pixels at a width of 212, scaled proportionally.
    pub fn for_width(width: usize, num_labels: usize) -> Result<Self> {
        Self::new(
            num_labels,
            DEFAULT_W1,
            DEFAULT_W2,
            160.0 / 212.0 * width as f64,
            3.0,
            10.0,
            5,
        )
    }

    pub fn num_labels(&self) -> usize {
        self.w1.len()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.w1, &self.w2, &self.compat]
    }

    /// Replace the learnable tensors, checking shapes.
    pub fn set_tensors(&mut self, w1: Tensor<T>, w2: Tensor<T>, compat: Tensor<T>) -> Result<()> {
        let l = self.num_labels();
        if w1.shape() != [l] || w2.shape() != [l] || compat.shape() != [l, l] {
            return Err(Error::Config("CRF-RNN tensor shapes do not match label count".into()));
        }
        self.w1 = w1;
        self.w2 = w2;
        self.compat = compat;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CrfRnnParams<U> {
        CrfRnnParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
            compat: self.compat.cast(),
            sigma_alpha: self.sigma_alpha,
            sigma_beta: self.sigma_beta,
            sigma_gamma: self.sigma_gamma,
            n_unroll: self.n_unroll,
            truncation: self.truncation,
            steps: self.steps,
        }
    }

    /// Separate-CRF parameters with the same bandwidths and the given shared weights.
    pub fn as_crf_params(&self, w1: f64, w2: f64) -> CrfParams {
        CrfParams {
            w1,
            w2,
            sigma_alpha: self.sigma_alpha,
            sigma_beta: self.sigma_beta,
            sigma_gamma: self.sigma_gamma,
            n_mf_iters: self.n_unroll,
            truncation: self.truncation,
        }
    }

    /// The two kernels for each image of a batch.
    pub fn kernels(&self, images: &[Image]) -> (Rc<KernelOp>, Rc<KernelOp>) {
        let window = self.as_crf_params(1.0, 1.0);
        let mut appearance = Vec::with_capacity(images.len());
        let mut smoothness = Vec::with_capacity(images.len());
        for img in images {
            let r = window.radius(img.width(), img.height());
            appearance.push(GaussianKernel::bilateral(img, self.sigma_alpha, self.sigma_beta, r));
            smoothness.push(GaussianKernel::spatial(img.width(), img.height(), self.sigma_gamma, r));
        }
        (
            Rc::new(KernelOp::new("appearance_kernel", appearance)),
            Rc::new(KernelOp::new("smoothness_kernel", smoothness)),
        )
    }
}

/// Applies one Gaussian kernel per batch element to every channel.
pub struct KernelOp {
    name: String,
    kernels: Vec<GaussianKernel>,
}

impl KernelOp {
    pub fn new(name: &str, kernels: Vec<GaussianKernel>) -> Self {
        KernelOp {
            name: name.to_string(),
            kernels,
        }
    }
}

impl<T: Scalar> LinearOperator<T> for KernelOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = x.dims4()?;
        if b != self.kernels.len() {
            return Err(Error::Config(format!(
                "{}: {} kernels for batch of {b}",
                self.name,
                self.kernels.len()
            )));
        }
        let mut out = Vec::with_capacity(x.len());
        for (n, k) in self.kernels.iter().enumerate() {
            if k.len() != h * w {
                return Err(Error::Config(format!("{}: kernel size mismatch", self.name)));
            }
            let src: Vec<f64> = x.data()[n * c * h * w..(n + 1) * c * h * w]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            out.extend(k.apply(&src, c).into_iter().map(T::of));
        }
        Tensor::new(x.shape(), out)
    }

    /// Kernels are symmetric.
    fn apply_adjoint(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(g)
    }
}

/// Tape variables of the layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct RnnVars {
    pub w1: Var,
    pub w2: Var,
    pub compat: Var,
}

pub fn register<T: Scalar>(rnn: &CrfRnnParams<T>, tape: &mut Tape<T>, trainable: bool) -> RnnVars {
    let mut put = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    RnnVars {
        w1: put(&rnn.w1),
        w2: put(&rnn.w2),
        compat: put(&rnn.compat),
    }
}

/// Record the unrolled mean-field iterations. Returns the refined logits `logits - m`
/// of the final iteration, whose softmax is the layer output.
pub fn crfrnn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    kernels: &(Rc<KernelOp>, Rc<KernelOp>),
    vars: RnnVars,
    n_unroll: usize,
) -> Result<Var> {
    let mut refined = logits;
    let mut q = tape.softmax_channels(logits)?;
    for t in 0..n_unroll {
        let step = |tape: &mut Tape<T>| -> Result<Var> {
            let f1 = tape.linear(q, kernels.0.clone())?;
            let f2 = tape.linear(q, kernels.1.clone())?;
            let s1 = tape.scale_channels(f1, vars.w1)?;
            let s2 = tape.scale_channels(f2, vars.w2)?;
            let s = tape.add(s1, s2)?;
            let m = tape.mix_channels(s, vars.compat)?;
            tape.sub(logits, m)
        };
        refined = step(tape).map_err(|e| e.context(format!("crf-rnn unroll {}", t + 1)))?;
        if t + 1 < n_unroll {
            q = tape.softmax_channels(refined)?;
        }
    }
    Ok(refined)
}

/// Batch intensities (after padding) as images, for building kernels.
fn batch_images<T: Scalar>(input: &Tensor<T>) -> Result<Vec<Image>> {
    let (b, _, h, w) = input.dims4()?;
    (0..b)
        .map(|n| {
            Image::new(
                w,
                h,
                input.data()[n * h * w..(n + 1) * h * w]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
            )
        })
        .collect()
}

/// Refined label distribution for network logits of shape `(1, L, h, w)` on `image`.
pub fn crfrnn_forward<T: Scalar>(logits: &Tensor<T>, image: &Image, rnn: &CrfRnnParams<T>) -> Result<ProbMap<T>> {
    let (b, c, h, w) = logits.dims4()?;
    if b != 1 || c != rnn.num_labels() || (h, w) != (image.height(), image.width()) {
        return Err(Error::Input(format!(
            "crf-rnn: logits {:?} do not match a {}x{} image with {} labels",
            logits.shape(),
            image.width(),
            image.height(),
            rnn.num_labels()
        )));
    }
    let kernels = rnn.kernels(std::slice::from_ref(image));
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let vars = register(rnn, &mut tape, false);
    let refined = crfrnn_layer(&mut tape, l, &kernels, vars, rnn.n_unroll)?;
    let mut probs = tape.value(refined).data().to_vec();
    softmax_channels_inplace(&mut probs, 1, c, h * w);
    ProbMap::new(w, h, c, probs)
}

/// Network forward (no dropout), CRF-RNN refinement, argmax, then seeds restored.
pub fn crfrnn_relabel<T: Scalar>(
    net: &NetParams<T>,
    rnn: &CrfRnnParams<T>,
    image: &Image,
    seeds: &LabelMap,
) -> Result<LabelMap> {
    if !seeds.same_dims(image.width(), image.height()) {
        return Err(Error::Input("seed dims differ from image".into()));
    }
    let out = segnet::forward(net, image, false, &mut rng::stream(0, "deterministic"))?;
    let mut z = crfrnn_forward(&out.logits, image, rnn)?.argmax();
    z.overwrite_with(seeds);
    Ok(z)
}

pub fn relabel_dataset<T: Scalar>(
    net: &NetParams<T>,
    rnn: &CrfRnnParams<T>,
    images: &[Image],
    seeds: &[LabelMap],
) -> Result<Vec<LabelMap>> {
    if images.len() != seeds.len() {
        return Err(Error::Input("image and seed counts differ".into()));
    }
    images
        .iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (img, s))| crfrnn_relabel(net, rnn, img, s).map_err(|e| e.context(format!("image {i}"))))
        .collect()
}

/// Net-only and layer-only phases of the alternating trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingSchedule {
    pub net_iters_per_cycle: usize,
    pub rnn_lr: f64,
}

impl Default for AlternatingSchedule {
    fn default() -> Self {
        AlternatingSchedule {
            net_iters_per_cycle: 10,
            rnn_lr: 1e-7,
        }
    }
}

impl AlternatingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.net_iters_per_cycle == 0 {
            return Err(Error::Config("net_iters_per_cycle must be >= 1".into()));
        }
        if !(self.rnn_lr >= 0.0) {
            return Err(Error::Config("rnn_lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss of network plus layer on a batch; returns the tape, loss and the trainable variables.
fn batch_loss<T: Scalar, R: Rng + ?Sized>(
    net: &NetParams<T>,
    rnn: &CrfRnnParams<T>,
    images: &[&Image],
    targets: &[&LabelMap],
    train_net: bool,
    rng: &mut R,
) -> Result<(Tape<T>, Var, Vec<Var>)> {
    let batch = make_batch::<T>(&net.config, images, Some(targets))?;
    let kernels = rnn.kernels(&batch_images(&batch.input)?);
    let mut tape = Tape::new();
    let net_vars = net.register(&mut tape, train_net);
    let rnn_vars = register(rnn, &mut tape, !train_net);
    let x = tape.constant(batch.input);
    let logits = unet_logits(&mut tape, &net.config, &net_vars, x, true, rng)?;
    let refined = crfrnn_layer(&mut tape, logits, &kernels, rnn_vars, rnn.n_unroll)?;
    let loss = tape.masked_cross_entropy(refined, &batch.targets)?;
    let vars = if train_net {
        net_vars
    } else {
        vec![rnn_vars.w1, rnn_vars.w2, rnn_vars.compat]
    };
    Ok((tape, loss, vars))
}

/// Loss trace of alternating training; `rnn_losses` holds the loss at each layer step.
#[derive(Debug, Clone, Default)]
pub struct AlternatingReport {
    pub net: TrainReport,
    pub rnn_losses: Vec<f64>,
}

/// Cycles of `net_iters_per_cycle` ADAM steps on the network (layer frozen) followed by one
/// plain gradient step on the layer (network frozen), until `iters_per_recursion` network
/// steps have been taken.
pub fn train_alternating<T: Scalar>(
    net: &mut NetParams<T>,
    rnn: &mut CrfRnnParams<T>,
    dataset: &[(Image, LabelMap)],
    schedule: &AlternatingSchedule,
    cfg: &TrainConfig,
    stream: &str,
) -> Result<AlternatingReport> {
    cfg.validate()?;
    schedule.validate()?;
    let mut report = AlternatingReport::default();
    if cfg.iters_per_recursion == 0 {
        return Ok(report);
    }
    if dataset.is_empty() {
        return Err(Error::Input("M step on an empty dataset".into()));
    }
    let mut sampler = BatchSampler::new(dataset.len(), rng::stream(cfg.seed, &format!("{stream}/shuffle")));
    let mut drop_rng = rng::stream(cfg.seed, &format!("{stream}/dropout"));
    let mut done = 0;
    let mut cycle = 0;
    while done < cfg.iters_per_recursion {
        let n = schedule.net_iters_per_cycle.min(cfg.iters_per_recursion - done);
        let phase = |net: &mut NetParams<T>, rnn: &mut CrfRnnParams<T>, report: &mut AlternatingReport, sampler: &mut BatchSampler, drop_rng: &mut rng::Rng| -> Result<()> {
            for _ in 0..n {
                let idx = sampler.next_batch(cfg.batch_size);
                let images: Vec<&Image> = idx.iter().map(|&i| &dataset[i].0).collect();
                let targets: Vec<&LabelMap> = idx.iter().map(|&i| &dataset[i].1).collect();
                let (tape, loss, vars) = batch_loss(net, rnn, &images, &targets, true, drop_rng)?;
                report.net.losses.push(tape.value(loss).data()[0].as_f64());
                let grads = segnet::collect_grads(&tape, loss, &vars)?;
                adam_step(net, &grads, cfg);
            }
            let idx = sampler.next_batch(cfg.batch_size);
            let images: Vec<&Image> = idx.iter().map(|&i| &dataset[i].0).collect();
            let targets: Vec<&LabelMap> = idx.iter().map(|&i| &dataset[i].1).collect();
            let (tape, loss, vars) = batch_loss(net, rnn, &images, &targets, false, drop_rng)?;
            report.rnn_losses.push(tape.value(loss).data()[0].as_f64());
            let grads = segnet::collect_grads(&tape, loss, &vars)?;
            gd_step(rnn, &grads, schedule.rnn_lr);
            Ok(())
        };
        phase(net, rnn, &mut report, &mut sampler, &mut drop_rng)
            .map_err(|e| e.context(format!("alternating cycle {cycle}")))?;
        done += n;
        cycle += 1;
    }
    Ok(report)
}

/// Plain gradient descent on the layer parameters.
pub fn gd_step<T: Scalar>(rnn: &mut CrfRnnParams<T>, grads: &[Tensor<T>], lr: f64) {
    rnn.steps += 1;
    let lr = T::of(lr);
    for (p, g) in [&mut rnn.w1, &mut rnn.w2, &mut rnn.compat].into_iter().zip(grads) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p = *p - lr * g;
        }
    }
}
