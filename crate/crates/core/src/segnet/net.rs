use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMap, UNKNOWN};
use crate::scalar::Scalar;
use crate::tensorcore::{softmax_channels_inplace, Tape, Tensor, Var};

/// Architecture of the scaled-down U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Encoder levels including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    /// Number of classes, background included.
    pub num_labels: usize,
    pub dropout_p: f64,
    /// How many of the innermost blocks end with dropout.
    pub dropout_blocks: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 3,
            base_channels: 16,
            num_labels: 3,
            dropout_p: 0.5,
            dropout_blocks: 5,
        }
    }
}

impl NetConfig {
    pub fn total_blocks(&self) -> usize {
        2 * self.depth - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("net depth {} < 2", self.depth)));
        }
        if self.num_labels < 2 || self.num_labels > 255 {
            return Err(Error::Config(format!(
                "num_labels {} outside 2..=255",
                self.num_labels
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.dropout_blocks > self.total_blocks() {
            return Err(Error::Config(format!(
                "dropout_blocks {} exceeds the {} blocks of a depth-{} net",
                self.dropout_blocks,
                self.total_blocks(),
                self.depth
            )));
        }
        Ok(())
    }

    /// Spatial multiple every input must be padded to.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Blocks in execution order: encoder levels `0..depth` (the last is the bottleneck)
    /// followed by decoder levels `depth-2 ..= 0`.
    fn blocks(&self) -> Vec<BlockSpec> {
        let d = self.depth;
        let mut out = Vec::with_capacity(self.total_blocks());
        for level in 0..d {
            let cin = if level == 0 { 1 } else { self.channels(level - 1) };
            out.push(BlockSpec {
                level,
                decoder: false,
                cin,
                cout: self.channels(level),
            });
        }
        for level in (0..d - 1).rev() {
            out.push(BlockSpec {
                level,
                decoder: true,
                cin: self.channels(level + 1) + self.channels(level),
                cout: self.channels(level),
            });
        }
        out
    }

    /// Whether block `i` (execution order) carries dropout. Blocks are ranked by distance
    /// from the bottleneck, encoder before decoder at equal distance.
    pub fn block_has_dropout(&self, i: usize) -> bool {
        let blocks = self.blocks();
        let mut ranked: Vec<usize> = (0..blocks.len()).collect();
        ranked.sort_by_key(|&b| (self.depth - 1 - blocks[b].level, blocks[b].decoder));
        ranked[..self.dropout_blocks].contains(&i)
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    level: usize,
    decoder: bool,
    cin: usize,
    cout: usize,
}

/// Network weights plus ADAM state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub config: NetConfig,
    pub tensors: Vec<Tensor<T>>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// ADAM step counter.
    pub t: u64,
}

impl<T: Scalar> NetParams<T> {
    /// He-uniform kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let he = |cout: usize, cin: usize, k: usize, rng: &mut R| {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            Tensor::from_fn(&[cout, cin, k, k], |_| T::of(rng.random_range(-bound..bound)))
        };
        for b in config.blocks() {
            tensors.push(he(b.cout, b.cin, 3, rng));
            tensors.push(Tensor::zeros(&[b.cout]));
            tensors.push(he(b.cout, b.cout, 3, rng));
            tensors.push(Tensor::zeros(&[b.cout]));
        }
        tensors.push(he(config.num_labels, config.base_channels, 1, rng));
        tensors.push(Tensor::zeros(&[config.num_labels]));
        Ok(Self::from_tensors(config, tensors, 0))
    }

    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor<T>>, t: u64) -> Self {
        let m = tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        NetParams {
            config,
            tensors,
            m,
            v,
            t,
        }
    }

    /// Expected parameter shapes in registration order.
    pub fn shapes(config: &NetConfig) -> Vec<Vec<usize>> {
        let mut s = Vec::new();
        for b in config.blocks() {
            s.push(vec![b.cout, b.cin, 3, 3]);
            s.push(vec![b.cout]);
            s.push(vec![b.cout, b.cout, 3, 3]);
            s.push(vec![b.cout]);
        }
        s.push(vec![config.num_labels, config.base_channels, 1, 1]);
        s.push(vec![config.num_labels]);
        s
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Place every parameter on the tape in registration order.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
            t: self.t,
        }
    }
}

/// Record the U-Net on `tape`. `x` is `(batch, 1, h, w)` with `h, w` multiples of
/// [`NetConfig::size_multiple`]. Returns pre-softmax logits.
pub fn unet_logits<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    config: &NetConfig,
    vars: &[Var],
    x: Var,
    dropout: bool,
    rng: &mut R,
) -> Result<Var> {
    let blocks = config.blocks();
    let mut p = vars.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Config("too few parameters".into()));
    let mut skips = Vec::with_capacity(config.depth);
    let mut h = x;
    for (i, b) in blocks.iter().enumerate() {
        if b.decoder {
            let up = tape.upsample_bilinear2(h)?;
            let skip = skips[b.level];
            h = tape.concat_channels(up, skip)?;
        } else if b.level > 0 {
            h = tape.max_pool2(h)?;
        }
        let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
        h = tape.conv2d(h, w1, Some(b1))?;
        h = tape.relu(h)?;
        h = tape.conv2d(h, w2, Some(b2))?;
        h = tape.relu(h)?;
        if config.block_has_dropout(i) {
            h = tape.dropout(h, config.dropout_p, rng, dropout)?;
        }
        if !b.decoder {
            skips.push(h);
        }
    }
    let (wf, bf) = (next()?, next()?);
    tape.conv2d(h, wf, Some(bf))
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

pub(crate) fn padded_extent(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Reflection-pad an image on the bottom and right to `(ph, pw)`.
pub(crate) fn pad_image<T: Scalar>(img: &Image, ph: usize, pw: usize, out: &mut Vec<T>) {
    for y in 0..ph {
        let sy = reflect(y, img.height());
        for x in 0..pw {
            out.push(T::of(img.get(reflect(x, img.width()), sy) as f64));
        }
    }
}

/// Pad a label map with `UNKNOWN` so padded pixels never contribute to a loss.
pub(crate) fn pad_labels(labels: &LabelMap, ph: usize, pw: usize, out: &mut Vec<u8>) {
    for y in 0..ph {
        for x in 0..pw {
            out.push(if y < labels.height() && x < labels.width() {
                labels.get(x, y)
            } else {
                UNKNOWN
            });
        }
    }
}

/// A mini-batch of equally sized images laid out for the network.
pub(crate) struct Batch<T> {
    pub input: Tensor<T>,
    pub targets: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

pub(crate) fn make_batch<T: Scalar>(
    config: &NetConfig,
    images: &[&Image],
    targets: Option<&[&LabelMap]>,
) -> Result<Batch<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let m = config.size_multiple();
    let (ph, pw) = (padded_extent(h, m), padded_extent(w, m));
    let mut data = Vec::with_capacity(images.len() * ph * pw);
    let mut tg = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::Config(format!(
                "batch mixes image sizes {}x{} and {}x{}",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        pad_image(img, ph, pw, &mut data);
        if let Some(t) = targets {
            if !t[i].same_dims(w, h) {
                return Err(Error::Input("target dims differ from image".into()));
            }
            pad_labels(t[i], ph, pw, &mut tg);
        }
    }
    Ok(Batch {
        input: Tensor::new(&[images.len(), 1, ph, pw], data)?,
        targets: tg,
        height: h,
        width: w,
    })
}

/// Crop a `(1, c, ph, pw)` tensor back to `(1, c, h, w)`.
pub(crate) fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, ph, pw) = t.dims4()?;
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in 0..b * c {
        for y in 0..h {
            let row = plane * ph * pw + y * pw;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Network output for one image.
#[derive(Debug, Clone)]
pub struct NetOutput<T> {
    /// `(1, num_labels, h, w)` pre-softmax logits.
    pub logits: Tensor<T>,
    pub probs: ProbMap<T>,
}

/// Run the network on one image. With `dropout_enabled == false` the result is deterministic.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &NetParams<T>,
    image: &Image,
    dropout_enabled: bool,
    rng: &mut R,
) -> Result<NetOutput<T>> {
    let batch = make_batch::<T>(&params.config, &[image], None)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(batch.input);
    let logits = unet_logits(&mut tape, &params.config, &vars, x, dropout_enabled, rng)?;
    let logits = crop(tape.value(logits), batch.height, batch.width)?;
    Ok(output_from_logits(logits))
}

pub(crate) fn output_from_logits<T: Scalar>(logits: Tensor<T>) -> NetOutput<T> {
    let (_, c, h, w) = logits.dims4().expect("rank-4 logits");
    let mut probs = logits.data().to_vec();
    softmax_channels_inplace(&mut probs, 1, c, h * w);
    NetOutput {
        probs: ProbMap::new(w, h, c, probs).expect("matching dims"),
        logits,
    }
}

/// Deterministic argmax prediction.
pub fn predict<T: Scalar>(params: &NetParams<T>, image: &Image) -> Result<LabelMap> {
    let mut rng = crate::rng::stream(0, "predict");
    Ok(forward(params, image, false, &mut rng)?.probs.argmax())
}

/// Value of the masked cross-entropy for precomputed logits.
pub fn masked_cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &LabelMap) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.masked_cross_entropy(l, target.data())?;
    Ok(tape.value(loss).data()[0])
}
