//! MC-dropout uncertainty gating: stochastic forward passes, a per-pixel Welch test between
//! the logit samples of the two most probable labels, and reset of uncertain pixels.

use std::path::Path;

use crate::dataio::formats::{f32_blob, header_line, push_f32s, read_bytes, write_bytes};
use crate::error::{Error, Result, ResultExt};
use crate::grid::{Image, LabelMap, UNKNOWN};
use crate::scalar::Scalar;
use crate::segnet::{self, NetParams};

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyConfig {
    pub n_passes: usize,
    pub p_threshold: f64,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            n_passes: 50,
            p_threshold: 0.05,
            seed: 0,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_passes < 2 {
            return Err(Error::Config(format!("n_passes {} < 2", self.n_passes)));
        }
        if !(self.p_threshold > 0.0 && self.p_threshold < 1.0) {
            return Err(Error::Config(format!("p_threshold {} outside (0, 1)", self.p_threshold)));
        }
        Ok(())
    }
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn mean_var(s: &[f64]) -> (f64, f64) {
    // constant samples must give exactly zero variance despite rounding in the mean
    if s.iter().all(|&v| v == s[0]) {
        return (s[0], 0.0);
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-tailed Welch t-test p-value. Both variances zero gives 1 for equal means, else 0.
pub fn welch_p(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(format!(
            "Welch test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    Ok(welch_from_moments(ma, va, a.len(), mb, vb, b.len()))
}

fn welch_from_moments(ma: f64, va: f64, na: usize, mb: f64, vb: f64, nb: usize) -> f64 {
    let (sa, sb) = (va / na as f64, vb / nb as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na as f64 - 1.0) + sb * sb / (nb as f64 - 1.0));
    inc_beta(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Logits of every MC pass plus the mean softmax over passes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSamples {
    pub n_passes: usize,
    pub num_labels: usize,
    pub width: usize,
    pub height: usize,
    /// Pass-major `[pass][label][pixel]`.
    pub logits: Vec<f32>,
    /// `[label][pixel]`.
    pub mean_softmax: Vec<f64>,
}

impl LogitSamples {
    pub fn from_logits(n_passes: usize, num_labels: usize, width: usize, height: usize, logits: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if n_passes < 2 || logits.len() != n_passes * num_labels * n {
            return Err(Error::Input(format!(
                "{} logits for {n_passes} passes x {num_labels} labels x {n} pixels",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("mc_relabel", "non-finite MC logit"));
        }
        let mut mean_softmax = vec![0.0f64; num_labels * n];
        let mut z = vec![0.0f64; num_labels];
        for pass in logits.chunks_exact(num_labels * n) {
            for p in 0..n {
                let mut mx = f64::NEG_INFINITY;
                for (l, zl) in z.iter_mut().enumerate() {
                    *zl = pass[l * n + p] as f64;
                    mx = mx.max(*zl);
                }
                let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                for (l, zl) in z.iter().enumerate() {
                    mean_softmax[l * n + p] += (zl - mx).exp() / sum;
                }
            }
        }
        for v in &mut mean_softmax {
            *v /= n_passes as f64;
        }
        Ok(LogitSamples {
            n_passes,
            num_labels,
            width,
            height,
            logits,
            mean_softmax,
        })
    }

    /// Runs `cfg.n_passes` dropout forwards, pass `k` drawing from stream `{key}/pass{k}`.
    pub fn collect<T: Scalar>(net: &NetParams<T>, image: &Image, cfg: &UncertaintyConfig, key: &str) -> Result<Self> {
        let (w, h, l) = (image.width(), image.height(), net.config.num_labels);
        let mut logits = Vec::with_capacity(cfg.n_passes * l * w * h);
        for k in 0..cfg.n_passes {
            let mut rng = crate::rng::stream(cfg.seed, &format!("{key}/pass{k}"));
            let out = segnet::forward(net, image, true, &mut rng).context_with(|| format!("MC pass {k}"))?;
            logits.extend(out.logits.data().iter().map(|v| v.as_f64() as f32));
        }
        Self::from_logits(cfg.n_passes, l, w, h, logits)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn samples(&self, label: usize, pixel: usize) -> impl Iterator<Item = f64> + '_ {
        let stride = self.num_labels * self.num_pixels();
        let off = label * self.num_pixels() + pixel;
        (0..self.n_passes).map(move |k| self.logits[k * stride + off] as f64)
    }

    /// Labels with the highest and second highest mean softmax (lower index on ties).
    pub fn top_two(&self, pixel: usize) -> (usize, usize) {
        let n = self.num_pixels();
        let (mut best, mut second) = (0, usize::MAX);
        for l in 1..self.num_labels {
            let v = self.mean_softmax[l * n + pixel];
            if v > self.mean_softmax[best * n + pixel] {
                second = best;
                best = l;
            } else if second == usize::MAX || v > self.mean_softmax[second * n + pixel] {
                second = l;
            }
        }
        (best, second)
    }

    /// Welch p-value between the logit samples of the top two labels at every pixel.
    pub fn p_values(&self) -> Vec<f64> {
        let mut a = Vec::with_capacity(self.n_passes);
        let mut b = Vec::with_capacity(self.n_passes);
        (0..self.num_pixels())
            .map(|p| {
                let (l1, l2) = self.top_two(p);
                a.clear();
                b.clear();
                a.extend(self.samples(l1, p));
                b.extend(self.samples(l2, p));
                let (ma, va) = mean_var(&a);
                let (mb, vb) = mean_var(&b);
                welch_from_moments(ma, va, a.len(), mb, vb, b.len())
            })
            .collect()
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "SSEG-MCDUMP v1 {} {} {} {}\n",
            self.n_passes, self.num_labels, self.width, self.height
        )
        .into_bytes();
        push_f32s(&mut out, self.logits.iter().copied());
        write_bytes(path, &out)
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let (line, start) = header_line(&bytes, 0, path)?;
        let tok: Vec<&str> = line.split_ascii_whitespace().collect();
        if tok.len() != 6 || tok[0] != "SSEG-MCDUMP" || tok[1] != "v1" {
            return Err(Error::format(path, 0, "not an SSEG-MCDUMP v1 file"));
        }
        let mut dims = [0usize; 4];
        for (d, t) in dims.iter_mut().zip(&tok[2..]) {
            *d = t
                .parse()
                .map_err(|_| Error::format(path, 0, format!("bad dimension {t:?}")))?;
        }
        let [passes, labels, w, h] = dims;
        let count = passes * labels * w * h;
        let logits = f32_blob(&bytes, start, count, path)?;
        if bytes.len() != start + 4 * count {
            return Err(Error::format(path, (start + 4 * count) as u64, "trailing bytes after samples"));
        }
        Self::from_logits(passes, labels, w, h, logits)
    }
}

/// Top label where the test rejects equal means (`p < p_threshold`), `UNKNOWN` elsewhere.
/// Seeds always keep their label.
pub fn gate(samples: &LogitSamples, seeds: &LabelMap, p_threshold: f64) -> Result<LabelMap> {
    if !seeds.same_dims(samples.width, samples.height) {
        return Err(Error::Input("seed map and MC samples differ in size".into()));
    }
    let p = samples.p_values();
    let data = (0..samples.num_pixels())
        .map(|i| match seeds.data()[i] {
            UNKNOWN if p[i] < p_threshold => samples.top_two(i).0 as u8,
            UNKNOWN => UNKNOWN,
            s => s,
        })
        .collect();
    LabelMap::new(samples.width, samples.height, data)
}

/// Keeps `base` where `gated` is certain and resets the rest to `UNKNOWN`; seeds win.
pub fn apply_gate(base: &LabelMap, gated: &LabelMap, seeds: &LabelMap) -> Result<LabelMap> {
    if !base.same_dims(gated.width(), gated.height()) || !base.same_dims(seeds.width(), seeds.height()) {
        return Err(Error::Input("label maps differ in size".into()));
    }
    let data = base
        .data()
        .iter()
        .zip(gated.data())
        .zip(seeds.data())
        .map(|((&b, &g), &s)| match (s, g) {
            (UNKNOWN, UNKNOWN) => UNKNOWN,
            (UNKNOWN, _) => b,
            _ => s,
        })
        .collect();
    LabelMap::new(base.width(), base.height(), data)
}

/// MC-dropout relabeling of one image. With `base`, certain pixels keep the base label
/// instead of the top mean-softmax label.
pub fn mc_relabel<T: Scalar>(
    net: &NetParams<T>,
    image: &Image,
    base: Option<&LabelMap>,
    seeds: &LabelMap,
    cfg: &UncertaintyConfig,
    key: &str,
) -> Result<LabelMap> {
    cfg.validate()?;
    if net.config.dropout_blocks == 0 {
        return Err(Error::Config("MC relabeling needs dropout blocks in the net".into()));
    }
    let samples = LogitSamples::collect(net, image, cfg, key)?;
    let gated = gate(&samples, seeds, cfg.p_threshold)?;
    match base {
        Some(b) => apply_gate(b, &gated, seeds),
        None => Ok(gated),
    }
}

/// [`mc_relabel`] over a dataset; image `i` uses streams under `mc/{i}`.
pub fn mc_relabel_dataset<T: Scalar>(
    net: &NetParams<T>,
    images: &[Image],
    bases: Option<&[LabelMap]>,
    seeds: &[LabelMap],
    cfg: &UncertaintyConfig,
) -> Result<Vec<LabelMap>> {
    if seeds.len() != images.len() || bases.is_some_and(|b| b.len() != images.len()) {
        return Err(Error::Input("images, seeds and base labels differ in count".into()));
    }
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            mc_relabel(net, img, bases.map(|b| &b[i]), &seeds[i], cfg, &format!("mc/{i}"))
                .context_with(|| format!("image {i}"))
        })
        .collect()
}
