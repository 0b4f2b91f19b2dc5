//! Fully-connected CRF relabeling with network unaries, clamped seeds and a two-kernel Potts
//! pairwise term, solved by parallel mean-field updates.

pub mod kernel;

#[cfg(test)]
mod tests;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMap, UNKNOWN};
use crate::metrics::mean_foreground_dice;
use crate::scalar::Scalar;
use crate::segnet::{self, NetParams};

pub use kernel::GaussianKernel;

/// Probabilities are floored here before taking `-ln`.
pub const PROB_FLOOR: f64 = 1e-10;

/// Window used for pairwise sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// `ceil(4 * max(sigma_alpha, sigma_gamma))` pixels.
    Auto,
    Radius(usize),
    Unbounded,
}

impl Truncation {
    /// `auto`, `unbounded` or a radius in pixels.
    pub fn parse(s: &str) -> Option<Truncation> {
        match s {
            "auto" => Some(Truncation::Auto),
            "unbounded" => Some(Truncation::Unbounded),
            _ => s.parse().ok().map(Truncation::Radius),
        }
    }
}

impl std::fmt::Display for Truncation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Truncation::Auto => f.write_str("auto"),
            Truncation::Unbounded => f.write_str("unbounded"),
            Truncation::Radius(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub w1: f64,
    pub w2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub n_mf_iters: usize,
    pub truncation: Truncation,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self::cardiac()
    }
}

impl CrfParams {
    /// Hyperparameters selected on the cardiac validation set.
    pub fn cardiac() -> Self {
        CrfParams {
            w1: 5.0,
            w2: 10.0,
            sigma_alpha: 2.0,
            sigma_beta: 0.1,
            sigma_gamma: 5.0,
            n_mf_iters: 5,
            truncation: Truncation::Auto,
        }
    }

    /// Hyperparameters selected on the prostate validation set.
    pub fn prostate() -> Self {
        CrfParams {
            w1: 6.0,
            w2: 10.0,
            sigma_alpha: 3.0,
            sigma_beta: 0.01,
            sigma_gamma: 2.0,
            ..Self::cardiac()
        }
    }

    /// Pairwise terms switched off.
    pub fn unary_only() -> Self {
        CrfParams {
            w1: 0.0,
            w2: 0.0,
            ..Self::cardiac()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.w1, self.w2, self.sigma_alpha, self.sigma_beta, self.sigma_gamma];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("CRF parameters must be finite".into()));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config("CRF kernel weights must be >= 0".into()));
        }
        if self.sigma_alpha <= 0.0 || self.sigma_beta <= 0.0 || self.sigma_gamma <= 0.0 {
            return Err(Error::Config("CRF bandwidths must be > 0".into()));
        }
        if self.n_mf_iters == 0 {
            return Err(Error::Config("n_mf_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Chebyshev window radius on a `width x height` image.
    pub fn radius(&self, width: usize, height: usize) -> usize {
        let cap = width.max(height).saturating_sub(1);
        match self.truncation {
            Truncation::Auto => ((4.0 * self.sigma_alpha.max(self.sigma_gamma)).ceil() as usize).min(cap),
            Truncation::Radius(r) => r.min(cap),
            Truncation::Unbounded => cap,
        }
    }
}

/// Potts pairwise energy between two pixels.
pub fn pairwise_potential(
    l_i: u8,
    l_j: u8,
    pos_i: (f64, f64),
    pos_j: (f64, f64),
    i_i: f64,
    i_j: f64,
    params: &CrfParams,
) -> f64 {
    if l_i == l_j {
        return 0.0;
    }
    let d2 = (pos_i.0 - pos_j.0).powi(2) + (pos_i.1 - pos_j.1).powi(2);
    let di2 = (i_i - i_j).powi(2);
    let appearance = (-d2 / (2.0 * params.sigma_alpha.powi(2)) - di2 / (2.0 * params.sigma_beta.powi(2))).exp();
    let smoothness = (-d2 / (2.0 * params.sigma_gamma.powi(2))).exp();
    params.w1 * appearance + params.w2 * smoothness
}

/// `-ln max(p, PROB_FLOOR)` per label and pixel.
pub fn unaries_from_probs<T: Scalar>(probs: &ProbMap<T>) -> ProbMap<f64> {
    let data = probs
        .data()
        .iter()
        .map(|p| -(p.as_f64().max(PROB_FLOOR)).ln())
        .collect();
    ProbMap::new(probs.width(), probs.height(), probs.num_labels(), data)
        .expect("same shape as input")
}

#[derive(Debug, Clone)]
pub struct CrfProblem {
    pub unaries: ProbMap<f64>,
    pub seeds: LabelMap,
    pub image: Image,
}

impl CrfProblem {
    pub fn new(unaries: ProbMap<f64>, seeds: LabelMap, image: Image) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        if unaries.width() != w || unaries.height() != h || !seeds.same_dims(w, h) {
            return Err(Error::Input("CRF unaries, seeds and image dims differ".into()));
        }
        if unaries.data().iter().any(|u| !u.is_finite()) {
            return Err(Error::numeric("crf_unaries", "non-finite unary"));
        }
        if let Some(l) = seeds.max_label() {
            if l as usize >= unaries.num_labels() {
                return Err(Error::Input(format!(
                    "seed label {l} outside 0..{}",
                    unaries.num_labels()
                )));
            }
        }
        Ok(CrfProblem { unaries, seeds, image })
    }

    pub fn num_labels(&self) -> usize {
        self.unaries.num_labels()
    }
}

/// The two weighted kernels for one image; zero-weight kernels are skipped.
pub struct PairwiseKernels {
    terms: Vec<(f64, GaussianKernel)>,
}

impl PairwiseKernels {
    pub fn new(image: &Image, params: &CrfParams) -> Self {
        let r = params.radius(image.width(), image.height());
        let mut terms = Vec::new();
        if params.w1 > 0.0 {
            terms.push((
                params.w1,
                GaussianKernel::bilateral(image, params.sigma_alpha, params.sigma_beta, r),
            ));
        }
        if params.w2 > 0.0 {
            terms.push((
                params.w2,
                GaussianKernel::spatial(image.width(), image.height(), params.sigma_gamma, r),
            ));
        }
        PairwiseKernels { terms }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Potts messages `m_i(l) = sum_j k_ij (1 - Q_j(l))` for label-major marginals.
    pub fn potts_messages(&self, q: &[f64], num_labels: usize) -> Vec<f64> {
        let n = q.len() / num_labels;
        let mut out = vec![0.0; q.len()];
        if self.terms.is_empty() {
            return out;
        }
        let mut stacked = vec![1.0; n];
        stacked.extend_from_slice(q);
        for (w, k) in &self.terms {
            let f = k.apply(&stacked, num_labels + 1);
            let (ones, rest) = f.split_at(n);
            for l in 0..num_labels {
                for i in 0..n {
                    out[l * n + i] += w * (ones[i] - rest[l * n + i]);
                }
            }
        }
        out
    }
}

fn clamp_seeds(q: &mut [f64], seeds: &LabelMap, num_labels: usize) {
    let n = seeds.len();
    for (i, &s) in seeds.data().iter().enumerate() {
        if s != UNKNOWN {
            for l in 0..num_labels {
                q[l * n + i] = if l == s as usize { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Normalizes `exp(-energy)` over labels in place.
fn softmin_labels(e: &mut [f64], num_labels: usize) {
    let n = e.len() / num_labels;
    for i in 0..n {
        let mut lo = f64::INFINITY;
        for l in 0..num_labels {
            lo = lo.min(e[l * n + i]);
        }
        let mut sum = 0.0;
        for l in 0..num_labels {
            let v = (lo - e[l * n + i]).exp();
            e[l * n + i] = v;
            sum += v;
        }
        for l in 0..num_labels {
            e[l * n + i] /= sum;
        }
    }
}

/// Result of mean-field inference.
#[derive(Debug, Clone)]
pub struct MeanField {
    pub marginals: ProbMap<f64>,
    pub labels: LabelMap,
    /// Largest absolute marginal change in the final iteration.
    pub last_change: f64,
}

/// One parallel update from marginals `q`, seeds re-clamped afterwards.
pub fn mean_field_step(problem: &CrfProblem, kernels: &PairwiseKernels, q: &[f64]) -> Result<Vec<f64>> {
    let ln = problem.num_labels();
    let msg = kernels.potts_messages(q, ln);
    let mut next: Vec<f64> = problem
        .unaries
        .data()
        .iter()
        .zip(&msg)
        .map(|(u, m)| u + m)
        .collect();
    softmin_labels(&mut next, ln);
    clamp_seeds(&mut next, &problem.seeds, ln);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("mean_field", "non-finite marginal"));
    }
    Ok(next)
}

/// Mean-field inference with precomputed kernels.
pub fn mean_field_with(problem: &CrfProblem, kernels: &PairwiseKernels, n_iters: usize) -> Result<MeanField> {
    let ln = problem.num_labels();
    let mut q = problem.unaries.data().to_vec();
    softmin_labels(&mut q, ln);
    clamp_seeds(&mut q, &problem.seeds, ln);
    let mut last_change = 0.0;
    for it in 0..n_iters {
        let next = mean_field_step(problem, kernels, &q)
            .map_err(|e| e.context(format!("mean-field iteration {it}")))?;
        last_change = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
    }
    let (w, h) = (problem.image.width(), problem.image.height());
    let marginals = ProbMap::new(w, h, ln, q)?;
    let mut labels = marginals.argmax();
    labels.overwrite_with(&problem.seeds);
    Ok(MeanField {
        marginals,
        labels,
        last_change,
    })
}

/// Approximate MAP labeling: marginals and their argmax (seeds enforced).
pub fn mean_field_infer(problem: &CrfProblem, params: &CrfParams) -> Result<(ProbMap<f64>, LabelMap)> {
    params.validate()?;
    let kernels = PairwiseKernels::new(&problem.image, params);
    let mf = mean_field_with(problem, &kernels, params.n_mf_iters)?;
    Ok((mf.marginals, mf.labels))
}

/// CRF objective of a complete labeling that respects the seeds.
///
/// Pairs are counted once, within the truncation window.
pub fn energy(problem: &CrfProblem, labeling: &LabelMap, params: &CrfParams) -> Result<f64> {
    let (w, h) = (problem.image.width(), problem.image.height());
    if !labeling.same_dims(w, h) {
        return Err(Error::Input("labeling dims differ from problem".into()));
    }
    let ln = problem.num_labels();
    let seeds = problem.seeds.data();
    let z = labeling.data();
    for p in 0..z.len() {
        if z[p] == UNKNOWN || z[p] as usize >= ln {
            return Err(Error::Input(format!("labeling incomplete at pixel {p}")));
        }
        if seeds[p] != UNKNOWN && seeds[p] != z[p] {
            return Err(Error::Input(format!(
                "clamp violation: pixel {p} is seeded {} but labeled {}",
                seeds[p], z[p]
            )));
        }
    }
    let mut total = 0.0;
    for p in 0..z.len() {
        if seeds[p] == UNKNOWN {
            total += problem.unaries.get(z[p] as usize, p);
        }
    }
    if params.w1 == 0.0 && params.w2 == 0.0 {
        return Ok(total);
    }
    let r = params.radius(w, h);
    let img = problem.image.data();
    for p in 0..z.len() {
        let (px, py) = (p % w, p / w);
        for q in p + 1..z.len() {
            let (qx, qy) = (q % w, q / w);
            if px.abs_diff(qx) > r || py.abs_diff(qy) > r {
                continue;
            }
            total += pairwise_potential(
                z[p],
                z[q],
                (px as f64, py as f64),
                (qx as f64, qy as f64),
                img[p] as f64,
                img[q] as f64,
                params,
            );
        }
    }
    Ok(total)
}

/// Network probabilities (dropout off) for every image.
pub fn network_probs<T: Scalar>(net: &NetParams<T>, images: &[Image]) -> Result<Vec<ProbMap<T>>> {
    let mut rng = crate::rng::stream(0, "deterministic");
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            segnet::forward(net, img, false, &mut rng)
                .map(|o| o.probs)
                .map_err(|e| e.context(format!("image {i}")))
        })
        .collect()
}

/// CRF relabeling of one image from precomputed network probabilities.
pub fn relabel_from_probs<T: Scalar>(
    probs: &ProbMap<T>,
    image: &Image,
    seeds: &LabelMap,
    params: &CrfParams,
) -> Result<LabelMap> {
    let problem = CrfProblem::new(unaries_from_probs(probs), seeds.clone(), image.clone())?;
    Ok(mean_field_infer(&problem, params)?.1)
}

/// E-step: relabel every image with the CRF using the current network as unaries.
pub fn relabel_dataset<T: Scalar>(
    net: &NetParams<T>,
    images: &[Image],
    seeds: &[LabelMap],
    params: &CrfParams,
) -> Result<Vec<LabelMap>> {
    if images.len() != seeds.len() {
        return Err(Error::Input(format!(
            "{} images but {} seed maps",
            images.len(),
            seeds.len()
        )));
    }
    params.validate()?;
    let probs = network_probs(net, images)?;
    probs
        .iter()
        .zip(images.iter().zip(seeds))
        .enumerate()
        .map(|(i, (p, (img, s)))| {
            relabel_from_probs(p, img, s, params).map_err(|e| e.context(format!("image {i}")))
        })
        .collect()
}

/// Outcome of a hyperparameter search.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: CrfParams,
    /// Mean foreground Dice per grid point, in grid order.
    pub scores: Vec<f64>,
}

/// Picks the grid point whose relabeling best matches the validation masks
/// (mean foreground Dice, first point wins ties).
pub fn grid_search<T: Scalar>(
    grid: &[CrfParams],
    images: &[Image],
    seeds: &[LabelMap],
    masks: &[LabelMap],
    net: &NetParams<T>,
) -> Result<GridSearchResult> {
    let probs = network_probs(net, images)?;
    grid_search_probs(grid, &probs, images, seeds, masks, net.config.num_labels)
}

/// `grid_search` with the network probabilities already computed.
pub fn grid_search_probs<T: Scalar>(
    grid: &[CrfParams],
    probs: &[ProbMap<T>],
    images: &[Image],
    seeds: &[LabelMap],
    masks: &[LabelMap],
    num_labels: usize,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("CRF grid is empty".into()));
    }
    if probs.len() != images.len() || seeds.len() != images.len() || masks.len() != images.len() {
        return Err(Error::Input("validation images, seeds and masks differ in count".into()));
    }
    for p in grid {
        p.validate()?;
    }
    let mut scores = Vec::with_capacity(grid.len());
    for (g, params) in grid.iter().enumerate() {
        let mut total = 0.0;
        for (i, p) in probs.iter().enumerate() {
            let z = relabel_from_probs(p, &images[i], &seeds[i], params)
                .map_err(|e| e.context(format!("grid point {g}, image {i}")))?;
            total += mean_foreground_dice(&z, &masks[i], num_labels)?;
        }
        let score = if images.is_empty() { 0.0 } else { total / images.len() as f64 };
        log::debug!("crf grid point {g}: {params:?} -> {score:.4}");
        scores.push(score);
    }
    let mut best = 0;
    for (g, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = g;
        }
    }
    Ok(GridSearchResult {
        best: grid[best].clone(),
        scores,
    })
}

/// Cartesian product of value lists, in `w1, w2, sigma_alpha, sigma_beta, sigma_gamma` nesting order.
pub fn product_grid(
    w1: &[f64],
    w2: &[f64],
    sigma_alpha: &[f64],
    sigma_beta: &[f64],
    sigma_gamma: &[f64],
    base: &CrfParams,
) -> Vec<CrfParams> {
    let mut out = Vec::new();
    for &a in w1 {
        for &b in w2 {
            for &sa in sigma_alpha {
                for &sb in sigma_beta {
                    for &sg in sigma_gamma {
                        out.push(CrfParams {
                            w1: a,
                            w2: b,
                            sigma_alpha: sa,
                            sigma_beta: sb,
                            sigma_gamma: sg,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    out
}
