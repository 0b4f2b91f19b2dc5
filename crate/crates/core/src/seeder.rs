//! Seed areas from scribbles: random-walker probabilities on the 4-connected pixel lattice,
//! then confidence thresholding.
//!
//! For each label the walker solves the combinatorial Dirichlet problem
//! `L_u x = -B^T m` on unseeded pixels, where `L` is the graph Laplacian with edge weights
//! `exp(-beta (I_i - I_j)^2)`. Systems are solved one label at a time by Jacobi-preconditioned
//! conjugate gradient; the last label takes `1 - sum(others)` so every pixel sums to one.

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, ProbMap, UNKNOWN};

/// Random-walker and thresholding settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedConfig {
    /// Probability a pixel's best label must exceed to become a seed.
    pub tau: f64,
    /// Edge-weight contrast.
    pub beta: f64,
    /// Stop when every unknown's Jacobi-scaled residual is below this.
    pub cg_tol: f64,
    /// Iteration cap; `None` means ten times the pixel count.
    pub cg_max_iters: Option<usize>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            tau: 0.99,
            beta: 90.0,
            cg_tol: 1e-8,
            cg_max_iters: None,
        }
    }
}

impl SeedConfig {
    /// Threshold profile for the second (prostate-like) dataset.
    pub fn prostate() -> Self {
        SeedConfig {
            tau: 0.90,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let lo = 1.0 / num_labels as f64;
        if !(self.tau > lo && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau {} outside ({lo}, 1] for {num_labels} labels",
                self.tau
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Config("cg_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse 4-connected lattice weights: `right[p]` links `p` to `p + 1`, `down[p]` to `p + w`.
struct Lattice {
    width: usize,
    height: usize,
    right: Vec<f64>,
    down: Vec<f64>,
    degree: Vec<f64>,
}

impl Lattice {
    fn new(image: &Image, beta: f64) -> Self {
        let (w, h) = (image.width(), image.height());
        let n = w * h;
        let mut right = vec![0.0; n];
        let mut down = vec![0.0; n];
        let mut degree = vec![0.0; n];
        let d = image.data();
        let weight = |a: f32, b: f32| (-beta * (a as f64 - b as f64).powi(2)).exp();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    let wt = weight(d[p], d[p + 1]);
                    right[p] = wt;
                    degree[p] += wt;
                    degree[p + 1] += wt;
                }
                if y + 1 < h {
                    let wt = weight(d[p], d[p + w]);
                    down[p] = wt;
                    degree[p] += wt;
                    degree[p + w] += wt;
                }
            }
        }
        Lattice {
            width: w,
            height: h,
            right,
            down,
            degree,
        }
    }

    /// Calls `f(q, weight)` for each neighbor `q` of `p`.
    #[inline]
    fn for_neighbors(&self, p: usize, mut f: impl FnMut(usize, f64)) {
        let (x, y, w) = (p % self.width, p / self.width, self.width);
        if x + 1 < w {
            f(p + 1, self.right[p]);
        }
        if x > 0 {
            f(p - 1, self.right[p - 1]);
        }
        if y + 1 < self.height {
            f(p + w, self.down[p]);
        }
        if y > 0 {
            f(p - w, self.down[p - w]);
        }
    }
}

/// Random-walker probabilities for `num_labels` classes.
///
/// Every label in `0..num_labels` must be scribbled at least once. Scribbled pixels get
/// probability exactly one for their label.
pub fn random_walker(
    image: &Image,
    scribbles: &LabelMap,
    num_labels: usize,
    cfg: &SeedConfig,
) -> Result<ProbMap<f64>> {
    if !scribbles.same_dims(image.width(), image.height()) {
        return Err(Error::Input("scribble dims differ from image".into()));
    }
    if num_labels < 2 {
        return Err(Error::Input("random walker needs at least two labels".into()));
    }
    let mut present = vec![false; num_labels];
    for &l in scribbles.data() {
        if l != UNKNOWN {
            if l as usize >= num_labels {
                return Err(Error::Input(format!(
                    "scribble label {l} outside 0..{num_labels}"
                )));
            }
            present[l as usize] = true;
        }
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::Input(format!("label {missing} has no scribbles")));
    }

    let lattice = Lattice::new(image, cfg.beta);
    let n = image.len();
    let seeds = scribbles.data();
    let unknown: Vec<usize> = (0..n).filter(|&p| seeds[p] == UNKNOWN).collect();
    let mut index = vec![usize::MAX; n];
    for (k, &p) in unknown.iter().enumerate() {
        index[p] = k;
    }
    let max_iters = cfg.cg_max_iters.unwrap_or(10 * n);

    let mut probs = ProbMap::<f64>::zeros(image.width(), image.height(), num_labels);
    let mut rest = vec![0.0f64; n];
    for label in 0..num_labels - 1 {
        // rhs_i = sum of weights from unknown i to seeds of `label`
        let mut rhs = vec![0.0; unknown.len()];
        for (k, &p) in unknown.iter().enumerate() {
            lattice.for_neighbors(p, |q, wt| {
                if seeds[q] == label as u8 {
                    rhs[k] += wt;
                }
            });
        }
        let x = solve_cg(&lattice, &unknown, &index, &rhs, cfg.cg_tol, max_iters)
            .map_err(|e| e.context(format!("random walker label {label}")))?;
        let plane = probs.plane_mut(label);
        for p in 0..n {
            plane[p] = match seeds[p] {
                UNKNOWN => x[index[p]],
                s if s as usize == label => 1.0,
                _ => 0.0,
            };
            rest[p] += plane[p];
        }
    }
    let last = num_labels - 1;
    let plane = probs.plane_mut(last);
    for p in 0..n {
        plane[p] = match seeds[p] {
            UNKNOWN => 1.0 - rest[p],
            s if s as usize == last => 1.0,
            _ => 0.0,
        };
    }
    Ok(probs)
}

/// Jacobi-preconditioned CG on the Laplacian restricted to `unknown`.
fn solve_cg(
    lattice: &Lattice,
    unknown: &[usize],
    index: &[usize],
    rhs: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let m = unknown.len();
    let mut x = vec![0.0; m];
    if m == 0 {
        return Ok(x);
    }
    let diag: Vec<f64> = unknown.iter().map(|&p| lattice.degree[p]).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        for (k, &p) in unknown.iter().enumerate() {
            let mut s = diag[k] * v[k];
            lattice.for_neighbors(p, |q, wt| {
                let j = index[q];
                if j != usize::MAX {
                    s -= wt * v[j];
                }
            });
            out[k] = s;
        }
    };
    let scaled_residual = |r: &[f64]| {
        r.iter()
            .zip(&diag)
            .map(|(ri, di)| (ri / di).abs())
            .fold(0.0, f64::max)
    };
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; m];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut res = scaled_residual(&r);
    for _ in 0..max_iters {
        if res <= tol {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for k in 0..m {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
            z[k] = r[k] / diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
        res = scaled_residual(&r);
    }
    if res <= tol {
        return Ok(x);
    }
    Err(Error::Solver {
        iters: max_iters,
        residual: res,
    })
}

/// Seeds from walker probabilities: the argmax label where its probability exceeds `tau`,
/// `UNKNOWN` elsewhere. Scribbled pixels always keep their scribble label.
pub fn threshold_seeds(probs: &ProbMap<f64>, scribbles: &LabelMap, tau: f64) -> LabelMap {
    let mut out = probs.argmax();
    let n = probs.num_pixels();
    for p in 0..n {
        let best = out.data()[p] as usize;
        if probs.get(best, p) <= tau {
            out.data_mut()[p] = UNKNOWN;
        }
    }
    out.overwrite_with(scribbles);
    out
}

/// `|P_i - sum_j w_ij P_j / sum_j w_ij|` maximized over unseeded pixels and labels.
pub fn harmonicity_residual(
    image: &Image,
    scribbles: &LabelMap,
    probs: &ProbMap<f64>,
    beta: f64,
) -> f64 {
    let lattice = Lattice::new(image, beta);
    let mut worst = 0.0f64;
    for l in 0..probs.num_labels() {
        let plane = probs.plane(l);
        for p in 0..image.len() {
            if scribbles.data()[p] != UNKNOWN {
                continue;
            }
            let mut acc = 0.0;
            lattice.for_neighbors(p, |q, wt| acc += wt * plane[q]);
            worst = worst.max((plane[p] - acc / lattice.degree[p]).abs());
        }
    }
    worst
}

/// Random walker followed by thresholding.
pub fn generate_seeds(
    image: &Image,
    scribbles: &LabelMap,
    num_labels: usize,
    cfg: &SeedConfig,
) -> Result<LabelMap> {
    cfg.validate(num_labels)?;
    let probs = random_walker(image, scribbles, num_labels, cfg)?;
    Ok(threshold_seeds(&probs, scribbles, cfg.tau))
}
