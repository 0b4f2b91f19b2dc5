//! Gaussian pairwise kernels over a truncated square window, diagonal excluded.
//!
//! `apply` computes `out_i = sum_{j != i, |x_i - x_j| <= r, |y_i - y_j| <= r} k(i, j) in_j`.
//! The spatial kernel is separable and runs as two matrix products. The bilateral kernel
//! either expands the intensity factor as a power series (each term is spatially separable)
//! or falls back to a per-pixel weight table.

use crate::grid::Image;
use crate::scalar::Scalar;

/// Relative size below which a truncated term is dropped.
const SERIES_TOL: f64 = 1e-12;
const MAX_SERIES_TERMS: usize = 24;

#[derive(Debug, Clone)]
enum Backend {
    Separable,
    Series {
        /// Centered intensities.
        u: Vec<f64>,
        /// `exp(-c u^2)`.
        envelope: Vec<f64>,
        /// `(2c)^k / k!`.
        coeffs: Vec<f64>,
    },
    Table {
        radius: usize,
        /// `(2 radius + 1)^2` entries per pixel, zero outside the image.
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct GaussianKernel {
    width: usize,
    height: usize,
    radius: usize,
    sigma_xy: f64,
    /// Intensity bandwidth and image intensities for the bilateral kernel.
    range: Option<(f64, Vec<f64>)>,
    taps_h: Vec<f64>,
    taps_v: Vec<f64>,
    backend: Backend,
}

/// Toeplitz matrix `G[a][b] = exp(-(a-b)^2 / (2 sigma^2))` for `|a - b| <= r`.
fn toeplitz(n: usize, sigma: f64, r: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        for b in a.saturating_sub(r)..n.min(a + r + 1) {
            let d = a as f64 - b as f64;
            g[a * n + b] = (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }
    g
}

impl GaussianKernel {
    /// `exp(-d^2 / (2 sigma^2))` on a `width x height` lattice.
    pub fn spatial(width: usize, height: usize, sigma: f64, radius: usize) -> Self {
        let radius = radius.min(width.max(height).saturating_sub(1));
        GaussianKernel {
            width,
            height,
            radius,
            sigma_xy: sigma,
            range: None,
            taps_h: toeplitz(width, sigma, radius),
            taps_v: toeplitz(height, sigma, radius),
            backend: Backend::Separable,
        }
    }

    /// `exp(-d^2 / (2 sigma_xy^2) - (I_i - I_j)^2 / (2 sigma_i^2))`.
    pub fn bilateral(image: &Image, sigma_xy: f64, sigma_i: f64, radius: usize) -> Self {
        let mut k = Self::spatial(image.width(), image.height(), sigma_xy, radius);
        let intensity: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
        let c = 1.0 / (2.0 * sigma_i * sigma_i);
        let (lo, hi) = intensity
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mid = if intensity.is_empty() { 0.0 } else { 0.5 * (lo + hi) };
        let half = if intensity.is_empty() { 0.0 } else { 0.5 * (hi - lo) };
        let x = 2.0 * c * half * half;
        k.backend = match series_terms(x) {
            Some(terms) => {
                let u: Vec<f64> = intensity.iter().map(|v| v - mid).collect();
                let envelope = u.iter().map(|v| (-c * v * v).exp()).collect();
                let mut coeffs = Vec::with_capacity(terms);
                let mut a = 1.0;
                for n in 0..terms {
                    coeffs.push(a);
                    a *= 2.0 * c / (n + 1) as f64;
                }
                Backend::Series { u, envelope, coeffs }
            }
            None => {
                // beyond this offset the spatial factor alone is below SERIES_TOL
                let reach = (sigma_xy * (2.0 * (1.0 / SERIES_TOL).ln()).sqrt()).ceil() as usize;
                let r = k.radius.min(reach);
                Backend::Table {
                    radius: r,
                    weights: bilateral_table(image, &intensity, sigma_xy, c, r),
                }
            }
        };
        k.range = Some((sigma_i, intensity));
        k
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn uses_series(&self) -> bool {
        matches!(self.backend, Backend::Series { .. })
    }

    /// Exact kernel value between pixels `p` and `q` (zero on the diagonal and outside the window).
    pub fn weight(&self, p: usize, q: usize) -> f64 {
        if p == q {
            return 0.0;
        }
        let (px, py) = (p % self.width, p / self.width);
        let (qx, qy) = (q % self.width, q / self.width);
        let (dx, dy) = (px.abs_diff(qx), py.abs_diff(qy));
        if dx > self.radius || dy > self.radius {
            return 0.0;
        }
        let d2 = (dx * dx + dy * dy) as f64;
        let mut e = -d2 / (2.0 * self.sigma_xy * self.sigma_xy);
        if let Some((s, ref i)) = self.range {
            let di = i[p] - i[q];
            e -= di * di / (2.0 * s * s);
        }
        e.exp()
    }

    /// Applies the kernel to `planes` stacked planes of `width * height` values each.
    pub fn apply(&self, input: &[f64], planes: usize) -> Vec<f64> {
        let n = self.len();
        assert_eq!(input.len(), planes * n, "kernel input size");
        match &self.backend {
            Backend::Separable => {
                let mut out = self.separable(input, planes);
                for (o, i) in out.iter_mut().zip(input) {
                    *o -= i;
                }
                out
            }
            Backend::Series { u, envelope, coeffs } => {
                let terms = coeffs.len();
                // stack every (plane, term) pair so the filter runs once
                let mut stacked = vec![0.0; planes * terms * n];
                for p in 0..planes {
                    let src = &input[p * n..(p + 1) * n];
                    for t in 0..terms {
                        let dst = &mut stacked[(p * terms + t) * n..(p * terms + t + 1) * n];
                        for i in 0..n {
                            dst[i] = envelope[i] * u[i].powi(t as i32) * src[i];
                        }
                    }
                }
                let filtered = self.separable(&stacked, planes * terms);
                let mut out = vec![0.0; planes * n];
                for p in 0..planes {
                    let dst = &mut out[p * n..(p + 1) * n];
                    for t in 0..terms {
                        let f = &filtered[(p * terms + t) * n..(p * terms + t + 1) * n];
                        for i in 0..n {
                            dst[i] += coeffs[t] * u[i].powi(t as i32) * f[i];
                        }
                    }
                    let src = &input[p * n..(p + 1) * n];
                    for i in 0..n {
                        dst[i] = envelope[i] * dst[i] - src[i];
                    }
                }
                out
            }
            Backend::Table { radius, weights } => {
                let r = *radius as isize;
                let side = 2 * *radius + 1;
                let (w, h) = (self.width as isize, self.height as isize);
                let mut out = vec![0.0; planes * n];
                for y in 0..h {
                    for x in 0..w {
                        let i = (y * w + x) as usize;
                        let row = &weights[i * side * side..(i + 1) * side * side];
                        for p in 0..planes {
                            let src = &input[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for dy in -r..=r {
                                let yy = y + dy;
                                if yy < 0 || yy >= h {
                                    continue;
                                }
                                let x0 = (x - r).max(0);
                                let x1 = (x + r).min(w - 1);
                                let wrow = &row[((dy + r) as usize) * side..];
                                for xx in x0..=x1 {
                                    acc += wrow[(xx - x + r) as usize] * src[(yy * w + xx) as usize];
                                }
                            }
                            out[p * n + i] = acc;
                        }
                    }
                }
                out
            }
        }
    }

    /// Truncated Gaussian filter `G_v X G_h` per plane, diagonal included.
    fn separable(&self, input: &[f64], planes: usize) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut tmp = vec![0.0; planes * h * w];
        // horizontal pass over all rows of all planes at once
        f64::gemm(
            planes * h, w, w, 1.0, input, w as isize, 1, &self.taps_h, w as isize, 1, 0.0,
            &mut tmp, w as isize, 1,
        );
        let mut out = vec![0.0; planes * h * w];
        for p in 0..planes {
            let s = p * h * w;
            f64::gemm(
                h, h, w, 1.0, &self.taps_v, h as isize, 1, &tmp[s..s + h * w], w as isize, 1, 0.0,
                &mut out[s..s + h * w], w as isize, 1,
            );
        }
        out
    }
}

/// Smallest term count whose tail `sum_{k >= n} x^k / k!` is below the tolerance.
fn series_terms(x: f64) -> Option<usize> {
    let mut term = 1.0;
    for n in 0..=MAX_SERIES_TERMS {
        // tail after n terms is at most term * (n+1) / (n+1-x) once n+1 > x
        if (n as f64 + 1.0) > 2.0 * x && 2.0 * term <= SERIES_TOL {
            return Some(n.max(1));
        }
        term *= x / (n + 1) as f64;
    }
    None
}

fn bilateral_table(image: &Image, intensity: &[f64], sigma_xy: f64, c: f64, r: usize) -> Vec<f64> {
    let (w, h) = (image.width() as isize, image.height() as isize);
    let side = 2 * r + 1;
    let ri = r as isize;
    let mut spatial = vec![0.0; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let d2 = (dx * dx + dy * dy) as f64;
            spatial[((dy + ri) as usize) * side + (dx + ri) as usize] =
                (-d2 / (2.0 * sigma_xy * sigma_xy)).exp();
        }
    }
    let mut table = vec![0.0; (w * h) as usize * side * side];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let row = &mut table[i * side * side..(i + 1) * side * side];
            for dy in -ri..=ri {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -ri..=ri {
                    let xx = x + dx;
                    if xx < 0 || xx >= w || (dx == 0 && dy == 0) {
                        continue;
                    }
                    let di = intensity[i] - intensity[(yy * w + xx) as usize];
                    let k = ((dy + ri) as usize) * side + (dx + ri) as usize;
                    row[k] = spatial[k] * (-c * di * di).exp();
                }
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(k: &GaussianKernel, input: &[f64]) -> Vec<f64> {
        let n = k.len();
        (0..n)
            .map(|i| (0..n).map(|j| k.weight(i, j) * input[j]).sum())
            .collect()
    }

    fn test_image(w: usize, h: usize) -> Image {
        Image::new(
            w,
            h,
            (0..w * h)
                .map(|i| (((i * 37) % 17) as f32 / 17.0) * 0.6 + 0.2 * ((i % w) as f32 / w as f32))
                .collect(),
        )
        .unwrap()
    }

    fn signal(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect()
    }

    #[test]
    fn spatial_matches_brute_force() {
        for radius in [1, 3, 100] {
            let k = GaussianKernel::spatial(9, 7, 2.5, radius);
            let x = signal(63);
            let got = k.apply(&x, 1);
            for (a, b) in got.iter().zip(brute(&k, &x)) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bilateral_series_matches_brute_force() {
        let img = test_image(10, 8);
        let k = GaussianKernel::bilateral(&img, 6.0, 3.0, 40);
        assert!(k.uses_series());
        let x = signal(160);
        let got = k.apply(&x, 2);
        let want: Vec<f64> = [brute(&k, &x[..80]), brute(&k, &x[80..])].concat();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn bilateral_table_matches_brute_force() {
        let img = test_image(10, 8);
        let k = GaussianKernel::bilateral(&img, 2.0, 0.1, 8);
        assert!(!k.uses_series());
        let x = signal(80);
        for (a, b) in k.apply(&x, 1).iter().zip(brute(&k, &x)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        let img = test_image(6, 5);
        let k = GaussianKernel::bilateral(&img, 1.5, 0.2, 3);
        for p in 0..30 {
            assert_eq!(k.weight(p, p), 0.0);
            for q in 0..30 {
                assert_eq!(k.weight(p, q), k.weight(q, p));
            }
        }
    }

    #[test]
    fn series_term_counts() {
        assert_eq!(series_terms(0.0), Some(1));
        assert!(series_terms(0.03).unwrap() <= 8);
        assert!(series_terms(50.0).is_none());
    }
}
