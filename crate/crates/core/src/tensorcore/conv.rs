//! Same-padded, stride-1 2D convolution lowered to GEMM through im2col.

use crate::scalar::Scalar;

/// Unfold one `(c, h, w)` image into a `(c*k*k, h*w)` column matrix with zero padding.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, pad, w);
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..x_lo].fill(T::zero());
                    drow[x_hi..].fill(T::zero());
                    let off = kx as isize - pad as isize;
                    for x in x_lo..x_hi {
                        drow[x] = srow[(x as isize + off) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, pad, w);
                let off = kx as isize - pad as isize;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        let ix = (x as isize + off) as usize;
                        drow[ix] = drow[ix] + srow[x];
                    }
                }
            }
        }
    }
}

/// Output columns `x` for which `x + kx - pad` is inside `[0, w)`.
fn valid_range(kx: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo.min(hi), hi)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let mut cols = if d.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let ob = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        let src: &[T] = if d.k == 1 {
            xb
        } else {
            im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
            &cols
        };
        let beta = if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * hw..(o + 1) * hw].fill(bv);
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(
            d.cout,
            ckk,
            hw,
            T::one(),
            weight,
            ckk as isize,
            1,
            src,
            hw as isize,
            1,
            beta,
            ob,
            hw as isize,
            1,
        );
    }
}

/// Accumulates gradients for input, weight and bias. Any of the outputs may be skipped.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let ckk = d.cin * d.k * d.k;
    let mut cols = if d.k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    let mut dcols = if d.k == 1 || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..d.batch {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let gb = &grad_out[b * d.cout * hw..(b + 1) * d.cout * hw];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..d.cout {
                let s: T = gb[o * hw..(o + 1) * hw].iter().copied().sum();
                db[o] = db[o] + s;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if d.k == 1 {
                xb
            } else {
                im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
                &cols
            };
            // dW (cout x ckk) += G (cout x hw) * cols^T (hw x ckk)
            T::gemm(
                d.cout,
                hw,
                ckk,
                T::one(),
                gb,
                hw as isize,
                1,
                src,
                1,
                hw as isize,
                T::one(),
                dw,
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
            if d.k == 1 {
                // dx (cin x hw) += W^T (cin x cout) * G (cout x hw)
                T::gemm(
                    d.cin,
                    d.cout,
                    hw,
                    T::one(),
                    weight,
                    1,
                    ckk as isize,
                    gb,
                    hw as isize,
                    1,
                    T::one(),
                    dxb,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    d.cout,
                    hw,
                    T::one(),
                    weight,
                    1,
                    ckk as isize,
                    gb,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(&dcols, d.cin, d.h, d.w, d.k, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], wt: &[f64], cin: usize, cout: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[(c * h + iy as usize) * w + ix as usize]
                                        * wt[((o * cin + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let (cin, cout, h, w, k) = (2, 3, 5, 4, 3);
        let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let mut out = vec![0.0; cout * h * w];
        let d = ConvDims { batch: 1, cin, cout, h, w, k };
        forward(&x, &wt, None, &d, &mut out);
        assert_eq!(out, naive(&x, &wt, cin, cout, h, w, k));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 3, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
