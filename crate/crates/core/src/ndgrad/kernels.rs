//! Forward and backward kernels on raw tensors. The tape in [`super::Tape`]
//! records which of these ran; they are exposed for reuse by inference-only
//! paths and tests.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn check(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let (c_out, kc, kh, kw) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(Error::Shape {
                    op: "conv2d",
                    dim: "kernel rank",
                    expected: 4,
                    got: other.len(),
                })
            }
        };
        if kc != c_in {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels",
                expected: kc,
                got: c_in,
            });
        }
        if kh != kw {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "kernel width",
                expected: kh,
                got: kw,
            });
        }
        if bias.shape() != [c_out] {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "bias length",
                expected: c_out,
                got: bias.len(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "spatial extent",
                expected: kh,
                got: h.min(w) + 2 * padding,
            });
        }
        Ok(Self {
            c_in,
            c_out,
            k: kh,
            h,
            w,
            padding,
            h_out: h + 2 * padding + 1 - kh,
            w_out: w + 2 * padding + 1 - kh,
        })
    }

    /// Output indices `o` for which `o + tap - padding` lands in `[0, extent)`.
    #[inline]
    fn valid(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(tap);
        let hi = (extent + self.padding).saturating_sub(tap).min(out_extent);
        (lo, hi.max(lo))
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::check(input, kernel, bias, padding)?;
    let (inp, ker) = (input.data(), kernel.data());
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane_out..(co + 1) * plane_out];
        out_c.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let in_c = &inp[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = ker[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, g.w, g.w_out);
                    for y in y0..y1 {
                        let iy = y + ky - g.padding;
                        let src = &in_c[iy * g.w + x0 + kx - g.padding..iy * g.w + x1 + kx - g.padding];
                        let dst = &mut out_c[y * g.w_out + x0..y * g.w_out + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.h_out, g.w_out], out)
}

pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let (go, ker) = (grad_out.data(), kernel.data());
    let plane_out = g.h_out * g.w_out;
    let mut gi = vec![0.0; g.c_in * g.h * g.w];
    for co in 0..g.c_out {
        let go_c = &go[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let gi_c = &mut gi[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = ker[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, g.w, g.w_out);
                    for y in y0..y1 {
                        let iy = y + ky - g.padding;
                        let src = &go_c[y * g.w_out + x0..y * g.w_out + x1];
                        let dst = &mut gi_c[iy * g.w + x0 + kx - g.padding..iy * g.w + x1 + kx - g.padding];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_in, g.h, g.w], gi).expect("conv input grad shape")
}

pub fn conv2d_grad_kernel(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let (go, inp) = (grad_out.data(), input.data());
    let plane_out = g.h_out * g.w_out;
    let mut gk = vec![0.0; g.c_out * g.c_in * g.k * g.k];
    for co in 0..g.c_out {
        let go_c = &go[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_c = &inp[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (y0, y1) = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.k {
                    let (x0, x1) = g.valid(kx, g.w, g.w_out);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - g.padding;
                        let a = &go_c[y * g.w_out + x0..y * g.w_out + x1];
                        let b = &in_c[iy * g.w + x0 + kx - g.padding..iy * g.w + x1 + kx - g.padding];
                        acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    }
                    gk[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.c_in, g.k, g.k], gk).expect("conv kernel grad shape")
}

pub fn conv2d_grad_bias(grad_out: &Tensor, g: &ConvGeometry) -> Tensor {
    let plane = g.h_out * g.w_out;
    Tensor::from_fn(&[g.c_out], |co| grad_out.data()[co * plane..(co + 1) * plane].iter().sum())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal-modulated binary cross-entropy on a logit against a soft target:
/// `|t - p|^γ · BCE(p, t)` with `p = sigmoid(x)`.
///
/// Returns `(loss, dloss/dx)`. For hard targets this reduces to the usual
/// focal loss without the α balance term.
pub fn focal_bce(x: f64, t: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    // -[t ln p + (1-t) ln(1-p)] with ln p = -softplus(-x), ln(1-p) = -softplus(x)
    let bce = t * softplus(-x) + (1.0 - t) * softplus(x);
    let d = p - t;
    let ad = d.abs();
    let m = ad.powf(gamma);
    // d|p-t|^γ/dx = γ |p-t|^(γ-1) sign(p-t) p(1-p)
    let dm = if ad == 0.0 {
        0.0
    } else {
        gamma * ad.powf(gamma - 1.0) * d.signum() * p * (1.0 - p)
    };
    (m * bce, dm * bce + m * d)
}

/// Smooth-L1 with transition at `beta`; returns `(value, derivative)`.
#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}
