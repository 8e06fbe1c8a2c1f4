//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Everything here is tape-free; [`crate::autograd`] wires these into the
//! reverse-mode graph.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.kw
    }

    /// Range of output columns `ox` for which `ox + kx - pad` is a valid input column.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.in_w + self.pad).saturating_sub(kx).min(self.out_w());
        (lo, hi.max(lo))
    }

    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.in_h + self.pad).saturating_sub(ky).min(self.out_h());
        (lo, hi.max(lo))
    }
}

/// Cross-correlation: `out[k,y,x] = Σ_c Σ_ky Σ_kx w[k,c,ky,kx] · in[c, y+ky-p, x+kx-p]`.
pub fn conv2d<T: Real>(input: &[T], bank: &[T], g: &ConvGeom, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    for k in 0..g.out_c {
        let o = &mut out[k * out_plane..(k + 1) * out_plane];
        for c in 0..g.in_c {
            let src = &input[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                let (y0, y1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let wv = bank[((k * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = g.ox_range(kx);
                    for oy in y0..y1 {
                        let iy = oy + ky - g.pad;
                        let orow = &mut o[oy * ow + x0..oy * ow + x1];
                        let irow = &src[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a = *a + wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv2d`] with respect to its input: scatters `grad_out` back
/// onto the input grid. This is also the forward pass of the transposed
/// convolution.
pub fn conv2d_adjoint<T: Real>(grad_out: &[T], bank: &[T], g: &ConvGeom, grad_in: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    for k in 0..g.out_c {
        let go = &grad_out[k * out_plane..(k + 1) * out_plane];
        for c in 0..g.in_c {
            let dst = &mut grad_in[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                let (y0, y1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let wv = bank[((k * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (x0, x1) = g.ox_range(kx);
                    for oy in y0..y1 {
                        let iy = oy + ky - g.pad;
                        let grow = &go[oy * ow + x0..oy * ow + x1];
                        let drow = &mut dst[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                        for (a, &b) in drow.iter_mut().zip(grow) {
                            *a = *a + wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] with respect to the bank, accumulated into `grad_bank`.
pub fn conv2d_bank_grad<T: Real>(input: &[T], grad_out: &[T], g: &ConvGeom, grad_bank: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.in_h * g.in_w;
    let out_plane = oh * ow;
    for k in 0..g.out_c {
        let go = &grad_out[k * out_plane..(k + 1) * out_plane];
        for c in 0..g.in_c {
            let src = &input[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                let (y0, y1) = g.oy_range(ky);
                for kx in 0..g.kw {
                    let (x0, x1) = g.ox_range(kx);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy + ky - g.pad;
                        let grow = &go[oy * ow + x0..oy * ow + x1];
                        let irow = &src[iy * g.in_w + x0 + kx - g.pad..iy * g.in_w + x1 + kx - g.pad];
                        acc = acc + grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    let idx = ((k * g.in_c + c) * g.kh + ky) * g.kw + kx;
                    grad_bank[idx] = grad_bank[idx] + acc;
                }
            }
        }
    }
}

/// Sampling table for one axis of an align-corners bilinear resize.
#[derive(Debug, Clone)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = if out_len > 1 {
            (in_len as f64 - 1.0) / (out_len as f64 - 1.0)
        } else {
            0.0
        };
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let s = i as f64 * scale;
            let l = (s.floor() as usize).min(in_len - 1);
            let h = (l + 1).min(in_len - 1);
            lo.push(l);
            hi.push(h);
            frac.push(s - l as f64);
        }
        LerpAxis { lo, hi, frac }
    }
}

pub fn resize_bilinear<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    ys: &LerpAxis,
    xs: &LerpAxis,
    out: &mut [T],
) {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let fy = T::of(ys.frac[oy]);
            let r0 = &src[ys.lo[oy] * w..(ys.lo[oy] + 1) * w];
            let r1 = &src[ys.hi[oy] * w..(ys.hi[oy] + 1) * w];
            for ox in 0..ow {
                let fx = T::of(xs.frac[ox]);
                let (l, hh) = (xs.lo[ox], xs.hi[ox]);
                let top = r0[l] + (r0[hh] - r0[l]) * fx;
                let bot = r1[l] + (r1[hh] - r1[l]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
}

pub fn resize_bilinear_adjoint<T: Real>(
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    ys: &LerpAxis,
    xs: &LerpAxis,
    grad_in: &mut [T],
) {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let one = T::one();
    for ch in 0..c {
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let gi = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::of(ys.frac[oy]);
            for ox in 0..ow {
                let fx = T::of(xs.frac[ox]);
                let g = go[oy * ow + ox];
                let (l, hh) = (xs.lo[ox], xs.hi[ox]);
                let (t, b) = (ys.lo[oy] * w, ys.hi[oy] * w);
                gi[t + l] = gi[t + l] + g * (one - fy) * (one - fx);
                gi[t + hh] = gi[t + hh] + g * (one - fy) * fx;
                gi[b + l] = gi[b + l] + g * fy * (one - fx);
                gi[b + hh] = gi[b + hh] + g * fy * fx;
            }
        }
    }
}

/// Normalized 1-D Gaussian taps, truncated at radius `ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection of an arbitrary index into `0..n`.
#[inline]
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable blur of each `h×w` plane. `transpose` applies the adjoint.
pub fn blur_planes<T: Real>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    taps: &[f64],
    transpose: bool,
    out: &mut [T],
) {
    let radius = (taps.len() / 2) as i64;
    let taps: Vec<T> = taps.iter().map(|&t| T::of(t)).collect();
    let mut tmp = vec![T::zero(); h * w];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        // horizontal pass into tmp
        for y in 0..h {
            for x in 0..w {
                for (t, &wt) in taps.iter().enumerate() {
                    let xi = reflect(x as i64 + t as i64 - radius, w);
                    if transpose {
                        tmp[y * w + xi] = tmp[y * w + xi] + wt * src[y * w + x];
                    } else {
                        tmp[y * w + x] = tmp[y * w + x] + wt * src[y * w + xi];
                    }
                }
            }
        }
        dst.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..h {
            for (t, &wt) in taps.iter().enumerate() {
                let yi = reflect(y as i64 + t as i64 - radius, h);
                for x in 0..w {
                    if transpose {
                        dst[yi * w + x] = dst[yi * w + x] + wt * tmp[y * w + x];
                    } else {
                        dst[y * w + x] = dst[y * w + x] + wt * tmp[yi * w + x];
                    }
                }
            }
        }
    }
}

/// Overflow-safe `ln(1 + e^z)`.
#[inline]
pub fn softplus<T: Real>(z: T) -> T {
    let thirty = T::of(30.0);
    if z > thirty {
        z
    } else if z < -thirty {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        for sigma in [0.3, 1.0, 2.5] {
            let t = gaussian_taps(sigma);
            assert_eq!(t.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_regimes() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(31.0f64), 31.0);
        assert!((softplus(-31.0f64) - (-31.0f64).exp()).abs() < 1e-25);
        assert!((softplus(30.0f64) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn lerp_axis_align_corners() {
        let a = LerpAxis::new(2, 3);
        assert_eq!(a.lo, vec![0, 0, 1]);
        assert!((a.frac[1] - 0.5).abs() < 1e-15);
        let id = LerpAxis::new(5, 5);
        assert!(id.frac.iter().all(|&f| f == 0.0));
    }
}
