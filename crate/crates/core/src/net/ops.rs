//! Numeric kernels for the split predictor: channel-planar tensors and the
//! handful of layer types the network is built from. Everything is generic
//! over [`Scalar`] so the same code runs in f64 (training, default
//! inference) and f32 (fast inference).

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::codec::Plane;

/// Element type of network tensors. Implemented for f32 and f64.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    /// self * a + b, fused where the target supports it.
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn mul_add(self, a: f64, b: f64) -> f64 {
        f64::mul_add(self, a, b)
    }
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn mul_add(self, a: f32, b: f32) -> f32 {
        f32::mul_add(self, a, b)
    }
}

/// Dense feature map, one contiguous plane per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<S> {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<S>,
}

impl<S: Scalar> FeatureTensor<S> {
    pub fn zeros(channels: usize, h: usize, w: usize) -> FeatureTensor<S> {
        FeatureTensor {
            channels,
            h,
            w,
            data: vec![S::ZERO; channels * h * w],
        }
    }

    /// Single-channel tensor from a pixel window, scaled to [0, 1].
    pub fn from_pixels(plane: &Plane, x0: usize, y0: usize, w: usize, h: usize) -> FeatureTensor<S> {
        assert!(x0 + w <= plane.w && y0 + h <= plane.h, "window out of bounds");
        let mut t = FeatureTensor::zeros(1, h, w);
        for y in 0..h {
            let src = &plane.row(y0 + y)[x0..x0 + w];
            let dst = &mut t.data[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = S::from_f64(f64::from(s) / 255.0);
            }
        }
        t
    }

    pub fn plane(&self, c: usize) -> &[S] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [S] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: S) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Copies out the (x0, y0, w, h) window of every channel.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> FeatureTensor<S> {
        assert!(x0 + w <= self.w && y0 + h <= self.h, "window out of bounds");
        let mut out = FeatureTensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..h {
                let s = &src[(y0 + y) * self.w + x0..(y0 + y) * self.w + x0 + w];
                out.plane_mut(c)[y * w..(y + 1) * w].copy_from_slice(s);
            }
        }
        out
    }

    /// Swaps the two spatial axes of every channel.
    pub fn transpose(&self) -> FeatureTensor<S> {
        let mut out = FeatureTensor::zeros(self.channels, self.w, self.h);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..self.h {
                for x in 0..self.w {
                    dst[x * self.h + y] = src[y * self.w + x];
                }
            }
        }
        out
    }
}

/// dst += a * src over equal-length slices.
#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S], a: S) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(a, *d);
    }
}

/// 2-d convolution. Two configurations appear in the network: 3x3, stride 1,
/// pad 1 (stem and residual units) and kernel == stride, pad 0 (the
/// non-overlapping reduction ladder and the 1x1 projection).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sy: usize,
    pub sx: usize,
    pub pad: usize,
    /// [out_c][in_c][kh][kw], row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn zeros(in_c: usize, out_c: usize, kh: usize, kw: usize, sy: usize, sx: usize, pad: usize) -> Conv2d<S> {
        Conv2d {
            in_c,
            out_c,
            kh,
            kw,
            sy,
            sx,
            pad,
            weight: vec![S::ZERO; out_c * in_c * kh * kw],
            bias: vec![S::ZERO; out_c],
        }
    }

    #[inline]
    pub fn w_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_c + ci) * self.kh + ky) * self.kw + kx
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.sy + 1,
            (w + 2 * self.pad - self.kw) / self.sx + 1,
        )
    }

    pub fn forward(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        assert_eq!(x.channels, self.in_c, "channel mismatch");
        if self.kh == 3 && self.kw == 3 && self.sy == 1 && self.sx == 1 && self.pad == 1 {
            if self.in_c == 16 && self.out_c == 16 {
                // Lane width matches one vector register per dtype.
                if std::mem::size_of::<S>() == 4 && x.w % 16 == 0 {
                    return self.forward_3x3_tiled::<16>(x);
                }
                if x.w % 8 == 0 {
                    return self.forward_3x3_tiled::<8>(x);
                }
            }
            self.forward_3x3(x)
        } else if self.pad == 0 && self.kh == self.sy && self.kw == self.sx {
            self.forward_stride(x)
        } else {
            self.forward_general(x)
        }
    }

    /// Same-size 3x3 path: per output row, three shifted row accumulations
    /// per (input channel, tap row). The inner loops are contiguous
    /// multiply-adds, which is what keeps full-CTU inference affordable.
    fn forward_3x3(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        let (h, w) = (x.h, x.w);
        let mut out = FeatureTensor::zeros(self.out_c, h, w);
        for co in 0..self.out_c {
            for oy in 0..h {
                let hw = h * w;
                let dst = &mut out.as_mut_slice()[co * hw + oy * w..co * hw + (oy + 1) * w];
                let b = self.bias[co];
                for d in dst.iter_mut() {
                    *d = b;
                }
                for ci in 0..self.in_c {
                    let src = x.plane(ci);
                    for ky in 0..3usize {
                        let iy = oy + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let iy = iy - 1;
                        let row = &src[iy * w..(iy + 1) * w];
                        let wb = self.w_index(co, ci, ky, 0);
                        let (w0, w1, w2) = (self.weight[wb], self.weight[wb + 1], self.weight[wb + 2]);
                        axpy(&mut dst[1..], &row[..w - 1], w0);
                        axpy(dst, row, w1);
                        axpy(&mut dst[..w - 1], &row[1..], w2);
                    }
                }
            }
        }
        out
    }

    /// Register-tiled 16-in 16-out path. Output channels are processed four
    /// at a time with an L-lane accumulator each, so the inner loops reduce
    /// to fused multiply-adds over vector-width arrays. The input is copied
    /// once into a zero-padded buffer, which removes every boundary branch.
    fn forward_3x3_tiled<const L: usize>(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        let (h, w) = (x.h, x.w);
        debug_assert!(self.in_c == 16 && self.out_c == 16 && w % L == 0);
        let pw = w + 2;
        let mut padded = vec![S::ZERO; 16 * (h + 2) * pw];
        for ci in 0..16 {
            let src = x.plane(ci);
            let base = ci * (h + 2) * pw;
            for y in 0..h {
                let row = base + (y + 1) * pw + 1;
                padded[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        // taps[(((cb * 16 + ci) * 3 + ky) * 3 + kx) * 4 + j] for co = cb * 4 + j.
        let mut taps = vec![S::ZERO; 16 * 16 * 9];
        for co in 0..16 {
            for ci in 0..16 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        taps[((((co / 4) * 16 + ci) * 3 + ky) * 3 + kx) * 4 + co % 4] =
                            self.weight[self.w_index(co, ci, ky, kx)];
                    }
                }
            }
        }
        #[inline(always)]
        fn fma3<S: Scalar, const L: usize>(
            acc: &mut [S; L],
            l0: &[S; L],
            l1: &[S; L],
            l2: &[S; L],
            w0: S,
            w1: S,
            w2: S,
        ) {
            for i in 0..L {
                acc[i] = l0[i].mul_add(w0, acc[i]);
            }
            for i in 0..L {
                acc[i] = l1[i].mul_add(w1, acc[i]);
            }
            for i in 0..L {
                acc[i] = l2[i].mul_add(w2, acc[i]);
            }
        }
        let mut out = FeatureTensor::zeros(16, h, w);
        let hw = h * w;
        let chan = (h + 2) * pw;
        for oy in 0..h {
            for xc in (0..w).step_by(L) {
                for cb in 0..4 {
                    let mut a0 = [self.bias[cb * 4]; L];
                    let mut a1 = [self.bias[cb * 4 + 1]; L];
                    let mut a2 = [self.bias[cb * 4 + 2]; L];
                    let mut a3 = [self.bias[cb * 4 + 3]; L];
                    for ci in 0..16 {
                        let cbase = ci * chan + oy * pw + xc;
                        for ky in 0..3 {
                            let row = &padded[cbase + ky * pw..cbase + ky * pw + L + 2];
                            let l0: &[S; L] = row[0..L].try_into().unwrap();
                            let l1: &[S; L] = row[1..L + 1].try_into().unwrap();
                            let l2: &[S; L] = row[2..L + 2].try_into().unwrap();
                            let t = &taps[(((cb * 16 + ci) * 3 + ky) * 3) * 4..][..12];
                            fma3(&mut a0, l0, l1, l2, t[0], t[4], t[8]);
                            fma3(&mut a1, l0, l1, l2, t[1], t[5], t[9]);
                            fma3(&mut a2, l0, l1, l2, t[2], t[6], t[10]);
                            fma3(&mut a3, l0, l1, l2, t[3], t[7], t[11]);
                        }
                    }
                    let dst = out.as_mut_slice();
                    let at = |co: usize| co * hw + oy * w + xc;
                    dst[at(cb * 4)..at(cb * 4) + L].copy_from_slice(&a0);
                    dst[at(cb * 4 + 1)..at(cb * 4 + 1) + L].copy_from_slice(&a1);
                    dst[at(cb * 4 + 2)..at(cb * 4 + 2) + L].copy_from_slice(&a2);
                    dst[at(cb * 4 + 3)..at(cb * 4 + 3) + L].copy_from_slice(&a3);
                }
            }
        }
        out
    }

    /// kernel == stride, no padding: each output pixel reduces a disjoint
    /// input patch, so the loops carry no boundary checks at all.
    fn forward_stride(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut out = FeatureTensor::zeros(self.out_c, oh, ow);
        for co in 0..self.out_c {
            let b = self.bias[co];
            {
                let dst = out.plane_mut(co);
                for d in dst.iter_mut() {
                    *d = b;
                }
            }
            for ci in 0..self.in_c {
                let src = x.plane(ci);
                for oy in 0..oh {
                    for ky in 0..self.kh {
                        let row = &src[(oy * self.sy + ky) * x.w..][..x.w];
                        let wrow = &self.weight[self.w_index(co, ci, ky, 0)..][..self.kw];
                        let dst = out.plane_mut(co);
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let patch = &row[ox * self.sx..ox * self.sx + self.kw];
                            let mut acc = *d;
                            for (p, wv) in patch.iter().zip(wrow) {
                                acc = p.mul_add(*wv, acc);
                            }
                            *d = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_general(&self, x: &FeatureTensor<S>) -> FeatureTensor<S> {
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut out = FeatureTensor::zeros(self.out_c, oh, ow);
        for co in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[co];
                    for ci in 0..self.in_c {
                        let src = x.plane(ci);
                        for ky in 0..self.kh {
                            let iy = (oy * self.sy + ky).wrapping_sub(self.pad);
                            if iy >= x.h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox * self.sx + kx).wrapping_sub(self.pad);
                                if ix >= x.w {
                                    continue;
                                }
                                let wv = self.weight[self.w_index(co, ci, ky, kx)];
                                acc = src[iy * x.w + ix].mul_add(wv, acc);
                            }
                        }
                    }
                    out.set(co, oy, ox, acc);
                }
            }
        }
        out
    }

    pub fn convert<T: Scalar>(&self) -> Conv2d<T> {
        Conv2d {
            in_c: self.in_c,
            out_c: self.out_c,
            kh: self.kh,
            kw: self.kw,
            sy: self.sy,
            sx: self.sx,
            pad: self.pad,
            weight: self.weight.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Parametric ReLU with one learned slope per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<S> {
    pub slopes: Vec<S>,
}

impl<S: Scalar> PRelu<S> {
    pub fn new(channels: usize, slope: f64) -> PRelu<S> {
        PRelu {
            slopes: vec![S::from_f64(slope); channels],
        }
    }

    /// y = max(0, x) + slope * min(0, x), channel by channel.
    pub fn forward(&self, x: &mut FeatureTensor<S>) {
        assert_eq!(x.channels, self.slopes.len(), "channel mismatch");
        for c in 0..x.channels {
            let a = self.slopes[c];
            for v in x.plane_mut(c) {
                let val = *v;
                let pos = if val > S::ZERO { val } else { S::ZERO };
                let neg = if val < S::ZERO { val } else { S::ZERO };
                *v = neg.mul_add(a, pos);
            }
        }
    }

    /// Vector variant: one slope per element.
    pub fn forward_vec(&self, x: &mut [S]) {
        assert_eq!(x.len(), self.slopes.len(), "length mismatch");
        for (v, &a) in x.iter_mut().zip(&self.slopes) {
            let val = *v;
            let pos = if val > S::ZERO { val } else { S::ZERO };
            let neg = if val < S::ZERO { val } else { S::ZERO };
            *v = neg.mul_add(a, pos);
        }
    }

    pub fn convert<T: Scalar>(&self) -> PRelu<T> {
        PRelu {
            slopes: self.slopes.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Fully connected layer, weights row-major [out][in].
#[derive(Clone, Debug, PartialEq)]
pub struct Fc<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Fc<S> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Fc<S> {
        Fc {
            in_dim,
            out_dim,
            weight: vec![S::ZERO; in_dim * out_dim],
            bias: vec![S::ZERO; out_dim],
        }
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.in_dim, "input length mismatch");
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (&w, &v) in row.iter().zip(x) {
                acc = w.mul_add(v, acc);
            }
            out.push(acc);
        }
        out
    }

    pub fn convert<T: Scalar>(&self) -> Fc<T> {
        Fc {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            bias: self.bias.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// In-place softmax with the usual max shift.
pub fn softmax<S: Scalar>(v: &mut [S]) {
    if v.is_empty() {
        return;
    }
    let mut m = v[0];
    for &x in v.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = S::ZERO;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Scales the first half of the channels by `q`. The masked half carries the
/// quantizer signal; the untouched half stays purely structural.
pub fn half_mask_tensor<S: Scalar>(t: &mut FeatureTensor<S>, q: f64) {
    let qs = S::from_f64(q);
    for c in 0..t.channels / 2 {
        for v in t.plane_mut(c) {
            *v *= qs;
        }
    }
}

/// Vector variant of [`half_mask_tensor`]: scales the first half of the
/// elements.
pub fn half_mask_vec<S: Scalar>(v: &mut [S], q: f64) {
    let qs = S::from_f64(q);
    let half = v.len() / 2;
    for x in &mut v[..half] {
        *x *= qs;
    }
}
