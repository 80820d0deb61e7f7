//! 3x3 dilated "same" convolution with a ReLU, forward and backward.
//!
//! Tensors are channel-first `(C, H, W)`. Padding equals the dilation, so
//! the output has the input's spatial shape and border taps read zeros.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Inclusive-exclusive spatial window `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Window {
    pub fn pixel(y: usize, x: usize) -> Self {
        Self {
            y0: y,
            y1: y + 1,
            x0: x,
            x1: x + 1,
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            y0: 0,
            y1: h,
            x0: 0,
            x1: w,
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn grow(&self, by: usize, h: usize, w: usize) -> Self {
        Self {
            y0: self.y0.saturating_sub(by),
            y1: (self.y1 + by).min(h),
            x0: self.x0.saturating_sub(by),
            x1: (self.x1 + by).min(w),
        }
    }

    pub fn union(&self, other: &Window) -> Self {
        Self {
            y0: self.y0.min(other.y0),
            y1: self.y1.max(other.y1),
            x0: self.x0.min(other.x0),
            x1: self.x1.max(other.x1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `(out, in, 3, 3)`
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
    pub dilation: usize,
}

/// Parameter gradients of one [`ConvLayer`].
#[derive(Debug, Clone)]
pub struct ConvGrad<T> {
    pub weight: Array4<T>,
    pub bias: Option<Array1<T>>,
}

/// Offset of tap `k` (0, 1, 2) for a given dilation.
#[inline]
fn tap(k: usize, dilation: usize) -> isize {
    (k as isize - 1) * dilation as isize
}

/// Valid destination range `[lo, hi)` along an axis of length `n` for a
/// source shift of `d`, i.e. positions `p` with `0 <= p + d < n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(x: ArrayView3<T>, dilation: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c * 9, h * w));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let dy = tap(ky, dilation);
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = tap(kx, dilation);
                let (xlo, xhi) = valid_range(w, dx);
                if xlo == xhi {
                    continue;
                }
                let mut row = col.row_mut(ci * 9 + ky * 3 + kx);
                let dst = row.as_slice_mut().expect("contiguous row");
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (xlo as isize + dx) as usize;
                    let n = xhi - xlo;
                    dst[y * w + xlo..y * w + xlo + n].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + n]);
                }
            }
        }
    }
    col
}

pub fn col2im<T: Scalar>(col: ArrayView2<T>, c: usize, h: usize, w: usize, dilation: usize) -> Array3<T> {
    let mut out = Array3::<T>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let dy = tap(ky, dilation);
            let (ylo, yhi) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = tap(kx, dilation);
                let (xlo, xhi) = valid_range(w, dx);
                let row = col.row(ci * 9 + ky * 3 + kx);
                for y in ylo..yhi {
                    let sy = (y as isize + dy) as usize;
                    for x in xlo..xhi {
                        let sx = (x as isize + dx) as usize;
                        plane[sy * w + sx] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> ConvLayer<T> {
    pub fn init<R: Rng>(in_ch: usize, out_ch: usize, dilation: usize, bias: bool, rng: &mut R) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, 3, 3), || T::from_f64(normal.sample(rng)));
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_ch)),
            dilation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let (o, i, _, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * 9))
            .expect("standard layout weights")
    }

    /// Returns the im2col matrix (kept for the backward pass) and the
    /// post-ReLU output.
    pub fn forward(&self, x: ArrayView3<T>) -> (Array2<T>, Array3<T>) {
        let (_, h, w) = x.dim();
        let col = im2col(x, self.dilation);
        let out = self.forward_col(&col, h, w);
        (col, out)
    }

    pub fn forward_col(&self, col: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let mut pre = self.weight_matrix().dot(col);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in pre.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        pre.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        pre.into_shape_with_order((self.out_channels(), h, w))
            .expect("contiguous output")
    }

    /// Backward through ReLU and convolution. `out` is the post-ReLU output
    /// of the forward pass and `d_out` the gradient with respect to it.
    pub fn backward(
        &self,
        col: &Array2<T>,
        out: &Array3<T>,
        mut d_out: Array3<T>,
        want_input: bool,
    ) -> (ConvGrad<T>, Option<Array3<T>>) {
        let (o, h, w) = out.dim();
        Zip::from(&mut d_out).and(out).for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
        let d_pre = d_out.into_shape_with_order((o, h * w)).expect("contiguous grad");
        let i = self.in_channels();
        let d_weight = d_pre
            .dot(&col.t())
            .into_shape_with_order((o, i, 3, 3))
            .expect("weight shape");
        let d_bias = self.bias.as_ref().map(|_| d_pre.sum_axis(Axis(1)));
        let d_input = want_input.then(|| {
            let d_col = self.weight_matrix().t().dot(&d_pre);
            col2im(d_col.view(), i, h, w, self.dilation)
        });
        (
            ConvGrad {
                weight: d_weight,
                bias: d_bias,
            },
            d_input,
        )
    }

    /// Input gradient only, for a `d_out` that is zero outside `window`.
    /// Returns the gradient and the window outside which it is zero.
    pub fn backward_input_windowed(&self, out: &Array3<T>, d_out: &Array3<T>, window: Window) -> (Array3<T>, Window) {
        let (o, h, w) = out.dim();
        let i = self.in_channels();
        let grown = window.grow(self.dilation, h, w);
        // A dense pass is cheaper once the window covers a good part of the map.
        if window.area() * 4 > h * w {
            let mut masked = d_out.clone();
            Zip::from(&mut masked).and(out).for_each(|g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
            let d_pre = masked.into_shape_with_order((o, h * w)).expect("contiguous grad");
            let d_col = self.weight_matrix().t().dot(&d_pre);
            return (col2im(d_col.view(), i, h, w, self.dilation), grown);
        }
        let mut d_in = Array3::<T>::zeros((i, h, w));
        let d = self.dilation;
        for y in window.y0..window.y1 {
            for x in window.x0..window.x1 {
                for co in 0..o {
                    if out[[co, y, x]] <= T::zero() {
                        continue;
                    }
                    let g = d_out[[co, y, x]];
                    if g == T::zero() {
                        continue;
                    }
                    for ky in 0..3 {
                        let sy = y as isize + tap(ky, d);
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x as isize + tap(kx, d);
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let wk = self.weight.slice(s![co, .., ky, kx]);
                            let mut dst = d_in.slice_mut(s![.., sy as usize, sx as usize]);
                            dst.zip_mut_with(&wk, |acc, &wv| *acc += wv * g);
                        }
                    }
                }
            }
        }
        (d_in, grown)
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.mapv(|v| U::from_f64(v.as_f64())),
            bias: self.bias.as_ref().map(|b| b.mapv(|v| U::from_f64(v.as_f64()))),
            dilation: self.dilation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution, independent of im2col.
    fn naive_conv(layer: &ConvLayer<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let o = layer.out_channels();
        let d = layer.dilation as isize;
        let mut out = Array3::zeros((o, h, w));
        for co in 0..o {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = layer.bias.as_ref().map_or(0.0, |b| b[co]);
                    for ci in 0..c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let sy = y + (ky - 1) * d;
                                let sx = xx + (kx - 1) * d;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += layer.weight[[co, ci, ky as usize, kx as usize]]
                                        * x[[ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    out[[co, y as usize, xx as usize]] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn random_layer(dilation: usize, seed: u64) -> (ConvLayer<f64>, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = ConvLayer::<f64>::init(3, 4, dilation, true, &mut rng);
        layer.bias = Some(Array1::from_shape_fn(4, |i| 0.1 * i as f64 - 0.15));
        let x = Array3::from_shape_fn((3, 7, 9), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 11) as f64 / 11.0 - 0.4);
        (layer, x)
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for dilation in [1, 2, 4] {
            let (layer, x) = random_layer(dilation, 3);
            let (_, out) = layer.forward(x.view());
            let expect = naive_conv(&layer, &x);
            let diff = (&out - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "dilation {dilation}: {diff}");
        }
    }

    #[test]
    fn dilation_larger_than_input() {
        let (layer, _) = random_layer(8, 4);
        for (h, w) in [(1, 1), (3, 2), (9, 5)] {
            let x = Array3::from_shape_fn((3, h, w), |(c, y, x)| (c + 2 * y + 3 * x) as f64 / 7.0 - 0.5);
            let (_, out) = layer.forward(x.view());
            let diff = (&out - &naive_conv(&layer, &x)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "{h}x{w}: {diff}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (_, x) = random_layer(2, 1);
        let col = im2col(x.view(), 2);
        let probe = Array2::from_shape_fn(col.dim(), |(r, c)| ((r * 13 + c * 5) % 17) as f64 - 8.0);
        let lhs: f64 = (&col * &probe).sum();
        let back = col2im(probe.view(), 3, 7, 9, 2);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn windowed_backward_matches_dense() {
        let (layer, x) = random_layer(2, 9);
        let (col, out) = layer.forward(x.view());
        let mut d_out = Array3::zeros(out.dim());
        d_out[[1, 3, 4]] = 1.5;
        d_out[[2, 3, 4]] = -0.5;
        let (_, dense) = layer.backward(&col, &out, d_out.clone(), true);
        let (sparse, win) = layer.backward_input_windowed(&out, &d_out, Window::pixel(3, 4));
        let dense = dense.unwrap();
        let diff = (&dense - &sparse).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
        assert_eq!(win, Window { y0: 1, y1: 6, x0: 2, x1: 7 });
    }
}
