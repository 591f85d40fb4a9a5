//! Network building blocks with explicit backward passes.

use super::real::Real;
use crate::error::{Error, Result};

/// A channels × height × width activation, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::ZERO; c * h * w],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Saved state of a convolution for its backward pass.
pub struct ConvCache<T> {
    cols: Vec<T>,
    c: usize,
    h: usize,
    w: usize,
}

fn im2col<T: Real>(input: &Tensor<T>, ksize: usize) -> Vec<T> {
    let (c, h, w) = (input.c, input.h, input.w);
    if ksize == 1 {
        return input.data.clone();
    }
    let p = (ksize / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::ZERO; c * ksize * ksize * hw];
    for ci in 0..c {
        let plane = &input.data[ci * hw..(ci + 1) * hw];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (oy, ox) = (ky as isize - p, kx as isize - p);
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = sy as usize * w;
                    let d = &mut dst[y * w + x_lo..y * w + x_hi];
                    let s = &plane[(src as isize + x_lo as isize + ox) as usize
                        ..(src as isize + x_hi as isize + ox) as usize];
                    d.copy_from_slice(s);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, ksize: usize) -> Tensor<T> {
    if ksize == 1 {
        return Tensor {
            c,
            h,
            w,
            data: cols.to_vec(),
        };
    }
    let p = (ksize / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = (ci * ksize + ky) * ksize + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (oy, ox) = (ky as isize - p, kx as isize - p);
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = (sy as usize * w) as isize + ox;
                    for x in x_lo..x_hi {
                        plane[(base + x as isize) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded "same" cross-correlation with a `ksize`×`ksize` kernel
/// (`ksize` odd). `weights` is laid out K×C×ksize×ksize.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &[T],
    bias: &[T],
    ksize: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let k_out = bias.len();
    let inner = input.c * ksize * ksize;
    if ksize % 2 == 0 || weights.len() != k_out * inner {
        return Err(Error::Shape(format!(
            "conv weights: expected {k_out}x{}x{ksize}x{ksize}, got {} values",
            input.c,
            weights.len()
        )));
    }
    let hw = input.h * input.w;
    let cols = im2col(input, ksize);
    let mut out = vec![T::ZERO; k_out * hw];
    for (k, b) in bias.iter().enumerate() {
        out[k * hw..(k + 1) * hw].fill(*b);
    }
    T::gemm(
        k_out,
        inner,
        hw,
        T::ONE,
        weights,
        (inner as isize, 1),
        &cols,
        (hw as isize, 1),
        T::ONE,
        &mut out,
        (hw as isize, 1),
    );
    Ok((
        Tensor {
            c: k_out,
            h: input.h,
            w: input.w,
            data: out,
        },
        ConvCache {
            cols,
            c: input.c,
            h: input.h,
            w: input.w,
        },
    ))
}

/// Accumulates weight and bias gradients into `gw`, `gb` and returns the
/// input gradient when `need_input` is set.
pub fn conv2d_backward<T: Real>(
    gout: &Tensor<T>,
    cache: &ConvCache<T>,
    weights: &[T],
    gw: &mut [T],
    gb: &mut [T],
    ksize: usize,
    need_input: bool,
) -> Option<Tensor<T>> {
    let k_out = gb.len();
    let hw = cache.h * cache.w;
    let inner = cache.c * ksize * ksize;
    debug_assert_eq!(gout.data.len(), k_out * hw);
    T::gemm(
        k_out,
        hw,
        inner,
        T::ONE,
        &gout.data,
        (hw as isize, 1),
        &cache.cols,
        (1, hw as isize),
        T::ONE,
        gw,
        (inner as isize, 1),
    );
    for (k, g) in gb.iter_mut().enumerate() {
        *g += gout.data[k * hw..(k + 1) * hw].iter().copied().sum::<T>();
    }
    if !need_input {
        return None;
    }
    let mut dcols = vec![T::ZERO; inner * hw];
    T::gemm(
        inner,
        k_out,
        hw,
        T::ONE,
        weights,
        (1, inner as isize),
        &gout.data,
        (hw as isize, 1),
        T::ZERO,
        &mut dcols,
        (hw as isize, 1),
    );
    Some(col2im(&dcols, cache.c, cache.h, cache.w, ksize))
}

pub fn relu<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    for v in &mut x.data {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(mut gout: Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    for (g, y) in gout.data.iter_mut().zip(&output.data) {
        if !(*y > T::ZERO) {
            *g = T::ZERO;
        }
    }
    gout
}

pub fn avg_pool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.h % 2 != 0 || input.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "average pooling needs even dims, got {}x{}",
            input.h, input.w
        )));
    }
    let (h2, w2) = (input.h / 2, input.w / 2);
    let q = T::from_f64(0.25);
    let mut out = Tensor::zeros(input.c, h2, w2);
    for c in 0..input.c {
        for y in 0..h2 {
            for x in 0..w2 {
                let s = input.at(c, 2 * y, 2 * x)
                    + input.at(c, 2 * y, 2 * x + 1)
                    + input.at(c, 2 * y + 1, 2 * x)
                    + input.at(c, 2 * y + 1, 2 * x + 1);
                out.data[(c * h2 + y) * w2 + x] = s * q;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (gout.h * 2, gout.w * 2);
    let q = T::from_f64(0.25);
    let mut out = Tensor::zeros(gout.c, h, w);
    for c in 0..gout.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = gout.at(c, y / 2, x / 2) * q;
            }
        }
    }
    out
}

pub fn upsample_nearest2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.h * 2, input.w * 2);
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(c * h + y) * w + x] = input.at(c, y / 2, x / 2);
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (gout.h / 2, gout.w / 2);
    let mut out = Tensor::zeros(gout.c, h2, w2);
    for c in 0..gout.c {
        for y in 0..gout.h {
            for x in 0..gout.w {
                out.data[(c * h2 + y / 2) * w2 + x / 2] += gout.at(c, y, x);
            }
        }
    }
    out
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape(
            "concatenated tensors differ in spatial size".into(),
        ));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    })
}

/// Splits a gradient of a concatenation back into its two parts.
pub fn split_channels<T: Real>(g: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let hw = g.h * g.w;
    let (h, w, c) = (g.h, g.w, g.c);
    let mut data = g.data;
    let rest = data.split_off(first * hw);
    (
        Tensor {
            c: first,
            h,
            w,
            data,
        },
        Tensor {
            c: c - first,
            h,
            w,
            data: rest,
        },
    )
}

pub fn logistic<T: Real>(mut x: Tensor<T>) -> Tensor<T> {
    for v in &mut x.data {
        *v = T::ONE / (T::ONE + (-*v).exp());
    }
    x
}

/// Gradient through the logistic given its output.
pub fn logistic_backward<T: Real>(mut gout: Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    for (g, y) in gout.data.iter_mut().zip(&output.data) {
        *g = *g * *y * (T::ONE - *y);
    }
    gout
}

/// Mean squared error over channels × selected pixels and its gradient.
/// `mask` selects pixels (length h·w); an empty selection gives zero loss.
pub fn mse_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let hw = pred.h * pred.w;
    if let Some(m) = mask {
        if m.len() != hw {
            return Err(Error::Shape("loss mask size differs from the image".into()));
        }
    }
    let selected = mask.map_or(hw, |m| m.iter().filter(|&&b| b).count());
    let n = selected * pred.c;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    if n == 0 {
        return Ok((T::ZERO, grad));
    }
    let inv = T::ONE / T::from_f64(n as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::ZERO;
    for i in 0..pred.data.len() {
        if mask.is_some_and(|m| !m[i % hw]) {
            continue;
        }
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = two * d * inv;
    }
    Ok((loss * inv, grad))
}
