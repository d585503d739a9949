//! 2-D convolution primitives.
//!
//! Three bilinear primitives cover forward and both adjoints:
//!
//! * `conv2d`            C(x, w) -> y
//! * `conv_transpose2d`  T(y, w) -> x   (adjoint of C in its first argument)
//! * `conv2d_grad_weight` B(x, y) -> w  (adjoint of C in its second argument)
//!
//! They satisfy `<C(x,w), y> = <x, T(y,w)> = <w, B(x,y)>`, so each one's
//! gradient is expressible with the other two and gradients stay
//! differentiable to any order.
//!
//! Layout follows the usual convention: activations are (N, C, H, W) and
//! conv weights are (Cout, Cin, kh, kw). Padding is zero padding.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};
use rayon::prelude::*;

use crate::tensor::Tensor;

/// Allow order-sensitive reductions to run on multiple threads. Off by
/// default: the sequential path is bit-reproducible across runs and hosts.
static FAST_PARALLEL: AtomicBool = AtomicBool::new(false);

pub fn set_fast_parallel(enabled: bool) {
    FAST_PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn fast_parallel() -> bool {
    FAST_PARALLEL.load(Ordering::Relaxed)
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one (C, H, W) sample into a (C*kh*kw, Ho*Wo) patch matrix.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let ho = conv_output_size(h, kh, stride, pad);
    let wo = conv_output_size(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let rbase = row * ho * wo;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let sbase = ch * h * w + si as usize * w;
                    let obase = rbase + oi * wo;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            cs[obase + oj] = x[sbase + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add a patch matrix back into (C, H, W).
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = conv_output_size(h, kh, stride, pad);
    let wo = conv_output_size(w, kw, stride, pad);
    let cs = cols.as_slice().unwrap();
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let rbase = row * ho * wo;
                for oi in 0..ho {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dbase = ch * h * w + si as usize * w;
                    let obase = rbase + oi * wo;
                    for oj in 0..wo {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && sj < w as isize {
                            out[dbase + sj as usize] += cs[obase + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_raw(x: &ArrayViewD<f64>, w: &ArrayViewD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = conv_output_size(h, kh, stride, pad);
    let wo = conv_output_size(wid, kw, stride, pad);

    let wstd = w.as_standard_layout();
    let wmat = wstd.to_shape((cout, cin * kh * kw)).expect("weight reshape").to_owned();
    let xstd = x.as_standard_layout();
    let xsl = xstd.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cout, ho, wo]));
    let sample_in = cin * h * wid;
    let sample_out = cout * ho * wo;
    let out_slice = out.as_slice_mut().unwrap();

    // Per-sample outputs are disjoint, so threading stays bit-reproducible.
    out_slice
        .par_chunks_mut(sample_out.max(1))
        .zip(xsl.par_chunks(sample_in.max(1)))
        .for_each(|(dst, src)| {
            let cols = im2col(src, cin, h, wid, kh, kw, stride, pad);
            let y = wmat.dot(&cols);
            dst.copy_from_slice(y.as_slice().unwrap());
        });
    out
}

fn conv_transpose2d_raw(
    y: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> ArrayD<f64> {
    let ys = y.shape();
    let ws = w.shape();
    let (n, cout, ho, wo) = (ys[0], ys[1], ys[2], ys[3]);
    let (wcout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cout, wcout, "conv_transpose2d channel mismatch");
    let (h, wid) = out_hw;
    assert_eq!(ho, conv_output_size(h, kh, stride, pad), "conv_transpose2d height mismatch");
    assert_eq!(wo, conv_output_size(wid, kw, stride, pad), "conv_transpose2d width mismatch");

    let wstd = w.as_standard_layout();
    let wmat_t = wstd
        .to_shape((cout, cin * kh * kw))
        .expect("weight reshape")
        .t()
        .to_owned();
    let ystd = y.as_standard_layout();
    let ysl = ystd.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cin, h, wid]));
    let sample_in = cout * ho * wo;
    let sample_out = cin * h * wid;
    let out_slice = out.as_slice_mut().unwrap();

    out_slice
        .par_chunks_mut(sample_out.max(1))
        .zip(ysl.par_chunks(sample_in.max(1)))
        .for_each(|(dst, src)| {
            let g = ndarray::ArrayView2::from_shape((cout, ho * wo), src).unwrap();
            let cols = wmat_t.dot(&g);
            col2im(&cols, cin, h, wid, kh, kw, stride, pad, dst);
        });
    out
}

fn conv2d_grad_weight_raw(
    x: &ArrayViewD<f64>,
    y: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> ArrayD<f64> {
    let xs = x.shape();
    let ys = y.shape();
    let (n, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (yn, cout, ho, wo) = (ys[0], ys[1], ys[2], ys[3]);
    assert_eq!(n, yn, "conv2d_grad_weight batch mismatch");
    let (kh, kw) = kernel;
    assert_eq!(ho, conv_output_size(h, kh, stride, pad));
    assert_eq!(wo, conv_output_size(wid, kw, stride, pad));

    let xstd = x.as_standard_layout();
    let xsl = xstd.as_slice().unwrap();
    let ystd = y.as_standard_layout();
    let ysl = ystd.as_slice().unwrap();
    let sample_in = cin * h * wid;
    let sample_out = cout * ho * wo;

    let per_sample = |i: usize| {
        let cols = im2col(&xsl[i * sample_in..(i + 1) * sample_in], cin, h, wid, kh, kw, stride, pad);
        let g = ndarray::ArrayView2::from_shape((cout, ho * wo), &ysl[i * sample_out..(i + 1) * sample_out])
            .unwrap();
        g.dot(&cols.t())
    };

    let acc: Array2<f64> = if fast_parallel() && n > 1 {
        (0..n)
            .into_par_iter()
            .map(per_sample)
            .reduce(|| Array2::zeros((cout, cin * kh * kw)), |a, b| a + b)
    } else {
        let mut acc = Array2::<f64>::zeros((cout, cin * kh * kw));
        for i in 0..n {
            acc += &per_sample(i);
        }
        acc
    };
    acc.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap()
}

impl Tensor {
    /// Convolution of (N, Cin, H, W) with weights (Cout, Cin, kh, kw).
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let value = conv2d_raw(&self.value().view(), &weight.value().view(), stride, pad);
        let in_hw = {
            let s = self.shape();
            (s[2], s[3])
        };
        let kernel = {
            let s = weight.shape();
            (s[2], s[3])
        };
        Tensor::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |out, g| {
                let x = &out.0.parents[0];
                let w = &out.0.parents[1];
                vec![
                    Some(g.conv_transpose2d(w, stride, pad, in_hw)),
                    Some(x.conv2d_grad_weight(g, stride, pad, kernel)),
                ]
            }),
        )
    }

    /// Transposed convolution: input (N, Cout, Ho, Wo), weights
    /// (Cout, Cin, kh, kw), output (N, Cin, H, W) with H, W = `out_hw`.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, pad: usize, out_hw: (usize, usize)) -> Tensor {
        let value = conv_transpose2d_raw(&self.value().view(), &weight.value().view(), stride, pad, out_hw);
        let kernel = {
            let s = weight.shape();
            (s[2], s[3])
        };
        Tensor::from_op(
            value,
            vec![self.clone(), weight.clone()],
            Box::new(move |out, g| {
                let y = &out.0.parents[0];
                let w = &out.0.parents[1];
                vec![
                    Some(g.conv2d(w, stride, pad)),
                    Some(g.conv2d_grad_weight(y, stride, pad, kernel)),
                ]
            }),
        )
    }

    /// Weight cotangent of `conv2d`: `self` plays the input role, `y` the
    /// output-gradient role; result has shape (Cout, Cin, kh, kw).
    pub fn conv2d_grad_weight(&self, y: &Tensor, stride: usize, pad: usize, kernel: (usize, usize)) -> Tensor {
        let value = conv2d_grad_weight_raw(&self.value().view(), &y.value().view(), stride, pad, kernel);
        let in_hw = {
            let s = self.shape();
            (s[2], s[3])
        };
        Tensor::from_op(
            value,
            vec![self.clone(), y.clone()],
            Box::new(move |out, v| {
                let x = &out.0.parents[0];
                let y = &out.0.parents[1];
                vec![
                    Some(y.conv_transpose2d(v, stride, pad, in_hw)),
                    Some(x.conv2d(v, stride, pad)),
                ]
            }),
        )
    }
}
