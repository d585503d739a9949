//! Differentiable operations.
//!
//! Every gradient function here is written in terms of other engine ops, so
//! the output of [`crate::grad`] is itself a differentiable graph.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use crate::tensor::Tensor;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {:?} and {:?} are not broadcastable",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

fn unary(
    input: &Tensor,
    value: ArrayD<f64>,
    grad_fn: impl Fn(&Tensor, &Tensor) -> Tensor + 'static,
) -> Tensor {
    Tensor::from_op(
        value,
        vec![input.clone()],
        Box::new(move |out, g| vec![Some(grad_fn(out, g))]),
    )
}

impl Tensor {
    fn broadcast_pair(&self, other: &Tensor) -> (Tensor, Tensor) {
        let sa = self.shape();
        let sb = other.shape();
        if sa == sb {
            return (self.clone(), other.clone());
        }
        let bs = broadcast_shape(&sa, &sb);
        let a = if sa == bs { self.clone() } else { self.broadcast_to(&bs) };
        let b = if sb == bs { other.clone() } else { other.broadcast_to(&bs) };
        (a, b)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let value = &*a.value() + &*b.value();
        Tensor::from_op(
            value,
            vec![a, b],
            Box::new(|_, g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let value = &*a.value() - &*b.value();
        Tensor::from_op(
            value,
            vec![a, b],
            Box::new(|_, g| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let value = &*a.value() * &*b.value();
        Tensor::from_op(
            value,
            vec![a, b],
            Box::new(|out, g| {
                let a = &out.0.parents[0];
                let b = &out.0.parents[1];
                vec![Some(g.mul(b)), Some(g.mul(a))]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let value = &*a.value() / &*b.value();
        Tensor::from_op(
            value,
            vec![a, b],
            Box::new(|out, g| {
                let b = &out.0.parents[1];
                let da = g.div(b);
                let db = g.mul(out).div(b).neg();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        unary(self, self.value().mapv(|v| -v), |_, g| g.neg())
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, self.value().mapv(|v| v + c), |_, g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, self.value().mapv(|v| v * c), move |_, g| g.mul_scalar(c))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, self.value().mapv(f64::exp), |out, g| g.mul(out))
    }

    pub fn ln(&self) -> Tensor {
        unary(self, self.value().mapv(f64::ln), |out, g| g.div(&out.0.parents[0]))
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, self.value().mapv(f64::sqrt), |out, g| {
            g.mul_scalar(0.5).div(out)
        })
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, self.value().mapv(|v| v.powf(p)), move |out, g| {
            g.mul(&out.0.parents[0].powf(p - 1.0).mul_scalar(p))
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, self.value().mapv(|v| v * v), |out, g| {
            g.mul(&out.0.parents[0]).mul_scalar(2.0)
        })
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, self.value().mapv(f64::tanh), |out, g| {
            g.mul(&out.square().neg().add_scalar(1.0))
        })
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        unary(self, value, |out, g| {
            g.mul(out).mul(&out.neg().add_scalar(1.0))
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask = Tensor::constant(self.value().mapv(|v| if v > 0.0 { 1.0 } else { slope }));
        let value = self.value().mapv(|v| if v > 0.0 { v } else { slope * v });
        unary(self, value, move |_, g| g.mul(&mask))
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(self.len(), n, "reshape {:?} -> {:?}", self.shape(), shape);
        let old = self.shape();
        let value = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape failed");
        unary(self, value, move |_, g| g.reshape(&old))
    }

    /// Numpy-style broadcast to a larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let src_shape = self.shape();
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", src_shape, shape))
            .to_owned();
        let out_shape = shape.to_vec();
        unary(self, value, move |_, g| {
            // Reduce the upstream gradient over every broadcast axis.
            let offset = out_shape.len() - src_shape.len();
            let mut axes: Vec<usize> = (0..offset).collect();
            for (i, &d) in src_shape.iter().enumerate() {
                if d == 1 && out_shape[offset + i] > 1 {
                    axes.push(offset + i);
                }
            }
            g.sum_axes(&axes, true).reshape(&src_shape)
        })
    }

    /// Sum over the given axes. With `keepdim` the reduced axes stay as 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let in_shape = self.shape();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut value = self.value().clone();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax));
        }
        if keepdim {
            for &ax in sorted.iter() {
                value = value.insert_axis(Axis(ax));
            }
        }
        let keep_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if sorted.contains(&i) { 1 } else { d })
            .collect();
        unary(self, value, move |_, g| {
            g.reshape(&keep_shape).broadcast_to(&in_shape)
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let shape = self.shape();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let n: usize = sorted.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keepdim).mul_scalar(1.0 / n as f64)
    }

    pub fn sum_all(&self) -> Tensor {
        let in_shape = self.shape();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        unary(self, value, move |_, g| {
            g.reshape(&vec![1; in_shape.len()]).broadcast_to(&in_shape)
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "transpose2 expects a matrix");
        let value = self.value().clone().reversed_axes().as_standard_layout().to_owned();
        unary(self, value, |_, g| g.transpose2())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.ndim(), 2, "matmul rhs must be 2-D");
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimension mismatch");
        let value = a2.dot(&b2).into_dyn();
        drop(a);
        drop(b);
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|out, g| {
                let a = &out.0.parents[0];
                let b = &out.0.parents[1];
                vec![
                    Some(g.matmul(&b.transpose2())),
                    Some(a.transpose2().matmul(g)),
                ]
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.0.value.borrow()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(axis), &view_refs).expect("concat shape mismatch");
        drop(views);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    grads.push(Some(g.slice_axis(axis, start, start + s)));
                    start += s;
                }
                grads
            }),
        )
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let shape = self.shape();
        assert!(end <= shape[axis] && start < end, "slice out of range");
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let total = shape[axis];
        unary(self, value, move |out, g| {
            // Scatter the gradient back by padding with zeros on either side.
            let in_shape = out.0.parents[0].shape();
            let mut parts: Vec<Tensor> = Vec::new();
            if start > 0 {
                let mut s = in_shape.clone();
                s[axis] = start;
                parts.push(Tensor::zeros(&s));
            }
            parts.push(g.clone());
            if end < total {
                let mut s = in_shape.clone();
                s[axis] = total - end;
                parts.push(Tensor::zeros(&s));
            }
            Tensor::concat(&parts, axis)
        })
    }

    /// Nearest-neighbour 2x upsampling of an (N, C, H, W) tensor.
    pub fn upsample_nearest2(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "upsample_nearest2 expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value();
        let src = src.as_standard_layout();
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        {
            let s = src.as_slice().unwrap();
            let o = out.as_slice_mut().unwrap();
            for img in 0..n * c {
                let sbase = img * h * w;
                let obase = img * 4 * h * w;
                for i in 0..2 * h {
                    let si = i / 2;
                    for j in 0..2 * w {
                        o[obase + i * 2 * w + j] = s[sbase + si * w + j / 2];
                    }
                }
            }
        }
        drop(src);
        unary(self, out, |_, g| g.avg_pool2().mul_scalar(4.0))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&self) -> Tensor {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "avg_pool2 expects NCHW");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let src = self.value();
        let src = src.as_standard_layout();
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h / 2, w / 2]));
        {
            let s = src.as_slice().unwrap();
            let o = out.as_slice_mut().unwrap();
            for img in 0..n * c {
                let sbase = img * h * w;
                let obase = img * (h / 2) * (w / 2);
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let tl = sbase + 2 * i * w + 2 * j;
                        o[obase + i * (w / 2) + j] =
                            0.25 * (s[tl] + s[tl + 1] + s[tl + w] + s[tl + w + 1]);
                    }
                }
            }
        }
        drop(src);
        unary(self, out, |_, g| g.upsample_nearest2().mul_scalar(0.25))
    }
}
