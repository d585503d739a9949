//! Trainable layers. Models assemble these by hand and expose their
//! parameters as (name, tensor) pairs for optimizers and checkpoints.

use ndarray::IxDyn;
use rand::Rng;

use crate::tensor::Tensor;

/// Weight initialization for layer constructors.
#[derive(Clone, Copy, Debug)]
pub enum WeightInit {
    /// Normal(0, std).
    Normal(f64),
    /// Unit normal; used with runtime weight scaling.
    UnitNormal,
}

impl WeightInit {
    fn sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let std = match self {
            WeightInit::Normal(s) => *s,
            WeightInit::UnitNormal => 1.0,
        };
        Tensor::var(Tensor::randn(shape, std, rng).value().clone())
    }
}

/// Named parameter list builder shared by all layers.
pub type ParamList = Vec<(String, Tensor)>;

pub struct Linear {
    pub weight: Tensor, // (out, in)
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(infeat: usize, out: usize, bias: bool, init: WeightInit, rng: &mut R) -> Self {
        Linear {
            weight: init.sample(&[out, infeat], rng),
            bias: bias.then(|| Tensor::var(ndarray::ArrayD::zeros(IxDyn(&[out])))),
        }
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.weight.transpose2());
        match &self.bias {
            Some(b) => {
                let out = b.len();
                y.add(&b.reshape(&[1, out]))
            }
            None => y,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct Conv2d {
    pub weight: Tensor, // (cout, cin, kh, kw)
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: init.sample(&[cout, cin, kernel, kernel], rng),
            bias: bias.then(|| Tensor::var(ndarray::ArrayD::zeros(IxDyn(&[cout])))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_scaled(x, 1.0)
    }

    /// Forward pass with the weight multiplied by a runtime constant
    /// (equalized learning-rate convs pass sqrt(2 / fan_in) here).
    pub fn forward_scaled(&self, x: &Tensor, scale: f64) -> Tensor {
        let w = if scale == 1.0 { self.weight.clone() } else { self.weight.mul_scalar(scale) };
        let y = x.conv2d(&w, self.stride, self.pad);
        match &self.bias {
            Some(b) => {
                let c = b.len();
                y.add(&b.reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }

    pub fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s[1] * s[2] * s[3]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct ConvTranspose2d {
    pub weight: Tensor, // (cin, cout, kh, kw)
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut R,
    ) -> Self {
        ConvTranspose2d {
            weight: init.sample(&[cin, cout, kernel, kernel], rng),
            bias: bias.then(|| Tensor::var(ndarray::ArrayD::zeros(IxDyn(&[cout])))),
            stride,
            pad,
            output_pad: 0,
        }
    }

    pub fn output_size(&self, input: usize) -> usize {
        let k = self.weight.shape()[2];
        (input - 1) * self.stride + k + self.output_pad - 2 * self.pad
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        let out_hw = (self.output_size(s[2]), self.output_size(s[3]));
        let y = x.conv_transpose2d(&self.weight, self.stride, self.pad, out_hw);
        match &self.bias {
            Some(b) => {
                let c = b.len();
                y.add(&b.reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

/// Batch normalization over (N, H, W) per channel, with running statistics
/// for inference. Scale/offset are trainable; running stats are buffers.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::var(ndarray::ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Tensor::var(ndarray::ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Tensor::constant(ndarray::ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Tensor::constant(ndarray::ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let c = self.gamma.len();
        let gamma = self.gamma.reshape(&[1, c, 1, 1]);
        let beta = self.beta.reshape(&[1, c, 1, 1]);
        if training {
            let mean = x.mean_axes(&[0, 2, 3], true);
            let centered = x.sub(&mean);
            let var = centered.square().mean_axes(&[0, 2, 3], true);
            self.update_running(&mean, &var, x.shape());
            let xhat = centered.div(&var.add_scalar(self.eps).sqrt());
            xhat.mul(&gamma).add(&beta)
        } else {
            let mean = self.running_mean.reshape(&[1, c, 1, 1]);
            let var = self.running_var.reshape(&[1, c, 1, 1]);
            x.sub(&mean).div(&var.add_scalar(self.eps).sqrt()).mul(&gamma).add(&beta)
        }
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, xshape: Vec<usize>) {
        let count = (xshape[0] * xshape[2] * xshape[3]) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.momentum;
        let c = self.gamma.len();
        let new_mean = {
            let rm = self.running_mean.value().clone();
            let bm = mean.value().clone().into_shape_with_order(IxDyn(&[c])).unwrap();
            rm * (1.0 - m) + bm * m
        };
        let new_var = {
            let rv = self.running_var.value().clone();
            let bv = var.value().clone().into_shape_with_order(IxDyn(&[c])).unwrap();
            rv * (1.0 - m) + bv * (m * unbias)
        };
        self.running_mean.set_value(new_mean);
        self.running_var.set_value(new_var);
    }

    pub fn collect_params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    /// Running statistics; persisted in checkpoints but not trained.
    pub fn collect_buffers(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_shape_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(3, 2, true, WeightInit::Normal(0.1), &mut rng);
        let x = Tensor::ones(&[4, 3]);
        assert_eq!(l.forward(&x).shape(), vec![4, 2]);
    }

    #[test]
    fn batchnorm_normalizes_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bn = BatchNorm2d::new(3);
        let x = Tensor::randn(&[4, 3, 5, 5], 2.5, &mut rng);
        let y = bn.forward(&x, true);
        // Per-channel mean ~0, var ~1 after normalization with identity affine.
        let v = y.value();
        for c in 0..3 {
            let ch: Vec<f64> = (0..4)
                .flat_map(|n| {
                    let v = &v;
                    (0..25).map(move |i| v[[n, c, i / 5, i % 5]])
                })
                .collect();
            let mean: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ch.len() as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn conv_transpose_output_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ct = ConvTranspose2d::new(8, 4, 4, 2, 1, false, WeightInit::Normal(0.02), &mut rng);
        assert_eq!(ct.output_size(16), 32);
        let ct0 = ConvTranspose2d::new(8, 4, 4, 1, 0, false, WeightInit::Normal(0.02), &mut rng);
        assert_eq!(ct0.output_size(1), 4);
    }
}
