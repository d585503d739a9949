//! Adam optimizer.

use ndarray::ArrayD;

use crate::tensor::Tensor;

/// Adam over a fixed parameter list. Slot state can be exported and
/// restored bit-exactly for checkpointing.
pub struct Adam {
    params: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        Adam { params, lr, beta1, beta2, eps: 1e-8, t: 0, m, v }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Apply one update. `grads` must align with the parameter list.
    pub fn step(&mut self, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.params.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in self
            .params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.value();
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut new = p.value().clone();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.set_value(new);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Slot state as (m, v) pairs aligned with the parameter list.
    pub fn export_state(&self) -> (u64, Vec<(ArrayD<f64>, ArrayD<f64>)>) {
        (
            self.t,
            self.m.iter().cloned().zip(self.v.iter().cloned()).collect(),
        )
    }

    pub fn import_state(&mut self, t: u64, slots: Vec<(ArrayD<f64>, ArrayD<f64>)>) {
        assert_eq!(slots.len(), self.params.len(), "optimizer state size mismatch");
        self.t = t;
        for (i, (m, v)) in slots.into_iter().enumerate() {
            assert_eq!(m.shape(), self.m[i].shape(), "optimizer slot shape mismatch");
            self.m[i] = m;
            self.v[i] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(vec![x.clone()], 0.1, 0.9, 0.999);
        for _ in 0..200 {
            let loss = x.square().sum_all();
            let g = grad(&loss, &[&x]);
            opt.step(&g);
        }
        assert!(x.item().abs() < 1e-2);
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let x = Tensor::var(ArrayD::from_elem(IxDyn(&[3]), 1.25));
        let before = x.to_vec();
        let mut opt = Adam::new(vec![x.clone()], 0.0, 0.5, 0.999);
        let loss = x.square().sum_all();
        let g = grad(&loss, &[&x]);
        opt.step(&g);
        let after = x.to_vec();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn state_roundtrip_preserves_trajectory() {
        let make = || Tensor::var(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let run = |steps_before: usize, steps_after: usize| -> Vec<f64> {
            let x = make();
            let mut opt = Adam::new(vec![x.clone()], 0.05, 0.9, 0.999);
            for _ in 0..steps_before {
                let g = grad(&x.square().sum_all(), &[&x]);
                opt.step(&g);
            }
            let (t, slots) = opt.export_state();
            let saved = x.value().clone();

            // Fresh optimizer + restored state must continue identically.
            let x2 = Tensor::var(saved);
            let mut opt2 = Adam::new(vec![x2.clone()], 0.05, 0.9, 0.999);
            opt2.import_state(t, slots);
            for _ in 0..steps_after {
                let g = grad(&x2.square().sum_all(), &[&x2]);
                opt2.step(&g);
            }
            x2.to_vec()
        };
        let direct = {
            let x = make();
            let mut opt = Adam::new(vec![x.clone()], 0.05, 0.9, 0.999);
            for _ in 0..7 {
                let g = grad(&x.square().sum_all(), &[&x]);
                opt.step(&g);
            }
            x.to_vec()
        };
        assert_eq!(run(3, 4), direct);
    }
}
