//! Progressive-growing GAN from 4x4 up to 128x128 with pixel normalization,
//! equalized weight scaling, minibatch standard deviation, fade-in blending
//! and WGAN-GP losses.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use scoreforge_autograd::grad;
use scoreforge_autograd::nn::{Conv2d, ConvTranspose2d, Linear, ParamList, WeightInit};
use scoreforge_autograd::Tensor;

use crate::dataprep::{load_batch, DatasetManifest, Split};
use crate::dcgan::{epoch_batches, resume_log, TrainOutcome};
use crate::error::{Error, Result};
use crate::traincore::{
    checkpoint_path, load_optimizer, load_tensors, make_optimizer, seed_all, store_optimizer,
    store_tensors, Checkpoint, LossLog, ModelKind, OptTarget, RunRng, TrainConfig,
};

const LEAK: f64 = 0.2;
pub const PIXEL_NORM_EPS: f64 = 1e-8;
pub const STDDEV_EPS: f64 = 1e-8;

/// Per-pixel feature normalization: x / sqrt(mean_c(x^2) + eps).
pub fn pixel_norm(x: &Tensor, eps: f64) -> Tensor {
    let denom = x.square().mean_axes(&[1], true).add_scalar(eps).sqrt();
    x.div(&denom)
}

/// Append one channel holding the batch-wide feature variability: the mean
/// over all (C, H, W) positions of the per-position population standard
/// deviation across the batch, constant over the whole appended channel.
pub fn minibatch_stddev(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let mean = x.mean_axes(&[0], true);
    let var = x.sub(&mean).square().mean_axes(&[0], true);
    let std = var.add_scalar(STDDEV_EPS).sqrt();
    let scalar = std.mean_all();
    let channel = scalar.reshape(&[1, 1, 1, 1]).broadcast_to(&[n, 1, h, w]);
    Tensor::concat(&[x.clone(), channel], 1)
}

/// Runtime weight scale for equalized learning rate: sqrt(2 / fan_in).
pub fn equalized_scale(fan_in: usize) -> f64 {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    (2.0 / fan_in as f64).sqrt()
}

/// alpha * new + (1 - alpha) * prev, elementwise.
pub fn fade_in_blend(prev: &Tensor, new: &Tensor, alpha: f64) -> Result<Tensor> {
    if prev.shape() != new.shape() {
        return Err(Error::InvalidInput(format!(
            "fade_in_blend shape mismatch: {:?} vs {:?}",
            prev.shape(),
            new.shape()
        )));
    }
    Ok(new.mul_scalar(alpha).add(&prev.mul_scalar(1.0 - alpha)))
}

/// Fade-in coefficient after `step` steps of a stage with `total` steps:
/// a linear ramp over the first `fraction` of the stage, then 1.
pub fn fade_alpha(step: u64, total: u64, fraction: f64) -> f64 {
    let fade_steps = (total as f64 * fraction).floor() as u64;
    if fade_steps == 0 {
        1.0
    } else {
        (step as f64 / fade_steps as f64).min(1.0)
    }
}

/// WGAN-GP penalty: lambda * E[(||grad_xhat D(xhat)||_2 - 1)^2] with xhat
/// sampled uniformly on the segment between paired real and fake images.
/// The returned tensor is differentiable with respect to the critic
/// parameters (gradient-of-gradient), so it can be trained through.
pub fn gradient_penalty(
    critic: impl Fn(&Tensor) -> Tensor,
    real: &Tensor,
    fake: &Tensor,
    lambda_gp: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    assert_eq!(real.shape(), fake.shape(), "gradient_penalty batch shape mismatch");
    let s = real.shape();
    let n = s[0];
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let u = Tensor::from_vec(&[n, 1, 1, 1], u);
    let xhat = Tensor::var(
        real.mul(&u.broadcast_to(&s))
            .add(&fake.mul(&u.neg().add_scalar(1.0).broadcast_to(&s)))
            .value()
            .clone(),
    );
    let score = critic(&xhat).sum_all();
    let gx = grad(&score, &[&xhat]).remove(0);
    // Tiny guard keeps the norm differentiable at zero gradients.
    let norm = gx.square().sum_axes(&[1, 2, 3], false).add_scalar(1e-12).sqrt();
    norm.add_scalar(-1.0).square().mean_all().mul_scalar(lambda_gp)
}

/// Wasserstein critic loss: -E[D(real)] + E[D(fake)] + gp.
pub fn critic_loss(d_real: &Tensor, d_fake: &Tensor, gp: &Tensor) -> Tensor {
    d_real.mean_all().neg().add(&d_fake.mean_all()).add(gp)
}

/// Wasserstein generator loss: -E[D(fake)].
pub fn gen_loss(d_fake: &Tensor) -> Tensor {
    d_fake.mean_all().neg()
}

/// Resolutions, epochs and batch sizes for each growth stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthSchedule {
    pub resolutions: Vec<usize>,
    pub epochs_per_stage: Vec<usize>,
    pub batch_per_stage: Vec<usize>,
    pub fade_in_fraction: f64,
}

impl GrowthSchedule {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let stages = config.stage_count();
        let resolutions: Vec<usize> = (0..stages).map(|s| 4usize << s).collect();
        Ok(GrowthSchedule {
            resolutions,
            epochs_per_stage: config.stage_epochs(),
            batch_per_stage: config.stage_batches(),
            fade_in_fraction: config.fade_in_fraction,
        })
    }

    pub fn stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_per_stage.iter().sum()
    }

    /// Stage index for a 1-based global epoch.
    pub fn stage_of_epoch(&self, epoch: u64) -> usize {
        let mut acc = 0u64;
        for (s, &e) in self.epochs_per_stage.iter().enumerate() {
            acc += e as u64;
            if epoch <= acc {
                return s;
            }
        }
        self.stages() - 1
    }

    /// Epochs completed before the given stage starts.
    pub fn epochs_before_stage(&self, stage: usize) -> u64 {
        self.epochs_per_stage[..stage].iter().map(|&e| e as u64).sum()
    }
}

/// Channel width for one stage, halving from stage 3 onward.
fn stage_channels(base: usize, stage: usize) -> usize {
    (base >> stage.saturating_sub(2)).max(4)
}

/// Generator growing from 4x4 to the configured resolution. All convs use
/// equalized weight scaling; pixel norm follows every activation.
pub struct ProganGenerator {
    pub latent_dim: usize,
    channels: Vec<usize>,
    base_ct: ConvTranspose2d,
    base_conv: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    to_gray: Vec<Conv2d>,
}

impl ProganGenerator {
    pub fn new(latent_dim: usize, base: usize, stages: usize, rng: &mut ChaCha8Rng) -> Self {
        let channels: Vec<usize> = (0..stages).map(|s| stage_channels(base, s)).collect();
        let init = WeightInit::UnitNormal;
        let base_ct = ConvTranspose2d::new(latent_dim, channels[0], 4, 1, 0, true, init, rng);
        let base_conv = Conv2d::new(channels[0], channels[0], 3, 1, 1, true, init, rng);
        let mut blocks = Vec::new();
        for s in 1..stages {
            let a = Conv2d::new(channels[s - 1], channels[s], 3, 1, 1, true, init, rng);
            let b = Conv2d::new(channels[s], channels[s], 3, 1, 1, true, init, rng);
            blocks.push((a, b));
        }
        let to_gray = (0..stages)
            .map(|s| Conv2d::new(channels[s], 1, 1, 1, 0, true, init, rng))
            .collect();
        ProganGenerator { latent_dim, channels, base_ct, base_conv, blocks, to_gray }
    }

    pub fn stages(&self) -> usize {
        self.to_gray.len()
    }

    fn eq_ct(&self, x: &Tensor) -> Tensor {
        // Transposed conv fan-in counts input channels times kernel area.
        let w = self.base_ct.weight.shape();
        let scale = equalized_scale(w[0] * w[2] * w[3]);
        let s = x.shape();
        let out_hw = (self.base_ct.output_size(s[2]), self.base_ct.output_size(s[3]));
        let y = x.conv_transpose2d(&self.base_ct.weight.mul_scalar(scale), 1, 0, out_hw);
        let b = self.base_ct.bias.as_ref().unwrap();
        y.add(&b.reshape(&[1, b.len(), 1, 1]))
    }

    fn features(&self, z: &Tensor, stage: usize) -> Vec<Tensor> {
        let n = z.shape()[0];
        let z = pixel_norm(&z.reshape(&[n, self.latent_dim, 1, 1]), PIXEL_NORM_EPS);
        let x = pixel_norm(&self.eq_ct(&z).leaky_relu(LEAK), PIXEL_NORM_EPS);
        let x = pixel_norm(
            &self.base_conv.forward_scaled(&x, equalized_scale(self.base_conv.fan_in())).leaky_relu(LEAK),
            PIXEL_NORM_EPS,
        );
        let mut feats = vec![x];
        for s in 1..=stage {
            let (a, b) = &self.blocks[s - 1];
            let up = feats[s - 1].upsample_nearest2();
            let x = pixel_norm(&a.forward_scaled(&up, equalized_scale(a.fan_in())).leaky_relu(LEAK), PIXEL_NORM_EPS);
            let x = pixel_norm(&b.forward_scaled(&x, equalized_scale(b.fan_in())).leaky_relu(LEAK), PIXEL_NORM_EPS);
            feats.push(x);
        }
        feats
    }

    fn gray(&self, feat: &Tensor, stage: usize) -> Tensor {
        let conv = &self.to_gray[stage];
        conv.forward_scaled(feat, equalized_scale(conv.fan_in()))
    }

    /// z: (N, latent_dim) -> (N, 1, 4 * 2^stage, 4 * 2^stage).
    ///
    /// During fade-in the output blends the upsampled previous-stage image
    /// with the new stage's image: alpha=0 reproduces the previous stage.
    pub fn forward(&self, z: &Tensor, stage: usize, alpha: f64) -> Tensor {
        assert!(stage < self.stages(), "stage {stage} out of range");
        let feats = self.features(z, stage);
        let new = self.gray(&feats[stage], stage);
        if stage == 0 || alpha >= 1.0 {
            return new;
        }
        let prev = self.gray(&feats[stage - 1], stage - 1).upsample_nearest2();
        fade_in_blend(&prev, &new, alpha).expect("blend shapes agree by construction")
    }

    pub fn named_params(&self) -> ParamList {
        let mut out = Vec::new();
        self.base_ct.collect_params("g.base.ct", &mut out);
        self.base_conv.collect_params("g.base.conv", &mut out);
        for (s, (a, b)) in self.blocks.iter().enumerate() {
            a.collect_params(&format!("g.block{}.a", s + 1), &mut out);
            b.collect_params(&format!("g.block{}.b", s + 1), &mut out);
        }
        for (s, t) in self.to_gray.iter().enumerate() {
            t.collect_params(&format!("g.to_gray{s}"), &mut out);
        }
        out
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }
}

/// Wasserstein critic mirroring the generator, with a minibatch-stddev
/// channel before the final block and a raw scalar output (no sigmoid).
pub struct ProganCritic {
    channels: Vec<usize>,
    from_gray: Vec<Conv2d>,
    blocks: Vec<(Conv2d, Conv2d)>,
    final_conv3: Conv2d,
    final_conv4: Conv2d,
    head: Linear,
}

impl ProganCritic {
    pub fn new(base: usize, stages: usize, rng: &mut ChaCha8Rng) -> Self {
        let channels: Vec<usize> = (0..stages).map(|s| stage_channels(base, s)).collect();
        let init = WeightInit::UnitNormal;
        let from_gray = (0..stages)
            .map(|s| Conv2d::new(1, channels[s], 1, 1, 0, true, init, rng))
            .collect();
        let mut blocks = Vec::new();
        for s in 1..stages {
            let a = Conv2d::new(channels[s], channels[s], 3, 1, 1, true, init, rng);
            let b = Conv2d::new(channels[s], channels[s - 1], 3, 1, 1, true, init, rng);
            blocks.push((a, b));
        }
        let final_conv3 = Conv2d::new(channels[0] + 1, channels[0], 3, 1, 1, true, init, rng);
        let final_conv4 = Conv2d::new(channels[0], channels[0], 4, 1, 0, true, init, rng);
        let head = Linear::new(channels[0], 1, true, init, rng);
        ProganCritic { channels, from_gray, blocks, final_conv3, final_conv4, head }
    }

    pub fn stages(&self) -> usize {
        self.from_gray.len()
    }

    fn ingest(&self, x: &Tensor, stage: usize) -> Tensor {
        let conv = &self.from_gray[stage];
        conv.forward_scaled(x, equalized_scale(conv.fan_in())).leaky_relu(LEAK)
    }

    fn block(&self, x: &Tensor, stage: usize) -> Tensor {
        let (a, b) = &self.blocks[stage - 1];
        let x = a.forward_scaled(x, equalized_scale(a.fan_in())).leaky_relu(LEAK);
        let x = b.forward_scaled(&x, equalized_scale(b.fan_in())).leaky_relu(LEAK);
        x.avg_pool2()
    }

    /// images at stage resolution -> raw scores (N,).
    pub fn forward(&self, x: &Tensor, stage: usize, alpha: f64) -> Tensor {
        assert!(stage < self.stages(), "stage {stage} out of range");
        let mut h = if stage == 0 {
            self.ingest(x, 0)
        } else {
            let new = self.block(&self.ingest(x, stage), stage);
            if alpha >= 1.0 {
                new
            } else {
                let old = self.ingest(&x.avg_pool2(), stage - 1);
                fade_in_blend(&old, &new, alpha).expect("blend shapes agree by construction")
            }
        };
        for s in (1..stage).rev() {
            h = self.block(&h, s);
        }
        let h = minibatch_stddev(&h);
        let h = self
            .final_conv3
            .forward_scaled(&h, equalized_scale(self.final_conv3.fan_in()))
            .leaky_relu(LEAK);
        let h = self
            .final_conv4
            .forward_scaled(&h, equalized_scale(self.final_conv4.fan_in()))
            .leaky_relu(LEAK);
        let n = h.shape()[0];
        let c = self.channels[0];
        self.head.forward(&h.reshape(&[n, c])).reshape(&[n])
    }

    pub fn named_params(&self) -> ParamList {
        let mut out = Vec::new();
        for (s, t) in self.from_gray.iter().enumerate() {
            t.collect_params(&format!("d.from_gray{s}"), &mut out);
        }
        for (s, (a, b)) in self.blocks.iter().enumerate() {
            a.collect_params(&format!("d.block{}.a", s + 1), &mut out);
            b.collect_params(&format!("d.block{}.b", s + 1), &mut out);
        }
        self.final_conv3.collect_params("d.final3", &mut out);
        self.final_conv4.collect_params("d.final4", &mut out);
        self.head.collect_params("d.head", &mut out);
        out
    }
}

struct ProganState {
    gen: ProganGenerator,
    critic: ProganCritic,
}

impl ProganState {
    fn build(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let stages = config.stage_count();
        ProganState {
            gen: ProganGenerator::new(config.latent_dim, config.base_channels, stages, rng),
            critic: ProganCritic::new(config.base_channels, stages, rng),
        }
    }

    fn all_tensors(&self) -> ParamList {
        let mut all = self.gen.named_params();
        all.extend(self.critic.named_params());
        all
    }
}

/// Train ProGAN through its growth schedule with WGAN-GP.
pub fn train_progan(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model != ModelKind::Progan {
        return Err(Error::Config(format!("expected a progan config, got {}", config.model)));
    }
    if manifest.count() == 0 {
        return Err(Error::Config("manifest is empty; nothing to train on".into()));
    }
    if (manifest.crop_size as usize) < config.resolution {
        return Err(Error::Config(format!(
            "crops of size {} cannot serve the final resolution {}",
            manifest.crop_size, config.resolution
        )));
    }
    let schedule = GrowthSchedule::from_config(config)?;
    let train_indices = manifest.indices_for(Split::Train);
    let max_batch = schedule.batch_per_stage.iter().copied().max().unwrap();
    if train_indices.len() < max_batch {
        return Err(Error::Config(format!(
            "train split has {} crops, smaller than the largest stage batch of {max_batch}",
            train_indices.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    scoreforge_autograd::conv::set_fast_parallel(config.fast);

    let columns = ["loss_d", "loss_g", "gp", "stage", "alpha"];
    let (mut rng, state, mut log, start_epoch, mut step) = match &resume {
        Some(ck) => {
            if ck.model != ModelKind::Progan {
                return Err(Error::Config(format!("checkpoint is for {}, not progan", ck.model)));
            }
            let mut rng = RunRng::restore(&ck.rng);
            let state = ProganState::build(&ck.config, &mut rng.weights);
            load_tensors(&ck.tensors, &state.all_tensors())?;
            let log = resume_log(out_dir, &columns, ck.step)?;
            (rng, state, log, ck.epoch + 1, ck.step)
        }
        None => {
            let mut rng = seed_all(config.seed);
            let state = ProganState::build(config, &mut rng.weights);
            (rng, state, LossLog::new(&columns), 1, 0)
        }
    };

    let g_params: Vec<_> = state.gen.named_params().into_iter().map(|(_, t)| t).collect();
    let d_params: Vec<_> = state.critic.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt_g = make_optimizer(config, OptTarget::Generator, g_params.clone())?;
    let mut opt_d = make_optimizer(config, OptTarget::Discriminator, d_params.clone())?;
    if let Some(ck) = &resume {
        load_optimizer(&ck.tensors, &ck.opt_steps, "g", &mut opt_g)?;
        load_optimizer(&ck.tensors, &ck.opt_steps, "d", &mut opt_d)?;
    }

    let total_epochs = schedule.total_epochs() as u64;
    let mut last_ckpt = checkpoint_path(out_dir, start_epoch.saturating_sub(1));
    for epoch in start_epoch..=total_epochs {
        let stage = schedule.stage_of_epoch(epoch);
        let resolution = schedule.resolutions[stage];
        let batch_size = schedule.batch_per_stage[stage];
        let steps_per_epoch = (train_indices.len() / batch_size) as u64;
        let stage_total_steps = schedule.epochs_per_stage[stage] as u64 * steps_per_epoch;
        let epoch_in_stage = epoch - schedule.epochs_before_stage(stage) - 1;

        let mut shuffle = rng.shuffle_rng(epoch);
        for (bi, batch) in epoch_batches(&train_indices, batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            step += 1;
            let step_in_stage = epoch_in_stage * steps_per_epoch + bi as u64;
            let alpha = if stage == 0 {
                1.0
            } else {
                fade_alpha(step_in_stage, stage_total_steps, schedule.fade_in_fraction)
            };

            let real = Tensor::constant(
                load_batch(manifest, data_dir, &batch, resolution)?.into_dyn(),
            );
            let z = Tensor::randn(&[batch_size, config.latent_dim], 1.0, &mut rng.latent);
            let fake = state.gen.forward(&z, stage, alpha);
            let fake_detached = fake.detach();

            let d_real = state.critic.forward(&real, stage, alpha);
            let d_fake = state.critic.forward(&fake_detached, stage, alpha);
            let gp = gradient_penalty(
                |x| state.critic.forward(x, stage, alpha),
                &real,
                &fake_detached,
                config.lambda_gp,
                &mut rng.gp,
            );
            let loss_d = critic_loss(&d_real, &d_fake, &gp);
            let d_grads = grad(&loss_d, &d_params.iter().collect::<Vec<_>>());
            opt_d.step(&d_grads);

            let mut loss_g_value = f64::NAN;
            if (step % config.n_critic as u64) == 0 {
                let d_fake_g = state.critic.forward(&fake, stage, alpha);
                let loss_g = gen_loss(&d_fake_g);
                let g_grads = grad(&loss_g, &g_params.iter().collect::<Vec<_>>());
                opt_g.step(&g_grads);
                loss_g_value = loss_g.item();
            }
            if loss_g_value.is_nan() {
                // Off-cycle generator steps log the previous value's slot as 0.
                loss_g_value = 0.0;
            }

            log.append(
                step,
                epoch,
                &[loss_d.item(), loss_g_value, gp.item(), stage as f64, alpha],
            )?;
        }

        let ckpt = build_checkpoint(config, &state, &opt_g, &opt_d, epoch, step, stage as u32, &rng);
        last_ckpt = checkpoint_path(out_dir, epoch);
        ckpt.save(&last_ckpt)?;
        log.write_csv(&out_dir.join("losslog.csv"))?;
    }

    let log_path = out_dir.join("losslog.csv");
    log.write_csv(&log_path)?;
    Ok(TrainOutcome { checkpoint: last_ckpt, log_path, log })
}

fn build_checkpoint(
    config: &TrainConfig,
    state: &ProganState,
    opt_g: &scoreforge_autograd::Adam,
    opt_d: &scoreforge_autograd::Adam,
    epoch: u64,
    step: u64,
    stage: u32,
    rng: &RunRng,
) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    let mut opt_steps = BTreeMap::new();
    store_tensors(&mut tensors, &state.all_tensors());
    store_optimizer(&mut tensors, &mut opt_steps, "g", opt_g);
    store_optimizer(&mut tensors, &mut opt_steps, "d", opt_d);
    Checkpoint {
        model: ModelKind::Progan,
        config: config.clone(),
        epoch,
        step,
        stage,
        rng: rng.state(),
        tensors,
        opt_steps,
    }
}

/// Rebuild a trained generator (and its recorded stage) from a checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<(ProganGenerator, u32)> {
    if ck.model != ModelKind::Progan {
        return Err(Error::Config(format!("checkpoint is for {}, not progan", ck.model)));
    }
    let mut rng = RunRng::restore(&ck.rng);
    let state = ProganState::build(&ck.config, &mut rng.weights);
    load_tensors(&ck.tensors, &state.all_tensors())?;
    Ok((state.gen, ck.stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng() -> ChaCha8Rng {
        seed_all(13).weights
    }

    #[test]
    fn pixel_norm_cases() {
        // All-ones channel vector stays put (up to epsilon).
        let ones = Tensor::ones(&[1, 3, 1, 1]);
        for v in pixel_norm(&ones, PIXEL_NORM_EPS).to_vec() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-8);
        }

        // (3, 4) over two channels divides by sqrt(12.5).
        let x = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 4.0]);
        let y = pixel_norm(&x, PIXEL_NORM_EPS).to_vec();
        assert_abs_diff_eq!(y[0], 3.0 / 12.5f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], 4.0 / 12.5f64.sqrt(), epsilon = 1e-9);

        // Zero vectors survive thanks to epsilon.
        let z = Tensor::zeros(&[1, 4, 2, 2]);
        assert!(pixel_norm(&z, PIXEL_NORM_EPS).to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_norm_unit_mean_square() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 8, 3, 3], 2.0, &mut r);
        let y = pixel_norm(&x, PIXEL_NORM_EPS);
        let v = y.value();
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let ms: f64 = (0..8).map(|c| v[[n, c, i, j]].powi(2)).sum::<f64>() / 8.0;
                    assert_abs_diff_eq!(ms, 1.0, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn minibatch_stddev_cases() {
        // Identical images: appended channel ~ 0.
        let x = Tensor::ones(&[3, 2, 2, 2]);
        let y = minibatch_stddev(&x);
        assert_eq!(y.shape(), vec![3, 3, 2, 2]);
        let v = y.value();
        for n in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!(v[[n, 2, i, j]] <= STDDEV_EPS.sqrt());
                }
            }
        }

        // N=2 with values {0, 2}: population std 1.
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 2.0]);
        let y = minibatch_stddev(&x);
        assert_abs_diff_eq!(y.value()[[0, 1, 0, 0]], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(y.value()[[1, 1, 0, 0]], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn minibatch_stddev_channel_is_constant() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3, 5, 5], 1.3, &mut r);
        let y = minibatch_stddev(&x);
        let v = y.value();
        let first = v[[0, 3, 0, 0]];
        for n in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(v[[n, 3, i, j]], first);
                }
            }
        }
    }

    #[test]
    fn equalized_scale_values() {
        assert_eq!(equalized_scale(2), 1.0);
        assert_eq!(equalized_scale(8), 0.5);
    }

    #[test]
    fn equalized_layer_matches_premultiplied_weights() {
        let mut r = rng();
        let conv = Conv2d::new(3, 5, 3, 1, 1, true, WeightInit::UnitNormal, &mut r);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
        let scale = equalized_scale(conv.fan_in());
        let scaled = conv.forward_scaled(&x, scale);

        let pre = Conv2d {
            weight: Tensor::var(conv.weight.value().mapv(|v| v * scale)),
            bias: conv.bias.as_ref().map(|b| Tensor::var(b.value().clone())),
            stride: 1,
            pad: 1,
        };
        let direct = pre.forward(&x);
        for (a, b) in scaled.to_vec().iter().zip(direct.to_vec()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-6);
        }
    }

    #[test]
    fn fade_blend_endpoints_and_midpoint() {
        let prev = Tensor::zeros(&[1, 1, 2, 2]);
        let new = Tensor::full(&[1, 1, 2, 2], 2.0);
        assert_eq!(fade_in_blend(&prev, &new, 0.0).unwrap().to_vec(), vec![0.0; 4]);
        assert_eq!(fade_in_blend(&prev, &new, 1.0).unwrap().to_vec(), vec![2.0; 4]);
        assert_eq!(fade_in_blend(&prev, &new, 0.5).unwrap().to_vec(), vec![1.0; 4]);
        assert!(fade_in_blend(&prev, &Tensor::zeros(&[1, 1, 4, 4]), 0.5).is_err());
    }

    #[test]
    fn fade_alpha_schedule_endpoints() {
        let total = 10;
        assert_eq!(fade_alpha(0, total, 0.5), 0.0);
        assert_eq!(fade_alpha(5, total, 0.5), 1.0);
        assert_eq!(fade_alpha(9, total, 0.5), 1.0);
        let mut prev = -1.0;
        for t in 0..total {
            let a = fade_alpha(t, total, 0.5);
            assert!(a >= prev);
            prev = a;
        }
        assert_eq!(fade_alpha(0, 5, 0.0), 1.0);
    }

    #[test]
    fn gradient_penalty_linear_critics() {
        let mut r = rng();
        let mut gp_rng = seed_all(5).gp;
        let real = Tensor::randn(&[4, 1, 4, 4], 1.0, &mut r);
        let fake = Tensor::randn(&[4, 1, 4, 4], 1.0, &mut r);

        // Unit-norm linear critic: penalty 0.
        let w1 = {
            let mut w = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r).value().clone();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.mapv_inplace(|v| v / norm);
            Tensor::constant(w)
        };
        let gp = gradient_penalty(
            |x| {
                let n = x.shape()[0];
                x.conv2d(&w1, 1, 0).reshape(&[n])
            },
            &real,
            &fake,
            10.0,
            &mut gp_rng,
        );
        assert_abs_diff_eq!(gp.item(), 0.0, epsilon = 1e-6);

        // Norm-3 linear critic: 10 * (3 - 1)^2 = 40.
        let w3 = Tensor::constant(w1.value().mapv(|v| 3.0 * v));
        let gp = gradient_penalty(
            |x| {
                let n = x.shape()[0];
                x.conv2d(&w3, 1, 0).reshape(&[n])
            },
            &real,
            &fake,
            10.0,
            &mut gp_rng,
        );
        assert_abs_diff_eq!(gp.item(), 40.0, epsilon = 1e-4);

        // Constant critic: zero gradient, penalty lambda.
        let gp = gradient_penalty(
            |x| Tensor::zeros(&[x.shape()[0]]).add(&x.sum_axes(&[1, 2, 3], false).mul_scalar(0.0)),
            &real,
            &fake,
            10.0,
            &mut gp_rng,
        );
        assert_abs_diff_eq!(gp.item(), 10.0, epsilon = 1e-4);
    }

    #[test]
    fn wgan_loss_arithmetic() {
        let d_real = Tensor::from_vec(&[2], vec![1.5, 2.5]);
        let d_fake = Tensor::from_vec(&[2], vec![0.25, 0.75]);
        let gp = Tensor::scalar(0.4);
        assert_abs_diff_eq!(critic_loss(&d_real, &d_fake, &gp).item(), -1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(gen_loss(&d_fake).item(), -0.5, epsilon = 1e-12);
        let same = Tensor::from_vec(&[2], vec![0.3, 0.7]);
        assert_eq!(critic_loss(&same, &same, &Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn generator_stage_output_shapes() {
        let mut r = rng();
        let gen = ProganGenerator::new(16, 16, 6, &mut r);
        let z = Tensor::randn(&[2, 16], 1.0, &mut r);
        for s in 0..6 {
            let out = gen.forward(&z, s, 1.0);
            let expect = 4 << s;
            assert_eq!(out.shape(), vec![2, 1, expect, expect], "stage {s}");
        }
    }

    #[test]
    fn fade_in_continuity_at_alpha_zero() {
        let mut r = rng();
        let gen = ProganGenerator::new(8, 8, 3, &mut r);
        let z = Tensor::randn(&[2, 8], 1.0, &mut r);
        let prev = gen.forward(&z, 1, 1.0);
        let blended = gen.forward(&z, 2, 0.0);
        let up = prev.upsample_nearest2();
        for (a, b) in blended.to_vec().iter().zip(up.to_vec()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-6);
        }
    }

    #[test]
    fn critic_scores_are_unbounded() {
        let mut r = rng();
        let critic = ProganCritic::new(8, 2, &mut r);
        // A raw-score head produces values on both sides of zero at init,
        // which a sigmoid output never could.
        let x = Tensor::randn(&[32, 1, 8, 8], 100.0, &mut r);
        let scores = critic.forward(&x, 1, 1.0).to_vec();
        assert!(
            scores.iter().any(|&v| v <= 0.0 || v >= 1.0),
            "scores unexpectedly confined to (0, 1): {scores:?}"
        );
    }

    #[test]
    fn critic_accepts_each_stage_resolution() {
        let mut r = rng();
        let critic = ProganCritic::new(8, 3, &mut r);
        for s in 0..3 {
            let res = 4 << s;
            let x = Tensor::randn(&[2, 1, res, res], 1.0, &mut r);
            assert_eq!(critic.forward(&x, s, 0.5).shape(), vec![2]);
        }
    }
}
