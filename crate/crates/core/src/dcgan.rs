//! Baseline deep-convolutional GAN at 64x64 with label smoothing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use scoreforge_autograd::grad;
use scoreforge_autograd::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, ParamList, WeightInit};
use scoreforge_autograd::Tensor;

use crate::dataprep::{load_batch, round_half_even_u8, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::traincore::{
    checkpoint_path, load_optimizer, load_tensors, make_optimizer, seed_all, store_optimizer,
    store_tensors, Checkpoint, LossLog, ModelKind, OptTarget, RngState, RunRng, TrainConfig,
};

const INIT_STD: f64 = 0.02;
const LEAK: f64 = 0.2;

/// Generator: latent vector -> (N, 1, 64, 64) in [-1, 1].
///
/// Transposed-convolution stack with batch norm everywhere except the
/// output layer; tanh output activation.
pub struct DcganGenerator {
    pub latent_dim: usize,
    ct1: ConvTranspose2d,
    bn1: BatchNorm2d,
    ct2: ConvTranspose2d,
    bn2: BatchNorm2d,
    ct3: ConvTranspose2d,
    bn3: BatchNorm2d,
    ct4: ConvTranspose2d,
    bn4: BatchNorm2d,
    ct5: ConvTranspose2d,
}

impl DcganGenerator {
    pub fn new(latent_dim: usize, base: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = WeightInit::Normal(INIT_STD);
        DcganGenerator {
            latent_dim,
            ct1: ConvTranspose2d::new(latent_dim, base * 8, 4, 1, 0, false, init, rng),
            bn1: BatchNorm2d::new(base * 8),
            ct2: ConvTranspose2d::new(base * 8, base * 4, 4, 2, 1, false, init, rng),
            bn2: BatchNorm2d::new(base * 4),
            ct3: ConvTranspose2d::new(base * 4, base * 2, 4, 2, 1, false, init, rng),
            bn3: BatchNorm2d::new(base * 2),
            ct4: ConvTranspose2d::new(base * 2, base, 4, 2, 1, false, init, rng),
            bn4: BatchNorm2d::new(base),
            ct5: ConvTranspose2d::new(base, 1, 4, 2, 1, false, init, rng),
        }
    }

    /// z: (N, latent_dim) -> images (N, 1, 64, 64).
    pub fn forward(&self, z: &Tensor, training: bool) -> Tensor {
        let n = z.shape()[0];
        let x = z.reshape(&[n, self.latent_dim, 1, 1]);
        let x = self.bn1.forward(&self.ct1.forward(&x), training).relu();
        let x = self.bn2.forward(&self.ct2.forward(&x), training).relu();
        let x = self.bn3.forward(&self.ct3.forward(&x), training).relu();
        let x = self.bn4.forward(&self.ct4.forward(&x), training).relu();
        self.ct5.forward(&x).tanh()
    }

    pub fn named_params(&self) -> ParamList {
        let mut out = Vec::new();
        self.ct1.collect_params("g.ct1", &mut out);
        self.bn1.collect_params("g.bn1", &mut out);
        self.ct2.collect_params("g.ct2", &mut out);
        self.bn2.collect_params("g.bn2", &mut out);
        self.ct3.collect_params("g.ct3", &mut out);
        self.bn3.collect_params("g.bn3", &mut out);
        self.ct4.collect_params("g.ct4", &mut out);
        self.bn4.collect_params("g.bn4", &mut out);
        self.ct5.collect_params("g.ct5", &mut out);
        out
    }

    pub fn named_buffers(&self) -> ParamList {
        let mut out = Vec::new();
        self.bn1.collect_buffers("g.bn1", &mut out);
        self.bn2.collect_buffers("g.bn2", &mut out);
        self.bn3.collect_buffers("g.bn3", &mut out);
        self.bn4.collect_buffers("g.bn4", &mut out);
        out
    }
}

/// Discriminator: (N, 1, 64, 64) -> probability in (0, 1) per sample.
pub struct DcganDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    c3: Conv2d,
    bn3: BatchNorm2d,
    c4: Conv2d,
    bn4: BatchNorm2d,
    c5: Conv2d,
}

impl DcganDiscriminator {
    pub fn new(base: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = WeightInit::Normal(INIT_STD);
        DcganDiscriminator {
            c1: Conv2d::new(1, base, 4, 2, 1, false, init, rng),
            c2: Conv2d::new(base, base * 2, 4, 2, 1, false, init, rng),
            bn2: BatchNorm2d::new(base * 2),
            c3: Conv2d::new(base * 2, base * 4, 4, 2, 1, false, init, rng),
            bn3: BatchNorm2d::new(base * 4),
            c4: Conv2d::new(base * 4, base * 8, 4, 2, 1, false, init, rng),
            bn4: BatchNorm2d::new(base * 8),
            c5: Conv2d::new(base * 8, 1, 4, 1, 0, false, init, rng),
        }
    }

    /// images: (N, 1, 64, 64) -> probabilities (N,).
    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let s = x.shape();
        assert_eq!(&s[1..], &[1, 64, 64], "discriminator expects (N, 1, 64, 64)");
        let n = s[0];
        let x = self.c1.forward(x).leaky_relu(LEAK);
        let x = self.bn2.forward(&self.c2.forward(&x), training).leaky_relu(LEAK);
        let x = self.bn3.forward(&self.c3.forward(&x), training).leaky_relu(LEAK);
        let x = self.bn4.forward(&self.c4.forward(&x), training).leaky_relu(LEAK);
        self.c5.forward(&x).reshape(&[n]).sigmoid()
    }

    pub fn named_params(&self) -> ParamList {
        let mut out = Vec::new();
        self.c1.collect_params("d.c1", &mut out);
        self.c2.collect_params("d.c2", &mut out);
        self.bn2.collect_params("d.bn2", &mut out);
        self.c3.collect_params("d.c3", &mut out);
        self.bn3.collect_params("d.bn3", &mut out);
        self.c4.collect_params("d.c4", &mut out);
        self.bn4.collect_params("d.bn4", &mut out);
        self.c5.collect_params("d.c5", &mut out);
        out
    }

    pub fn named_buffers(&self) -> ParamList {
        let mut out = Vec::new();
        self.bn2.collect_buffers("d.bn2", &mut out);
        self.bn3.collect_buffers("d.bn3", &mut out);
        self.bn4.collect_buffers("d.bn4", &mut out);
        out
    }
}

/// Re-initialize a freshly constructed model: conv and deconv weights drawn
/// Normal(0, 0.02), norm scales Normal(1, 0.02), offsets and biases zero.
pub fn init_weights(params: &ParamList, rng: &mut ChaCha8Rng) {
    for (name, t) in params {
        let shape = t.shape();
        if name.ends_with(".weight") {
            t.set_value(Tensor::randn(&shape, INIT_STD, rng).value().clone());
        } else if name.ends_with(".gamma") {
            t.set_value(Tensor::randn(&shape, INIT_STD, rng).value().mapv(|v| v + 1.0));
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            let dim = t.value().raw_dim();
            t.set_value(ndarray::ArrayD::zeros(dim));
        }
    }
}

fn check_open_unit(values: &Tensor, what: &str, allow_one: bool) -> Result<()> {
    for &v in values.value().iter() {
        let ok = if allow_one { v > 0.0 && v <= 1.0 } else { v > 0.0 && v < 1.0 };
        if !ok {
            return Err(Error::InvalidInput(format!(
                "{what} contains {v}, outside the probability domain; \
                 callers must not pre-clamp discriminator outputs"
            )));
        }
    }
    Ok(())
}

/// Binary cross-entropy of probabilities `p` against a constant target.
/// Terms with a zero coefficient are skipped so hard targets stay finite.
fn bce_with_target(p: &Tensor, target: f64) -> Tensor {
    let mut terms: Option<Tensor> = None;
    if target > 0.0 {
        let t = p.ln().mul_scalar(target);
        terms = Some(t);
    }
    if target < 1.0 {
        let t = p.neg().add_scalar(1.0).ln().mul_scalar(1.0 - target);
        terms = Some(match terms {
            Some(prev) => prev.add(&t),
            None => t,
        });
    }
    terms.expect("target in [0, 1]").mean_all().neg()
}

/// Discriminator loss: BCE of real probabilities against `smooth_real` plus
/// BCE of fake probabilities against `smooth_fake`. With smoothing disabled
/// (targets 1 and 0) this is exactly the minimax discriminator loss.
pub fn discriminator_loss(
    d_real: &Tensor,
    d_fake: &Tensor,
    smooth_real: f64,
    smooth_fake: f64,
) -> Result<Tensor> {
    check_open_unit(d_real, "d_real", false)?;
    check_open_unit(d_fake, "d_fake", false)?;
    if !(0.0..=1.0).contains(&smooth_real) || !(0.0..=1.0).contains(&smooth_fake) {
        return Err(Error::InvalidInput("smoothing targets must be in [0, 1]".into()));
    }
    Ok(bce_with_target(d_real, smooth_real).add(&bce_with_target(d_fake, smooth_fake)))
}

/// Non-saturating generator loss: -mean(log D(G(z))).
pub fn generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    check_open_unit(d_fake, "d_fake", true)?;
    Ok(d_fake.ln().mean_all().neg())
}

/// Standard-normal latent batch of shape (n, dim).
pub fn sample_latent(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, dim], 1.0, rng)
}

/// Map generator output in [-1, 1] to 8-bit grayscale images.
pub fn to_u8_images(batch: &Tensor) -> Vec<Array2<u8>> {
    let v = batch.value();
    let s = v.shape().to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    (0..n)
        .map(|i| {
            let mut img = Array2::<u8>::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    img[[r, c]] = round_half_even_u8((v[[i, 0, r, c]] + 1.0) / 2.0 * 255.0);
                }
            }
            img
        })
        .collect()
}

/// Write images as PNG files `prefix_<k>.png`; returns the paths.
pub fn save_images(images: &[Array2<u8>], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{k:04}.png"));
        let raw: Vec<u8> = img.iter().copied().collect();
        let buf = image::GrayImage::from_raw(img.ncols() as u32, img.nrows() as u32, raw)
            .ok_or_else(|| Error::image(&path, "buffer size mismatch"))?;
        buf.save(&path).map_err(|e| Error::image(&path, e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: LossLog,
}

pub(crate) fn resume_log(out_dir: &Path, columns: &[&str], upto_step: u64) -> Result<LossLog> {
    let path = out_dir.join("losslog.csv");
    if path.exists() {
        let mut log = LossLog::read_csv(&path)?;
        if log.columns != columns {
            return Err(Error::Config(format!(
                "existing loss log {} has columns {:?}, expected {:?}",
                path.display(),
                log.columns,
                columns
            )));
        }
        log.rows.retain(|r| r.step <= upto_step);
        Ok(log)
    } else {
        Ok(LossLog::new(columns))
    }
}

/// Deterministic shuffled batches (drop-last) for one epoch.
pub(crate) fn epoch_batches(
    indices: &[usize],
    batch: usize,
    shuffle_rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = indices.to_vec();
    order.shuffle(shuffle_rng);
    order.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

struct DcganState {
    gen: DcganGenerator,
    disc: DcganDiscriminator,
}

impl DcganState {
    fn build(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let gen = DcganGenerator::new(config.latent_dim, config.base_channels, rng);
        let disc = DcganDiscriminator::new(config.base_channels, rng);
        let mut all = gen.named_params();
        all.extend(disc.named_params());
        init_weights(&all, rng);
        DcganState { gen, disc }
    }

    fn all_tensors(&self) -> ParamList {
        let mut all = self.gen.named_params();
        all.extend(self.gen.named_buffers());
        all.extend(self.disc.named_params());
        all.extend(self.disc.named_buffers());
        all
    }
}

/// Train DCGAN on the manifest's train split, checkpointing every epoch.
///
/// Alternates one discriminator step and one generator step per batch and
/// logs `loss_d`, `loss_g`, mean D(x) and mean D(G(z)) per step.
pub fn train_dcgan(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.model != ModelKind::Dcgan {
        return Err(Error::Config(format!("expected a dcgan config, got {}", config.model)));
    }
    if config.resolution != 64 {
        return Err(Error::Config("dcgan trains at a fixed resolution of 64".into()));
    }
    if manifest.count() == 0 {
        return Err(Error::Config("manifest is empty; nothing to train on".into()));
    }
    let train_indices = manifest.indices_for(Split::Train);
    if train_indices.len() < config.batch_size {
        return Err(Error::Config(format!(
            "train split has {} crops, smaller than one batch of {}",
            train_indices.len(),
            config.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    scoreforge_autograd::conv::set_fast_parallel(config.fast);

    let columns = ["loss_d", "loss_g", "d_real_mean", "d_fake_mean"];
    let (mut rng, state, mut log, start_epoch, mut step) = match &resume {
        Some(ck) => {
            if ck.model != ModelKind::Dcgan {
                return Err(Error::Config(format!("checkpoint is for {}, not dcgan", ck.model)));
            }
            let mut rng = RunRng::restore(&ck.rng);
            let state = DcganState::build(&ck.config, &mut rng.weights);
            load_tensors(&ck.tensors, &state.all_tensors())?;
            let log = resume_log(out_dir, &columns, ck.step)?;
            (rng, state, log, ck.epoch + 1, ck.step)
        }
        None => {
            let mut rng = seed_all(config.seed);
            let state = DcganState::build(config, &mut rng.weights);
            (rng, state, LossLog::new(&columns), 1, 0)
        }
    };

    let g_params: Vec<_> = state.gen.named_params().into_iter().map(|(_, t)| t).collect();
    let d_params: Vec<_> = state.disc.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt_g = make_optimizer(config, OptTarget::Generator, g_params.clone())?;
    let mut opt_d = make_optimizer(config, OptTarget::Discriminator, d_params.clone())?;
    if let Some(ck) = &resume {
        // Optimizer slots travel with the checkpoint.
        load_optimizer(&ck.tensors, &ck.opt_steps, "g", &mut opt_g)?;
        load_optimizer(&ck.tensors, &ck.opt_steps, "d", &mut opt_d)?;
    }

    let mut best_fid = f64::INFINITY;
    let mut last_ckpt = checkpoint_path(out_dir, start_epoch.saturating_sub(1));
    for epoch in start_epoch..=config.epochs as u64 {
        let mut shuffle = rng.shuffle_rng(epoch);
        for batch in epoch_batches(&train_indices, config.batch_size, &mut shuffle) {
            step += 1;
            let real = Tensor::constant(
                load_batch(manifest, data_dir, &batch, 64)?.into_dyn(),
            );
            let z = sample_latent(config.batch_size, config.latent_dim, &mut rng.latent);
            let fake = state.gen.forward(&z, true);

            // Discriminator step on real + detached fake.
            let d_real = state.disc.forward(&real, true);
            let d_fake = state.disc.forward(&fake.detach(), true);
            let loss_d =
                discriminator_loss(&d_real, &d_fake, config.smooth_real, config.smooth_fake)?;
            let d_grads = grad(&loss_d, &d_params.iter().collect::<Vec<_>>());
            opt_d.step(&d_grads);

            // Generator step through the updated discriminator.
            let d_fake_g = state.disc.forward(&fake, true);
            let loss_g = generator_loss(&d_fake_g)?;
            let g_grads = grad(&loss_g, &g_params.iter().collect::<Vec<_>>());
            opt_g.step(&g_grads);

            log.append(
                step,
                epoch,
                &[
                    loss_d.item(),
                    loss_g.item(),
                    d_real.mean_all().item(),
                    d_fake_g.mean_all().item(),
                ],
            )?;
        }

        let ckpt = build_checkpoint(config, &state, &opt_g, &opt_d, &rng.state(), epoch, step);
        last_ckpt = checkpoint_path(out_dir, epoch);
        ckpt.save(&last_ckpt)?;
        log.write_csv(&out_dir.join("losslog.csv"))?;

        if let Some(eval_dir) = &config.eval_dir {
            let fid = eval_fid(config, &state.gen, Path::new(eval_dir), epoch)?;
            if fid < best_fid {
                best_fid = fid;
                ckpt.save(&out_dir.join("best.sfck"))?;
            }
        }
    }

    let log_path = out_dir.join("losslog.csv");
    log.write_csv(&log_path)?;
    Ok(TrainOutcome { checkpoint: last_ckpt, log_path, log })
}

fn build_checkpoint(
    config: &TrainConfig,
    state: &DcganState,
    opt_g: &scoreforge_autograd::Adam,
    opt_d: &scoreforge_autograd::Adam,
    rng: &RngState,
    epoch: u64,
    step: u64,
) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    let mut opt_steps = BTreeMap::new();
    store_tensors(&mut tensors, &state.all_tensors());
    store_optimizer(&mut tensors, &mut opt_steps, "g", opt_g);
    store_optimizer(&mut tensors, &mut opt_steps, "d", opt_d);
    Checkpoint {
        model: ModelKind::Dcgan,
        config: config.clone(),
        epoch,
        step,
        stage: 0,
        rng: rng.clone(),
        tensors,
        opt_steps,
    }
}

/// FID of freshly generated samples against crops in `eval_dir`, using the
/// deterministic test extractor.
fn eval_fid(
    config: &TrainConfig,
    gen: &DcganGenerator,
    eval_dir: &Path,
    epoch: u64,
) -> Result<f64> {
    use crate::metrics::{fid_between_images, load_image_dir, FeatureExtractor, TestExtractor};
    let extractor = TestExtractor::default();
    let mut probe_rng = crate::traincore::seed_all(config.seed ^ (epoch << 32)).latent;
    let z = sample_latent(config.eval_count, config.latent_dim, &mut probe_rng);
    let fake = gen
        .forward(&z, false)
        .value()
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("generator output is 4-D");
    let real = load_image_dir(eval_dir, extractor.input_resolution(), Some(config.eval_count))?;
    fid_between_images(&extractor, &real, &fake)
}

/// Rebuild a generator from a checkpoint for sampling.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<DcganGenerator> {
    if ck.model != ModelKind::Dcgan {
        return Err(Error::Config(format!("checkpoint is for {}, not dcgan", ck.model)));
    }
    let mut rng = RunRng::restore(&ck.rng);
    let gen = DcganGenerator::new(ck.config.latent_dim, ck.config.base_channels, &mut rng.weights);
    let mut pairs = gen.named_params();
    pairs.extend(gen.named_buffers());
    load_tensors(&ck.tensors, &pairs)?;
    Ok(gen)
}
