//! Shared training plumbing: configuration, deterministic seeding, loss
//! logging, checkpointing and optimizer construction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use scoreforge_autograd::{Adam, Tensor};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dcgan,
    Progan,
    Cyclewgan,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Dcgan => "dcgan",
            ModelKind::Progan => "progan",
            ModelKind::Cyclewgan => "cyclewgan",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan" => Ok(ModelKind::Dcgan),
            "progan" => Ok(ModelKind::Progan),
            "cyclewgan" => Ok(ModelKind::Cyclewgan),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected dcgan, progan or cyclewgan)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipschitzMode {
    Clip,
    Gp,
}

impl std::str::FromStr for LipschitzMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(LipschitzMode::Clip),
            "gp" => Ok(LipschitzMode::Gp),
            other => Err(Error::Config(format!("unknown lipschitz mode `{other}`"))),
        }
    }
}

/// Per-model hyperparameter bundle. Config files are flat TOML with keys
/// named exactly like these fields; CLI flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub batch_schedule: Option<Vec<usize>>,
    pub epochs: usize,
    pub epoch_schedule: Option<Vec<usize>>,
    pub lambda_gp: f64,
    pub lambda_cycle: f64,
    pub latent_dim: usize,
    pub seed: u64,
    pub resolution: usize,
    pub base_channels: usize,
    pub n_critic: usize,
    pub clip_c: f64,
    pub lipschitz: LipschitzMode,
    pub fade_in_fraction: f64,
    pub smooth_real: f64,
    pub smooth_fake: f64,
    /// Directory of real crops for per-epoch FID tracking; enables the
    /// best-FID checkpoint when set.
    pub eval_dir: Option<String>,
    pub eval_count: usize,
    /// Allow multi-threaded order-sensitive reductions. Faster, but results
    /// are no longer guaranteed bit-identical across runs.
    pub fast: bool,
}

impl TrainConfig {
    pub fn default_for(model: ModelKind) -> Self {
        let base = TrainConfig {
            model,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 128,
            batch_schedule: None,
            epochs: 100,
            epoch_schedule: None,
            lambda_gp: 0.0,
            lambda_cycle: 0.0,
            latent_dim: 100,
            seed: 0,
            resolution: 64,
            base_channels: 64,
            n_critic: 1,
            clip_c: 0.01,
            lipschitz: LipschitzMode::Clip,
            fade_in_fraction: 0.5,
            smooth_real: 0.9,
            smooth_fake: 0.1,
            eval_dir: None,
            eval_count: 64,
            fast: false,
        };
        match model {
            ModelKind::Dcgan => base,
            ModelKind::Progan => TrainConfig {
                lr_g: 1e-3,
                lr_d: 1e-3,
                beta1: 0.0,
                beta2: 0.99,
                batch_size: 32,
                epochs: 30,
                lambda_gp: 10.0,
                latent_dim: 256,
                resolution: 128,
                base_channels: 256,
                lipschitz: LipschitzMode::Gp,
                ..base
            },
            ModelKind::Cyclewgan => TrainConfig {
                lr_g: 1e-5,
                lr_d: 1e-5,
                beta1: 0.5,
                beta2: 0.99,
                batch_size: 1,
                epochs: 25,
                lambda_cycle: 10.0,
                latent_dim: 1,
                resolution: 256,
                n_critic: 5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.beta1 < self.beta2 && self.beta2 < 1.0 && self.beta1 >= 0.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 <= beta1 < beta2 < 1, got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.lambda_gp < 0.0 || self.lambda_cycle < 0.0 {
            return Err(Error::Config("lambda values must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be >= 1".into()));
        }
        if self.model == ModelKind::Progan {
            if !self.resolution.is_power_of_two() || self.resolution < 4 {
                return Err(Error::Config(format!(
                    "progan resolution must be a power of two >= 4, got {}",
                    self.resolution
                )));
            }
            let stages = self.stage_count();
            for (name, schedule) in [
                ("batch_schedule", &self.batch_schedule),
                ("epoch_schedule", &self.epoch_schedule),
            ] {
                if let Some(s) = schedule {
                    if s.len() != stages {
                        return Err(Error::Config(format!(
                            "{name} has {} entries but the growth schedule has {stages} stages",
                            s.len()
                        )));
                    }
                    if s.iter().any(|&v| v == 0) {
                        return Err(Error::Config(format!("{name} entries must be >= 1")));
                    }
                }
            }
            if !(0.0..=1.0).contains(&self.fade_in_fraction) {
                return Err(Error::Config("fade_in_fraction must be in [0, 1]".into()));
            }
        }
        if self.model == ModelKind::Cyclewgan && (self.resolution < 32 || self.resolution % 4 != 0)
        {
            return Err(Error::Config(format!(
                "cyclewgan resolution must be a multiple of 4 and at least 32, got {}",
                self.resolution
            )));
        }
        if self.n_critic == 0 {
            return Err(Error::Config("n_critic must be >= 1".into()));
        }
        if self.clip_c <= 0.0 {
            return Err(Error::Config("clip_c must be > 0".into()));
        }
        Ok(())
    }

    /// Number of progressive-growing stages (4x4 up to `resolution`).
    pub fn stage_count(&self) -> usize {
        let mut stages = 1;
        let mut r = 4usize;
        while r < self.resolution {
            r *= 2;
            stages += 1;
        }
        stages
    }

    /// Epochs per stage; `epochs` is the uniform default.
    pub fn stage_epochs(&self) -> Vec<usize> {
        match &self.epoch_schedule {
            Some(s) => s.clone(),
            None => vec![self.epochs; self.stage_count()],
        }
    }

    /// Batch size per stage; by default 32 at 4..32 px and 16 at 64 px and up.
    pub fn stage_batches(&self) -> Vec<usize> {
        match &self.batch_schedule {
            Some(s) => s.clone(),
            None => (0..self.stage_count())
                .map(|s| {
                    let res = 4usize << s;
                    if res <= 32 {
                        self.batch_size
                    } else {
                        (self.batch_size / 2).max(1)
                    }
                })
                .collect(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        match self.model {
            ModelKind::Progan => self.stage_epochs().iter().sum(),
            _ => self.epochs,
        }
    }

    /// Load from a flat TOML file, merging over the model's defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let partial: PartialConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config file: {e}")))?;
        let model = partial
            .model
            .ok_or_else(|| Error::Config("config file must set `model`".into()))?;
        let mut cfg = TrainConfig::default_for(model);
        partial.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All-optional mirror of [`TrainConfig`] used to merge file values over
/// per-model defaults. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub model: Option<ModelKind>,
    pub lr_g: Option<f64>,
    pub lr_d: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub batch_size: Option<usize>,
    pub batch_schedule: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub epoch_schedule: Option<Vec<usize>>,
    pub lambda_gp: Option<f64>,
    pub lambda_cycle: Option<f64>,
    pub latent_dim: Option<usize>,
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub base_channels: Option<usize>,
    pub n_critic: Option<usize>,
    pub clip_c: Option<f64>,
    pub lipschitz: Option<LipschitzMode>,
    pub fade_in_fraction: Option<f64>,
    pub smooth_real: Option<f64>,
    pub smooth_fake: Option<f64>,
    pub eval_dir: Option<String>,
    pub eval_count: Option<usize>,
    pub fast: Option<bool>,
}

macro_rules! apply_fields {
    ($self:ident, $cfg:ident; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $self.$field.clone() { $cfg.$field = v; })*
    };
}

impl PartialConfig {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        apply_fields!(self, cfg;
            lr_g, lr_d, beta1, beta2, batch_size, epochs, lambda_gp, lambda_cycle,
            latent_dim, seed, resolution, base_channels, n_critic, clip_c, lipschitz,
            fade_in_fraction, smooth_real, smooth_fake, eval_count, fast
        );
        if self.batch_schedule.is_some() {
            cfg.batch_schedule = self.batch_schedule.clone();
        }
        if self.epoch_schedule.is_some() {
            cfg.epoch_schedule = self.epoch_schedule.clone();
        }
        if self.eval_dir.is_some() {
            cfg.eval_dir = self.eval_dir.clone();
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Saved position of the stateful random streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub latent_pos: (u64, u64),
    pub gp_pos: (u64, u64),
}

/// All random sources of a training run, derived from one seed.
///
/// `weights` is consumed at model construction; `latent` and `gp` advance
/// during training and their positions are checkpointed so a resumed run
/// replays the exact continuation. Data shuffling uses a stateless per-epoch
/// stream and needs no saved state.
pub struct RunRng {
    pub seed: u64,
    pub weights: ChaCha8Rng,
    pub latent: ChaCha8Rng,
    pub gp: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Seed every random source from one integer.
pub fn seed_all(seed: u64) -> RunRng {
    RunRng {
        seed,
        weights: stream_rng(seed, 1),
        latent: stream_rng(seed, 2),
        gp: stream_rng(seed, 3),
    }
}

impl RunRng {
    /// Stateless shuffle stream for one epoch.
    pub fn shuffle_rng(&self, epoch: u64) -> ChaCha8Rng {
        self.shuffle_rng_tagged(0, epoch)
    }

    /// Independent shuffle stream per (tag, epoch); used when several data
    /// sources are shuffled within one epoch.
    pub fn shuffle_rng_tagged(&self, tag: u64, epoch: u64) -> ChaCha8Rng {
        stream_rng(self.seed, 0x10000 + (tag << 32) + epoch)
    }

    pub fn state(&self) -> RngState {
        let lp = self.latent.get_word_pos();
        let gp = self.gp.get_word_pos();
        RngState {
            seed: self.seed,
            latent_pos: ((lp >> 64) as u64, lp as u64),
            gp_pos: ((gp >> 64) as u64, gp as u64),
        }
    }

    pub fn restore(state: &RngState) -> RunRng {
        let mut rng = seed_all(state.seed);
        rng.latent
            .set_word_pos(((state.latent_pos.0 as u128) << 64) | state.latent_pos.1 as u128);
        rng.gp
            .set_word_pos(((state.gp_pos.0 as u128) << 64) | state.gp_pos.1 as u128);
        rng
    }
}

/// Append-only training log with a fixed column set.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<LogRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub values: Vec<f64>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        LossLog { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    /// Append one row. Steps must strictly increase and every value must be
    /// finite; a non-finite value aborts with the offending term and step.
    pub fn append(&mut self, step: u64, epoch: u64, values: &[f64]) -> Result<()> {
        assert_eq!(values.len(), self.columns.len(), "loss column count mismatch");
        if let Some(last) = self.rows.last() {
            if step <= last.step {
                return Err(Error::Other(format!(
                    "log steps must strictly increase ({} after {})",
                    step, last.step
                )));
            }
        }
        for (name, &v) in self.columns.iter().zip(values) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: name.clone(), step });
            }
        }
        self.rows.push(LogRow { step, epoch, values: values.to_vec() });
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(e.to_string()))?;
        let mut header = vec!["step".to_string(), "epoch".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Other(e.to_string()))?;
        for row in &self.rows {
            let mut rec = vec![row.step.to_string(), row.epoch.to_string()];
            rec.extend(row.values.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| Error::Other(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let headers = r
            .headers()
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
            .clone();
        let cols: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if cols.len() < 2 || cols[0] != "step" || cols[1] != "epoch" {
            return Err(Error::InvalidInput(format!(
                "{}: expected header starting with step,epoch",
                path.display()
            )));
        }
        let mut log = LossLog {
            columns: cols[2..].to_vec(),
            rows: Vec::new(),
        };
        for (i, rec) in r.records().enumerate() {
            let line = i + 2; // header is line 1
            let rec = rec.map_err(|e| {
                Error::InvalidInput(format!("{} line {line}: {e}", path.display()))
            })?;
            let parse = |field: usize| -> Result<f64> {
                rec.get(field)
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("{} line {line}: missing field", path.display()))
                    })?
                    .parse::<f64>()
                    .map_err(|e| {
                        Error::InvalidInput(format!("{} line {line}: {e}", path.display()))
                    })
            };
            let step = parse(0)? as u64;
            let epoch = parse(1)? as u64;
            let values: Vec<f64> =
                (2..cols.len()).map(parse).collect::<Result<Vec<_>>>()?;
            log.rows.push(LogRow { step, epoch, values });
        }
        Ok(log)
    }
}

/// One training state snapshot: weights, buffers, optimizer slots, RNG
/// positions and the config that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub stage: u32,
    pub rng: RngState,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub opt_steps: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelKind,
    config: TrainConfig,
    epoch: u64,
    step: u64,
    stage: u32,
    rng: RngState,
    opt_steps: BTreeMap<String, u64>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_version(path, CHECKPOINT_VERSION)
    }

    /// Write with an explicit format version (tests use this to exercise the
    /// incompatibility path).
    pub fn save_with_version(&self, path: &Path, version: u32) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            stage: self.stage,
            rng: self.rng.clone(),
            opt_steps: self.opt_steps.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Other(format!("checkpoint header serialization: {e}")))?;

        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for (_, arr) in self.tensors.iter() {
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);

        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 + 32 {
            return Err(Error::CheckpointIntegrity("file too short".into()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointIntegrity("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != trailer {
            return Err(Error::CheckpointIntegrity("checksum mismatch".into()));
        }

        let header_len = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
        if payload.len() < 16 + header_len {
            return Err(Error::CheckpointIntegrity("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&payload[16..16 + header_len])
            .map_err(|e| Error::CheckpointIntegrity(format!("header parse: {e}")))?;

        let mut offset = 16 + header_len;
        let mut tensors = BTreeMap::new();
        for (name, shape) in &header.tensors {
            let n: usize = shape.iter().product();
            let need = n * 8;
            if payload.len() < offset + need {
                return Err(Error::CheckpointIntegrity(format!("truncated tensor `{name}`")));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b: [u8; 8] = payload[offset + i * 8..offset + (i + 1) * 8].try_into().unwrap();
                data.push(f64::from_bits(u64::from_le_bytes(b)));
            }
            offset += need;
            tensors.insert(
                name.clone(),
                ArrayD::from_shape_vec(IxDyn(shape), data)
                    .map_err(|e| Error::CheckpointIntegrity(format!("tensor `{name}`: {e}")))?,
            );
        }
        if offset != payload.len() {
            return Err(Error::CheckpointIntegrity("trailing bytes after tensors".into()));
        }

        Ok(Checkpoint {
            model: header.model,
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            stage: header.stage,
            rng: header.rng,
            tensors,
            opt_steps: header.opt_steps,
        })
    }
}

/// Snapshot named tensors (parameters or buffers) into a checkpoint map.
pub fn store_tensors(map: &mut BTreeMap<String, ArrayD<f64>>, pairs: &[(String, Tensor)]) {
    for (name, t) in pairs {
        map.insert(name.clone(), t.value().clone());
    }
}

/// Restore named tensors from a checkpoint map; every name must be present
/// with a matching shape.
pub fn load_tensors(map: &BTreeMap<String, ArrayD<f64>>, pairs: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in pairs {
        let arr = map
            .get(name)
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing tensor `{name}`")))?;
        if arr.shape() != t.value().shape() {
            return Err(Error::CheckpointIntegrity(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                arr.shape(),
                t.value().shape()
            )));
        }
        t.set_value(arr.clone());
    }
    Ok(())
}

/// Store one optimizer's Adam slots under `optim.<name>.<i>.{m,v}`.
pub fn store_optimizer(
    map: &mut BTreeMap<String, ArrayD<f64>>,
    opt_steps: &mut BTreeMap<String, u64>,
    name: &str,
    opt: &Adam,
) {
    let (t, slots) = opt.export_state();
    opt_steps.insert(name.to_string(), t);
    for (i, (m, v)) in slots.into_iter().enumerate() {
        map.insert(format!("optim.{name}.{i}.m"), m);
        map.insert(format!("optim.{name}.{i}.v"), v);
    }
}

/// Restore one optimizer's Adam slots written by [`store_optimizer`].
pub fn load_optimizer(
    map: &BTreeMap<String, ArrayD<f64>>,
    opt_steps: &BTreeMap<String, u64>,
    name: &str,
    opt: &mut Adam,
) -> Result<()> {
    let t = *opt_steps
        .get(name)
        .ok_or_else(|| Error::CheckpointIntegrity(format!("missing optimizer `{name}`")))?;
    let count = opt.params().len();
    let mut slots = Vec::with_capacity(count);
    for i in 0..count {
        let m = map
            .get(&format!("optim.{name}.{i}.m"))
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing slot optim.{name}.{i}.m")))?;
        let v = map
            .get(&format!("optim.{name}.{i}.v"))
            .ok_or_else(|| Error::CheckpointIntegrity(format!("missing slot optim.{name}.{i}.v")))?;
        slots.push((m.clone(), v.clone()));
    }
    opt.import_state(t, slots);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptTarget {
    Generator,
    Discriminator,
}

/// Adam with exactly the configured learning rate and betas for one side of
/// the adversarial game.
pub fn make_optimizer(config: &TrainConfig, which: OptTarget, params: Vec<Tensor>) -> Result<Adam> {
    config.validate()?;
    let lr = match which {
        OptTarget::Generator => config.lr_g,
        OptTarget::Discriminator => config.lr_d,
    };
    Ok(Adam::new(params, lr, config.beta1, config.beta2))
}

/// Checkpoint file name for one epoch.
pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("ckpt_epoch_{epoch:04}.sfck"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn optimizer_defaults_match_training_regimes() {
        let d = TrainConfig::default_for(ModelKind::Dcgan);
        assert_eq!((d.lr_g, d.beta1, d.beta2), (2e-4, 0.5, 0.999));
        let p = TrainConfig::default_for(ModelKind::Progan);
        assert_eq!((p.lr_g, p.beta1, p.beta2), (1e-3, 0.0, 0.99));
        let c = TrainConfig::default_for(ModelKind::Cyclewgan);
        assert_eq!((c.lr_g, c.beta1, c.beta2), (1e-5, 0.5, 0.99));

        let opt = make_optimizer(&d, OptTarget::Generator, vec![Tensor::var(ArrayD::zeros(IxDyn(&[2])))])
            .unwrap();
        assert_eq!((opt.lr, opt.beta1, opt.beta2), (2e-4, 0.5, 0.999));
    }

    #[test]
    fn progan_default_schedule_totals_180_epochs() {
        let p = TrainConfig::default_for(ModelKind::Progan);
        assert_eq!(p.stage_count(), 6);
        assert_eq!(p.total_epochs(), 180);
        assert_eq!(p.stage_batches(), vec![32, 32, 32, 32, 16, 16]);
    }

    #[test]
    fn config_validation_rejects_bad_betas() {
        let mut c = TrainConfig::default_for(ModelKind::Dcgan);
        c.beta1 = 0.9;
        c.beta2 = 0.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_merge_overrides_defaults_and_rejects_unknown_keys() {
        let cfg = TrainConfig::from_toml_str(
            "model = \"progan\"\nseed = 9\nresolution = 8\nepochs = 2\nbatch_size = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::Progan);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.resolution, 8);
        assert_eq!(cfg.lr_g, 1e-3); // default preserved
        assert_eq!(cfg.stage_count(), 2);

        let err = TrainConfig::from_toml_str("model = \"dcgan\"\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate") || err.to_string().contains("unknown"));
    }

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        let mut a = seed_all(0);
        let mut b = seed_all(0);
        assert_eq!(a.weights.next_u64(), b.weights.next_u64());
        assert_eq!(a.latent.next_u64(), b.latent.next_u64());
        let mut c = seed_all(1);
        assert_ne!(seed_all(0).weights.next_u64(), c.weights.next_u64());
        // Streams within a run are independent.
        let mut d = seed_all(0);
        assert_ne!(d.weights.next_u64(), d.latent.next_u64());
    }

    #[test]
    fn rng_state_roundtrip_replays_continuation() {
        let mut rng = seed_all(42);
        for _ in 0..17 {
            rng.latent.next_u64();
        }
        rng.gp.next_u64();
        let state = rng.state();
        let expected: Vec<u64> = (0..5).map(|_| rng.latent.next_u64()).collect();
        let mut restored = RunRng::restore(&state);
        let got: Vec<u64> = (0..5).map(|_| restored.latent.next_u64()).collect();
        assert_eq!(expected, got);
    }

    #[test]
    fn losslog_rejects_nonfinite_and_nonmonotonic() {
        let mut log = LossLog::new(&["loss_d", "loss_g"]);
        log.append(1, 0, &[0.5, 0.7]).unwrap();
        let err = log.append(2, 0, &[f64::NAN, 0.1]).unwrap_err();
        match err {
            Error::NonFiniteLoss { term, step } => {
                assert_eq!(term, "loss_d");
                assert_eq!(step, 2);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(log.append(1, 0, &[0.1, 0.1]).is_err());
    }

    #[test]
    fn losslog_csv_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = LossLog::new(&["a", "b"]);
        log.append(1, 0, &[0.1 + 0.2, -1.5e-13]).unwrap();
        log.append(2, 0, &[std::f64::consts::PI, 7.0]).unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let back = LossLog::read_csv(&path).unwrap();
        assert_eq!(log, back);
        for (a, b) in log.rows[0].values.iter().zip(&back.rows[0].values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[2, 2]), 0.25));
        tensors.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[2]), -1.0));
        Checkpoint {
            model: ModelKind::Dcgan,
            config: TrainConfig::default_for(ModelKind::Dcgan),
            epoch: 3,
            step: 42,
            stage: 0,
            rng: seed_all(5).state(),
            tensors,
            opt_steps: BTreeMap::new(),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sfck");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.step, 42);
        for (name, arr) in &ck.tensors {
            let b = &back.tensors[name];
            for (x, y) in arr.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Save the loaded checkpoint again: identical bytes.
        let path2 = dir.path().join("c2.sfck");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sfck");
        sample_checkpoint().save_with_version(&path, CHECKPOINT_VERSION + 1).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::IncompatibleCheckpoint { found, expected }) => {
                assert_eq!(found, CHECKPOINT_VERSION + 1);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_checkpoint_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sfck");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointIntegrity(_))));

        // Truncation is also an integrity error.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 40);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::CheckpointIntegrity(_))));
    }
}
