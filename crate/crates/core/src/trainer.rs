//! Adam, the step learning-rate schedule, and a resumable training loop.
//!
//! Data order is a pure function of `(seed, epoch)`, and the position inside
//! an epoch is derived from the global step counter. A run restored from a
//! checkpoint therefore continues bit-identically to one that never stopped.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::error::{LaffError, Result};
use crate::graph::{GradStore, Graph};
use crate::image_io::Image;
use crate::losses::{total_loss, ConvExtractor, FeatureExtractor, IdentityExtractor, LossConfig, RANDOM_EXTRACTOR_SEED};
use crate::metrics::{self, EvalItem, MetricsConfig, MetricsReport};
use crate::model::{LaffNetModel, ModelConfig};
use crate::params::ParamStore;
use crate::synth::{sample_seed, PairedSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
    pub hyper: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>, hyper: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, e)| Tensor::zeros(e.tensor.shape()).expect("parameter shapes are valid"))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient. A non-finite gradient aborts before
/// anything is modified.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &GradStore<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(LaffError::State(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(LaffError::State(format!("gradient shape mismatch for {}", params.name(id))));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(LaffError::Numeric {
                    node: params.name(id).to_string(),
                    detail: format!("gradient entry {i} is {}", g.data()[i]),
                });
            }
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let step = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = eps as f32;
    for id in params.ids().collect::<Vec<_>>() {
        let i = id.0;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let theta = params.get_mut(id).data_mut();
        match grads.get(id) {
            Some(g) => {
                for (k, &gk) in g.data().iter().enumerate() {
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    theta[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
                }
            }
            None => {
                for k in 0..theta.len() {
                    m[k] *= b1;
                    v[k] *= b2;
                    theta[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Frozen feature extractor for the perceptual term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorSpec {
    Random { seed: u64 },
    Identity,
    /// `layer{i}.weight` / `layer{i}.bias` tensors in a `LAFF` container.
    File { path: PathBuf },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::Random {
            seed: RANDOM_EXTRACTOR_SEED,
        }
    }
}

impl ExtractorSpec {
    pub fn load(&self) -> Result<Box<dyn FeatureExtractor<f32>>> {
        Ok(match self {
            ExtractorSpec::Random { seed } => Box::new(ConvExtractor::<f32>::random(*seed)),
            ExtractorSpec::Identity => Box::new(IdentityExtractor),
            ExtractorSpec::File { path } => Box::new(ConvExtractor::<f32>::from_checkpoint(&Checkpoint::read(path)?)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    /// Caps the total number of optimizer steps, counted across resumes.
    pub max_steps: Option<u64>,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub extractor: ExtractorSpec,
    pub model: ModelConfig,
    /// Seeds weight initialization and data order.
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Epochs between validation passes; 0 disables them.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            initial_lr: 1e-3,
            lr_drop_epoch: 30,
            lr_drop_factor: 10.0,
            epochs: 200,
            max_steps: None,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            extractor: ExtractorSpec::default(),
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(LaffError::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.initial_lr >= 0.0 && self.lr_drop_factor > 0.0) {
            return Err(LaffError::Config("learning rate must be >= 0 and the drop factor > 0".into()));
        }
        if self.max_steps == Some(0) {
            return Err(LaffError::Config("max_steps must be >= 1 when set".into()));
        }
        self.loss.weights.validate()?;
        self.loss.ssim.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }
}

/// `initial_lr` before `lr_drop_epoch`, divided by `lr_drop_factor` from then on.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.initial_lr
    } else {
        cfg.initial_lr / cfg.lr_drop_factor
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// The sample order of `epoch`; the last batch may be partial.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ SHUFFLE_STREAM, epoch));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cha: f64,
    pub loss_ssim: f64,
    pub loss_per: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_uiqm: f64,
}

/// Counters persisted in a checkpoint's `train_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam_t: u64,
    pub config: TrainConfig,
}

pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Global step counter after the run.
    pub final_step: u64,
}

/// Where a run writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines log, appended to.
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn stack(images: impl Iterator<Item = Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&images.collect::<Vec<_>>())
}

pub struct Trainer {
    pub model: LaffNetModel<f32>,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    extractor: Box<dyn FeatureExtractor<f32>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = LaffNetModel::build(cfg.model, cfg.seed)?;
        Self::with_model(model, cfg)
    }

    /// Starts fresh optimizer state on an existing model, e.g. for fine-tuning.
    pub fn with_model(model: LaffNetModel<f32>, mut cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.model = model.config;
        Ok(Self {
            adam: AdamState::new(&model.params, cfg.adam),
            extractor: cfg.extractor.load()?,
            model,
            cfg,
            step: 0,
        })
    }

    /// Restores model, optimizer and counters. `cfg` replaces the stored
    /// configuration when given.
    pub fn resume(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let state: TrainState = match &ck.manifest.train_state {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(LaffError::State("checkpoint has no training state".into())),
        };
        let model = model_from_checkpoint(ck)?;
        let mut cfg = cfg.unwrap_or(state.config);
        cfg.validate()?;
        cfg.model = model.config;
        let mut adam = AdamState::new(&model.params, cfg.adam);
        adam.t = state.adam_t;
        for (id, e) in model.params.iter() {
            for (slot, kind) in [(&mut adam.m[id.0], "m"), (&mut adam.v[id.0], "v")] {
                let name = format!("adam.{kind}.{}", e.name);
                let t = ck
                    .get(&name)
                    .ok_or_else(|| LaffError::State(format!("checkpoint lacks optimizer tensor {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(LaffError::State(format!("optimizer tensor {name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(Self {
            extractor: cfg.extractor.load()?,
            model,
            adam,
            cfg,
            step: state.step,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.model);
        for (id, e) in self.model.params.iter() {
            ck.push(format!("adam.m.{}", e.name), self.adam.m[id.0].clone());
            ck.push(format!("adam.v.{}", e.name), self.adam.v[id.0].clone());
        }
        ck.manifest.train_state = Some(serde_json::to_value(TrainState {
            step: self.step,
            adam_t: self.adam.t,
            config: self.cfg.clone(),
        })?);
        Ok(ck)
    }

    /// Forward, loss, backward and one Adam update on a `[B, 3, H, W]` pair.
    pub fn train_step(&mut self, degraded: &Tensor<f32>, clean: &Tensor<f32>, epoch: usize) -> Result<StepRecord> {
        let lr = lr_schedule(epoch, &self.cfg);
        let g = Graph::<f32>::new();
        let x = g.input(degraded.clone());
        let y = g.input(clean.clone());
        let pred = self.model.forward(&g, &x)?;
        let loss = total_loss(&g, &y, &pred, &self.cfg.loss, self.extractor.as_ref())?;
        let total = loss.total.item();
        if !total.is_finite() {
            return Err(LaffError::Numeric {
                node: "loss".into(),
                detail: format!("total loss is {total} at step {}", self.step),
            });
        }
        let grads = g.backward(&loss.total, &Tensor::scalar(1.0))?;
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            lr,
            loss_total: total as f64,
            loss_cha: loss.charbonnier as f64,
            loss_ssim: loss.ssim as f64,
            loss_per: loss.perceptual as f64,
        })
    }

    /// Trains until `cfg.epochs` or `cfg.max_steps` is reached, starting
    /// from the current step counter. `val` defaults to the training set.
    pub fn run(&mut self, train: &[PairedSample], val: Option<&[PairedSample]>, opts: &RunOptions) -> Result<TrainSummary> {
        let n = train.len();
        if n == 0 {
            return Err(LaffError::Dataset("training set is empty".into()));
        }
        if self.cfg.batch_size > n {
            return Err(LaffError::Config(format!(
                "batch size {} exceeds the {n} training pairs",
                self.cfg.batch_size
            )));
        }
        let size = (train[0].clean.width, train[0].clean.height);
        if let Some(bad) = train.iter().find(|s| (s.clean.width, s.clean.height) != size) {
            return Err(LaffError::Dataset(format!(
                "{} is {}x{}, expected {}x{} (resize on ingest)",
                bad.name, bad.clean.width, bad.clean.height, size.0, size.1
            )));
        }
        let degraded: Vec<Tensor<f32>> = train.iter().map(|s| s.degraded.to_tensor()).collect();
        let clean: Vec<Tensor<f32>> = train.iter().map(|s| s.clean.to_tensor()).collect();

        let spe = self.cfg.steps_per_epoch(n);
        let limit = (self.cfg.epochs as u64 * spe).min(self.cfg.max_steps.unwrap_or(u64::MAX));
        let mut log = match &opts.log {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?))
            }
            None => None,
        };
        let mut summary = TrainSummary {
            steps: Vec::new(),
            epochs: Vec::new(),
            final_step: self.step,
        };
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.step < limit {
            let epoch = (self.step / spe) as usize;
            let within = (self.step % spe) as usize;
            if order_epoch != epoch {
                order = epoch_order(self.cfg.seed, epoch, n);
                order_epoch = epoch;
            }
            let idx = &order[within * self.cfg.batch_size..((within + 1) * self.cfg.batch_size).min(n)];
            let x = stack(idx.iter().map(|&i| degraded[i].clone()))?;
            let y = stack(idx.iter().map(|&i| clean[i].clone()))?;
            let rec = self.train_step(&x, &y, epoch)?;
            write_record(log.as_mut(), &rec)?;
            summary.steps.push(rec);

            let epoch_done = self.step % spe == 0;
            if epoch_done {
                let finished = epoch + 1;
                if self.cfg.val_every > 0 && finished % self.cfg.val_every == 0 {
                    let report = evaluate(&self.model, val.unwrap_or(train), &MetricsConfig::default())?;
                    let stat = |k: &str| report.summary.get(k).map_or(f64::NAN, |s| s.mean);
                    let er = EpochRecord {
                        epoch,
                        val_psnr: stat("psnr"),
                        val_ssim: stat("ssim"),
                        val_uiqm: stat("uiqm"),
                    };
                    write_record(log.as_mut(), &er)?;
                    summary.epochs.push(er);
                }
                if let Some(path) = &opts.checkpoint {
                    if self.cfg.checkpoint_every > 0 && finished % self.cfg.checkpoint_every == 0 {
                        self.to_checkpoint()?.write(path)?;
                    }
                }
            }
        }
        if let Some(path) = &opts.checkpoint {
            self.to_checkpoint()?.write(path)?;
        }
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        summary.final_step = self.step;
        Ok(summary)
    }
}

fn write_record<T: Serialize>(log: Option<&mut BufWriter<File>>, rec: &T) -> Result<()> {
    if let Some(l) = log {
        serde_json::to_writer(&mut *l, rec)?;
        l.write_all(b"\n")?;
    }
    Ok(())
}

/// Builds a model from `cfg` and trains it on `train`.
pub fn train(
    train: &[PairedSample],
    val: Option<&[PairedSample]>,
    cfg: TrainConfig,
    opts: &RunOptions,
) -> Result<(LaffNetModel<f32>, TrainSummary)> {
    let mut t = Trainer::new(cfg)?;
    let summary = t.run(train, val, opts)?;
    Ok((t.model, summary))
}

/// Enhances each degraded image and scores it against its clean reference.
/// Report rows follow dataset order.
pub fn evaluate(model: &LaffNetModel<f32>, data: &[PairedSample], cfg: &MetricsConfig) -> Result<MetricsReport> {
    let items = data
        .iter()
        .map(|s| {
            let out = model.enhance(&s.degraded.to_tensor())?;
            Ok(EvalItem {
                name: s.name.clone(),
                image: Image::from_tensor(&out, 0)?,
                reference: Some(s.clean.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate_batch(&items, cfg)
}

/// Reads a training log back into step and epoch records.
pub fn read_log(path: &Path) -> Result<(Vec<StepRecord>, Vec<EpochRecord>)> {
    let text = std::fs::read_to_string(path)?;
    let (mut steps, mut epochs) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").is_some() {
            steps.push(serde_json::from_value(v)?);
        } else if v.get("val_psnr").is_some() {
            epochs.push(serde_json::from_value(v)?);
        }
    }
    Ok((steps, epochs))
}
