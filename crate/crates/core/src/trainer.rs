//! Two-stage optimization.
//!
//! Stage 1 pretrains the generator against an RGB-only discriminator with a
//! pixel L1 term, a perceptual term on frozen features and a vanilla
//! adversarial term. Stage 2 trains generator and segmenter jointly on the
//! weighted total while a segmentation-aware discriminator judges
//! `(image, segmentation)` pairs.
//!
//! Each step updates the discriminator first, on detached generator outputs,
//! then the generator (and segmenter) with the discriminator frozen. Runs are
//! deterministic for a fixed seed: all randomness flows from [`TrainConfig::seed`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ulrseg_tensor::{Adam, Binder, Module, NormMode, Tensor, Var};

use crate::afe::{build_extractor, feature_loss_var, AfeConfig, FeatureExtractor};
use crate::checkpoint::{Checkpoint, DISCRIMINATOR, DISCRIMINATOR_RGB, GENERATOR, SEGMENTER};
use crate::datakit::{encode_onehot, Sample};
use crate::error::{io_err, Error, Result};
use crate::losses::{
    adv_loss_var, cross_entropy_var, disc_loss_var, pixel_l1_var, pixel_l2_var, total_loss_var,
    LossBundle, LossWeights,
};
use crate::metrics::ConfusionMatrix;
use crate::sad::{build_discriminator, fake_pair_var, real_pair_var, DiscConfig, Discriminator};
use crate::segnet::{build_segnet, predict_labels, SegConfig, SegLogits, SegNet};
use crate::srgen::{build_generator, Generator, GeneratorConfig};
use crate::types::{ImageTensor, IGNORE_INDEX};
use crate::FORMAT_VERSION;

/// Acceptable range of a normalized layer's top singular value.
pub const SIGMA_BAND: (f64, f64) = (0.5, 2.0);

/// Batch statistics below this batch size are too noisy; stored statistics
/// are used instead under [`NormPolicy::Auto`].
pub const MIN_BATCH_FOR_BATCH_STATS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub segmenter: SegConfig,
    /// Segmentation-aware discriminator; stage 1 uses its RGB-only variant.
    pub discriminator: DiscConfig,
    pub afe: AfeConfig,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            generator: GeneratorConfig::full(),
            segmenter: SegConfig::full(num_classes),
            discriminator: DiscConfig::full(num_classes),
            afe: AfeConfig::default(),
        }
    }

    pub fn toy(num_classes: usize) -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            segmenter: SegConfig::tiny(num_classes),
            discriminator: DiscConfig::toy(num_classes),
            afe: AfeConfig::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.segmenter.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.segmenter.validate()?;
        self.discriminator.validate()?;
        let c = self.segmenter.num_classes;
        if self.discriminator.in_channels != 3 + c {
            return Err(Error::Config(format!(
                "discriminator takes {} channels but image plus {c} classes is {}",
                self.discriminator.in_channels,
                3 + c
            )));
        }
        Ok(())
    }
}

/// Length of a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Steps(usize),
    Epochs(usize),
}

impl Schedule {
    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        match *self {
            Schedule::Steps(n) => n,
            Schedule::Epochs(e) => e * steps_per_epoch,
        }
    }
}

/// Which normalization statistics the segmenter uses while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPolicy {
    /// Batch statistics from [`MIN_BATCH_FOR_BATCH_STATS`] upwards, stored ones below.
    Auto,
    Batch,
    Running,
}

/// Stage-1 generator objective weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            pixel: 1e-2,
            perceptual: 1.0,
            adversarial: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub stage1: Schedule,
    pub stage2: Schedule,
    pub weights: LossWeights,
    pub stage1_weights: Stage1Weights,
    pub seed: u64,
    /// Segmentation-aware discriminator in stage 2.
    pub sad: bool,
    /// Feature loss in stage 2.
    pub afe: bool,
    /// Allows stage 2 to start from freshly initialized networks.
    #[serde(default)]
    pub cold_start: bool,
    pub norm: NormPolicy,
    /// Steps between validations; `None` validates once per epoch.
    #[serde(default)]
    pub val_every: Option<usize>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

impl TrainConfig {
    /// Batch 16, learning rate 1e-4, betas 0.9/0.999, 100 joint epochs.
    pub fn full() -> Self {
        Self {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 16,
            stage1: Schedule::Epochs(100),
            stage2: Schedule::Epochs(100),
            weights: LossWeights::default(),
            stage1_weights: Stage1Weights::default(),
            seed: 0,
            sad: true,
            afe: true,
            cold_start: false,
            norm: NormPolicy::Auto,
            val_every: None,
            ignore_index: IGNORE_INDEX,
        }
    }

    /// Step-based schedule sized for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            stage1: Schedule::Steps(200),
            stage2: Schedule::Steps(200),
            stage1_weights: Stage1Weights {
                pixel: 1.0,
                perceptual: 0.1,
                adversarial: 5e-3,
            },
            seed: 1,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.val_every == Some(0) {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        let s1 = self.stage1_weights;
        if [s1.pixel, s1.perceptual, s1.adversarial]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(format!(
                "stage-1 weights must be finite and non-negative: {s1:?}"
            )));
        }
        self.weights.validate()
    }

    fn norm_mode(&self) -> NormMode {
        match self.norm {
            NormPolicy::Batch => NormMode::Batch,
            NormPolicy::Running => NormMode::Running,
            NormPolicy::Auto if self.batch_size >= MIN_BATCH_FOR_BATCH_STATS => NormMode::Batch,
            NormPolicy::Auto => NormMode::Running,
        }
    }

    fn adam(&self) -> Adam {
        Adam::new(self.lr, self.adam_beta1, self.adam_beta2)
    }
}

/// Sink for `train_log.jsonl` records. Every record is also kept in memory.
pub struct TrainLog {
    echo: Value,
    records: Vec<Value>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    /// In-memory log carrying `echo` as the configuration record.
    pub fn memory(echo: Value) -> Self {
        Self {
            echo,
            records: Vec::new(),
            sink: None,
        }
    }

    /// Log that also appends JSON lines to `path`.
    pub fn to_file(path: &Path, echo: Value) -> Result<Self> {
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self {
            echo,
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    /// Log that appends JSON lines to an existing or new file at `path`.
    pub fn append_to(path: &Path, echo: Value) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            echo,
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn echo(&self) -> &Value {
        &self.echo
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    /// Records whose `kind` equals `kind`.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records
            .iter()
            .filter(move |r| r.get("kind").and_then(Value::as_str) == Some(kind))
    }

    pub fn push(&mut self, record: Value) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(io_err(Path::new("train_log.jsonl")))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn header(&mut self, stage: u8) -> Result<()> {
        let rec = json!({
            "kind": "header",
            "stage": stage,
            "format_version": FORMAT_VERSION,
            "config": self.echo.clone(),
        });
        self.push(rec)
    }

    fn step(&mut self, stage: u8, step: usize, losses: &LossBundle, lr: f64) -> Result<()> {
        self.push(json!({
            "kind": "step",
            "stage": stage,
            "step": step,
            "losses": losses,
            "lr": lr,
        }))
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N×3×s×s`.
    pub lr: Tensor,
    /// `N×3×S×S`.
    pub hr: Tensor,
    /// `N·S·S` labels, batch-major.
    pub labels: Vec<u8>,
    /// `N×C×S×S`, zero at ignored pixels.
    pub onehot: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], num_classes: usize, ignore: u8) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let lrs: Vec<&ImageTensor> = samples.iter().map(|s| &s.lr).collect();
        let hrs: Vec<&ImageTensor> = samples.iter().map(|s| &s.hr).collect();
        let mut labels = Vec::new();
        let mut onehots = Vec::new();
        for s in samples {
            s.label.validate(num_classes, ignore)?;
            labels.extend_from_slice(s.label.data());
            let oh = encode_onehot(&s.label, num_classes, ignore)?;
            let (h, w) = (s.label.height(), s.label.width());
            onehots.push(oh.into_reshape(&[1, num_classes, h, w]));
        }
        Ok(Self {
            lr: ImageTensor::batch(&lrs),
            hr: ImageTensor::batch(&hrs),
            labels,
            onehot: Tensor::stack_batch(&onehots),
        })
    }

    pub fn len(&self) -> usize {
        self.lr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded epoch-wise permutation of sample indices.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
    epoch: usize,
}

impl BatchOrder {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut o = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            pos: 0,
            batch,
            epoch: 0,
        };
        o.perm.shuffle(&mut o.rng);
        o
    }

    fn steps_per_epoch(&self) -> usize {
        self.perm.len().div_ceil(self.batch)
    }

    /// Next batch and whether it closes an epoch.
    fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let end = (self.pos + self.batch).min(self.perm.len());
        let idx = self.perm[self.pos..end].to_vec();
        self.pos = end;
        let closes = self.pos == self.perm.len();
        if closes {
            self.pos = 0;
            self.epoch += 1;
            self.perm.shuffle(&mut self.rng);
        }
        (idx, closes)
    }
}

fn check_finite(stage: u8, step: usize, b: &LossBundle, log: &mut TrainLog) -> Result<()> {
    if let Some((name, value)) = b.first_non_finite() {
        log.push(json!({
            "kind": "abort",
            "stage": stage,
            "step": step,
            "loss": name,
            "value": value.to_string(),
        }))?;
        return Err(Error::Divergence {
            stage,
            step,
            loss: name.to_string(),
            value,
        });
    }
    Ok(())
}

/// Logs layers whose normalized top singular value leaves [`SIGMA_BAND`].
fn sigma_diagnostics(stage: u8, step: usize, d: &Discriminator, log: &mut TrainLog) -> Result<()> {
    for (layer, sigma) in d.normalized_sigmas() {
        if !(SIGMA_BAND.0..=SIGMA_BAND.1).contains(&sigma) {
            log.push(json!({
                "kind": "diagnostic",
                "stage": stage,
                "step": step,
                "layer": layer,
                "sigma": sigma,
                "message": "normalized spectral norm outside the expected band",
            }))?;
        }
    }
    Ok(())
}

/// One discriminator update on `real` against detached `fake`; returns `L_D`.
fn discriminator_step(
    d: &mut Discriminator,
    opt: &mut Adam,
    real: &Var,
    fake: &Var,
) -> Result<f64> {
    let mut b = Binder::trainable();
    let lr = d.forward(&mut b, real)?;
    let lf = d.forward(&mut b, &fake.detach())?;
    let loss = disc_loss_var(&lr, &lf);
    let value = loss.item();
    if value.is_finite() {
        let grads = b.gradients(&loss.backward());
        opt.step(d.params_mut(), &grads);
    }
    Ok(value)
}

/// Result of pretraining.
pub struct Stage1Outcome {
    pub generator: Generator,
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossBundle>,
}

/// Pretrains the generator; the returned checkpoint holds the generator, the
/// RGB-only discriminator and both optimizer states.
pub fn pretrain_stage1(
    models: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Sample],
    log: &mut TrainLog,
) -> Result<Stage1Outcome> {
    models.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid(
            "stage 1 needs at least one training sample".into(),
        ));
    }
    let c = models.num_classes();
    let mut gen = build_generator(&models.generator, cfg.seed)?;
    let mut disc = build_discriminator(&models.discriminator.rgb_only(), cfg.seed.wrapping_add(2))?;
    let afe = build_extractor(&models.afe)?;
    let w = cfg.stage1_weights;
    let mut opt_g = cfg.adam();
    let mut opt_d = cfg.adam();
    let mut order = BatchOrder::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(3));
    let total = cfg.stage1.total_steps(order.steps_per_epoch());
    let iters = models.discriminator.power_iterations;
    log.header(1)?;
    let mut losses = Vec::with_capacity(total);

    for step in 1..=total {
        let (idx, _) = order.next_batch();
        let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::from_samples(&refs, c, cfg.ignore_index)?;
        let hr = Var::constant(batch.hr.clone());

        let mut gb = Binder::trainable();
        let sr = gen.forward(&mut gb, &Var::constant(batch.lr.clone()))?;

        let mut bundle = LossBundle::default();
        if w.adversarial > 0.0 {
            disc.refresh(iters);
            let d = discriminator_step(&mut disc, &mut opt_d, &hr, &sr)?;
            bundle.d = Some(d);
        }

        let l1 = pixel_l1_var(&hr, &sr)?;
        let mut obj = l1.scale(w.pixel);
        bundle.l1 = Some(l1.item());
        if w.perceptual > 0.0 {
            let fea = feature_loss_var(&afe.extract_var(&hr)?, &afe.extract_var(&sr)?)?;
            bundle.fea = Some(fea.item());
            obj = obj.add(&fea.scale(w.perceptual));
        }
        if w.adversarial > 0.0 {
            let adv = adv_loss_var(&disc.forward(&mut Binder::frozen(), &sr)?);
            bundle.adv = Some(adv.item());
            obj = obj.add(&adv.scale(w.adversarial));
        }
        bundle.total = obj.item();
        check_finite(1, step, &bundle, log)?;
        let grads = gb.gradients(&obj.backward());
        opt_g.step(gen.params_mut(), &grads);
        log.step(1, step, &bundle, cfg.lr)?;
        losses.push(bundle);
    }

    let mut ck = Checkpoint::new(1, total, order.epoch, log.echo().clone());
    ck.put_module(GENERATOR, &gen);
    ck.put_adam(GENERATOR, &opt_g);
    ck.put_module(DISCRIMINATOR_RGB, &disc);
    ck.put_adam(DISCRIMINATOR_RGB, &opt_d);
    Ok(Stage1Outcome {
        generator: gen,
        checkpoint: ck,
        losses,
    })
}

/// Networks entering the joint objective.
pub struct JointNets<'a> {
    pub generator: &'a Generator,
    pub segmenter: &'a SegNet,
    /// Frozen segmentation-aware discriminator; `None` drops the adversarial term.
    pub discriminator: Option<&'a Discriminator>,
    /// `None` drops the feature term.
    pub extractor: Option<&'a dyn FeatureExtractor>,
}

/// Graph of the joint objective for one batch.
pub struct JointEval {
    pub total: Var,
    pub sr: Var,
    pub logits: Var,
    pub gen_binder: Binder,
    pub seg_binder: Binder,
    pub bundle: LossBundle,
}

impl JointEval {
    /// Gradients of the total for generator and segmenter parameters.
    pub fn gradients(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let g = self.total.backward();
        (self.gen_binder.gradients(&g), self.seg_binder.gradients(&g))
    }
}

/// Builds `L_tot` for `batch`.
pub fn joint_objective(
    nets: &JointNets<'_>,
    batch: &Batch,
    weights: &LossWeights,
    mode: NormMode,
    ignore: u8,
) -> Result<JointEval> {
    let fwd = joint_forward(nets.generator, nets.segmenter, batch, mode)?;
    finish_objective(fwd, nets, batch, weights, ignore)
}

fn joint_forward(
    gen: &Generator,
    seg: &SegNet,
    batch: &Batch,
    mode: NormMode,
) -> Result<JointEval> {
    let mut gb = Binder::trainable();
    let mut sb = Binder::trainable();
    let sr = gen.forward(&mut gb, &Var::constant(batch.lr.clone()))?;
    let logits = seg.forward(&mut sb, &sr, mode)?;
    Ok(JointEval {
        total: Var::constant(Tensor::scalar(0.0)),
        sr,
        logits,
        gen_binder: gb,
        seg_binder: sb,
        bundle: LossBundle::default(),
    })
}

fn finish_objective(
    mut fwd: JointEval,
    nets: &JointNets<'_>,
    batch: &Batch,
    weights: &LossWeights,
    ignore: u8,
) -> Result<JointEval> {
    let hr = Var::constant(batch.hr.clone());
    let (sr, logits) = (&fwd.sr, &fwd.logits);
    let l2 = pixel_l2_var(&hr, sr)?;
    let ce = cross_entropy_var(logits, &batch.labels, ignore)?;
    let fea = match nets.extractor {
        Some(fx) => Some(feature_loss_var(
            &fx.extract_var(&hr)?,
            &fx.extract_var(sr)?,
        )?),
        None => None,
    };
    let adv = match nets.discriminator {
        Some(d) => Some(adv_loss_var(
            &d.forward(&mut Binder::frozen(), &fake_pair_var(sr, logits)?)?,
        )),
        None => None,
    };
    let total = total_loss_var(&l2, fea.as_ref(), adv.as_ref(), &ce, weights);
    fwd.bundle = LossBundle {
        l2: Some(l2.item()),
        fea: fea.as_ref().map(Var::item),
        adv: adv.as_ref().map(Var::item),
        ce: Some(ce.item()),
        total: total.item(),
        ..LossBundle::default()
    };
    fwd.total = total;
    Ok(fwd)
}

/// Super-resolution followed by segmentation.
pub trait SegPipeline {
    fn num_classes(&self) -> usize;

    /// Reconstruction and per-class logits for one low-resolution image.
    fn infer(&self, lr: &ImageTensor) -> Result<(ImageTensor, SegLogits)>;
}

impl<T: SegPipeline + ?Sized> SegPipeline for std::rc::Rc<T> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn infer(&self, lr: &ImageTensor) -> Result<(ImageTensor, SegLogits)> {
        (**self).infer(lr)
    }
}

/// Trained generator and segmenter.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub generator: Generator,
    pub segmenter: SegNet,
}

impl JointModel {
    /// Rebuilds both networks from `ck`.
    pub fn from_checkpoint(models: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut generator = build_generator(&models.generator, 0)?;
        let mut segmenter = build_segnet(&models.segmenter, 0)?;
        ck.load_module(GENERATOR, &mut generator)?;
        ck.load_module(SEGMENTER, &mut segmenter)?;
        Ok(Self {
            generator,
            segmenter,
        })
    }
}

impl SegPipeline for JointModel {
    fn num_classes(&self) -> usize {
        self.segmenter.config().num_classes
    }

    fn infer(&self, lr: &ImageTensor) -> Result<(ImageTensor, SegLogits)> {
        let sr = crate::srgen::generate(&self.generator, lr)?;
        let logits = crate::segnet::segment(&self.segmenter, &sr)?;
        Ok((sr, logits))
    }
}

/// Dataset-level mIoU of `pipeline` over `split`.
pub fn validate(pipeline: &dyn SegPipeline, split: &[Sample], ignore: u8) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(pipeline.num_classes());
    for s in split {
        let (_, logits) = pipeline.infer(&s.lr)?;
        cm.add(&predict_labels(&logits), &s.label, ignore)?;
    }
    cm.miou()
}

/// One validation point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub step: usize,
    pub val_miou: f64,
}

/// Result of joint training.
pub struct Stage2Outcome {
    pub model: JointModel,
    /// Checkpoint with the highest validation mIoU; earliest wins ties.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub val_history: Vec<ValRecord>,
    pub losses: Vec<LossBundle>,
}

struct Stage2State {
    gen: Generator,
    seg: SegNet,
    disc: Option<Discriminator>,
    opt_g: Adam,
    opt_s: Adam,
    opt_d: Adam,
}

impl Stage2State {
    fn snapshot(&self, step: usize, epoch: usize, echo: &Value) -> Checkpoint {
        let mut ck = Checkpoint::new(2, step, epoch, echo.clone());
        ck.put_module(GENERATOR, &self.gen);
        ck.put_adam(GENERATOR, &self.opt_g);
        ck.put_module(SEGMENTER, &self.seg);
        ck.put_adam(SEGMENTER, &self.opt_s);
        if let Some(d) = &self.disc {
            ck.put_module(DISCRIMINATOR, d);
            ck.put_adam(DISCRIMINATOR, &self.opt_d);
        }
        ck
    }

    fn model(&self) -> JointModel {
        JointModel {
            generator: self.gen.clone(),
            segmenter: self.seg.clone(),
        }
    }
}

/// Joint training of generator and segmenter.
///
/// `init` supplies the generator (and, if present, the segmenter); without it
/// `cfg.cold_start` must be set.
pub fn train_stage2_joint(
    models: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    init: Option<&Checkpoint>,
    log: &mut TrainLog,
) -> Result<Stage2Outcome> {
    models.validate()?;
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "joint training needs non-empty train and validation splits".into(),
        ));
    }
    let c = models.num_classes();
    let mut gen = build_generator(&models.generator, cfg.seed)?;
    let mut seg = build_segnet(&models.segmenter, cfg.seed.wrapping_add(1))?;
    match init {
        Some(ck) => {
            ck.load_module(GENERATOR, &mut gen)?;
            if ck.has_section(SEGMENTER) {
                ck.load_module(SEGMENTER, &mut seg)?;
            }
        }
        None if cfg.cold_start => {}
        None => {
            return Err(Error::Config(
                "stage 2 needs a stage-1 checkpoint or the cold-start flag".into(),
            ))
        }
    }
    let disc = if cfg.sad {
        Some(build_discriminator(
            &models.discriminator,
            cfg.seed.wrapping_add(2),
        )?)
    } else {
        None
    };
    let afe = if cfg.afe {
        Some(build_extractor(&models.afe)?)
    } else {
        None
    };
    let mut st = Stage2State {
        gen,
        seg,
        disc,
        opt_g: cfg.adam(),
        opt_s: cfg.adam(),
        opt_d: cfg.adam(),
    };
    let mode = cfg.norm_mode();
    let iters = models.discriminator.power_iterations;
    let mut order = BatchOrder::new(train.len(), cfg.batch_size, cfg.seed.wrapping_add(3));
    let total = cfg.stage2.total_steps(order.steps_per_epoch());
    log.header(2)?;

    let mut losses = Vec::with_capacity(total);
    let mut history: Vec<ValRecord> = Vec::new();
    let mut best: Option<Checkpoint> = None;

    for step in 1..=total {
        let (idx, closes_epoch) = order.next_batch();
        let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let batch = Batch::from_samples(&refs, c, cfg.ignore_index)?;

        let fwd = joint_forward(&st.gen, &st.seg, &batch, mode)?;
        let mut d_loss = None;
        if let Some(d) = st.disc.as_mut() {
            d.refresh(iters);
            let real = real_pair_var(
                &Var::constant(batch.hr.clone()),
                &Var::constant(batch.onehot.clone()),
            )?;
            let fake = fake_pair_var(&fwd.sr.detach(), &fwd.logits.detach())?;
            let value = discriminator_step(d, &mut st.opt_d, &real, &fake)?;
            d_loss = Some(value);
            let probe = LossBundle {
                d: d_loss,
                total: 0.0,
                ..LossBundle::default()
            };
            check_finite(2, step, &probe, log)?;
            sigma_diagnostics(2, step, d, log)?;
        }
        let nets = JointNets {
            generator: &st.gen,
            segmenter: &st.seg,
            discriminator: st.disc.as_ref(),
            extractor: afe.as_deref(),
        };
        let mut eval = finish_objective(fwd, &nets, &batch, &cfg.weights, cfg.ignore_index)?;
        eval.bundle.d = d_loss;
        check_finite(2, step, &eval.bundle, log)?;
        let (g_grads, s_grads) = eval.gradients();
        let updates = eval.seg_binder.take_norm_updates();
        let bundle = eval.bundle.clone();
        drop(eval);
        st.opt_g.step(st.gen.params_mut(), &g_grads);
        st.opt_s.step(st.seg.params_mut(), &s_grads);
        if mode == NormMode::Batch {
            st.seg.apply_norm_updates(&updates);
        }
        log.step(2, step, &bundle, cfg.lr)?;
        losses.push(bundle);

        let due = match cfg.val_every {
            Some(k) => step % k == 0,
            None => closes_epoch,
        };
        if due || step == total {
            let miou = validate(&st.model(), val, cfg.ignore_index)?;
            let rec = ValRecord {
                epoch: order.epoch,
                step,
                val_miou: miou,
            };
            log.push(json!({
                "kind": "val",
                "stage": 2,
                "step": step,
                "epoch": rec.epoch,
                "val_miou": miou,
            }))?;
            let improved = history.iter().all(|h| miou > h.val_miou);
            history.push(rec);
            if improved {
                let mut ck = st.snapshot(step, order.epoch, log.echo());
                ck.meta.val_miou = Some(miou);
                best = Some(ck);
            }
        }
    }

    let mut last = st.snapshot(total, order.epoch, log.echo());
    last.meta.val_miou = history.last().map(|h| h.val_miou);
    let best = best.unwrap_or_else(|| last.clone());
    Ok(Stage2Outcome {
        model: st.model(),
        best,
        last,
        val_history: history,
        losses,
    })
}
