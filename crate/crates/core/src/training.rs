//! Joint optimisation of every output path of an ensemble member.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::attend_on;
use crate::data::{AnnotatedFrame, ClassLabel, DatasetSplit, SegmentationMask};
use crate::encoder::{encode_on, head_on, predict, BackboneSpec, Model, ProbVector};
use crate::error::{Error, Result};
use crate::rng::{Seeder, DEFAULT_SEED};
use crate::segmentation::{decode_on, seg_target, DecoderSpec};
use crate::tape::{self, NodeId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_attn: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_attn: 1.0, lambda_seg: 1.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_attn: f64, lambda_seg: f64) -> Result<Self> {
        let w = Self { lambda_attn, lambda_seg };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_attn", self.lambda_attn), ("lambda_seg", self.lambda_seg)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub backbones: Vec<BackboneSpec>,
    /// Serial gradient reductions; when off, per-frame gradients within a
    /// batch are reduced in whatever order worker threads finish.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: DEFAULT_SEED,
            loss_weights: LossWeights::default(),
            backbones: vec![BackboneSpec::residual18(4, 0.125), BackboneSpec::plainconv16(4, 0.0625)],
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.backbones.is_empty() {
            return Err(Error::Config("at least one backbone is required".into()));
        }
        self.loss_weights.validate()?;
        self.backbones.iter().try_for_each(BackboneSpec::validate)
    }
}

fn check_finite(p: &[f64], what: &'static str) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) { Ok(()) } else { Err(Error::NonFinite(what)) }
}

/// `CE(std) + λ_attn·CE(attn) + λ_seg·BCE_mean(pred_mask, seg_target(frame))`.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before logs. A missing
/// `attn_probs` drops the attention term.
pub fn combined_loss(
    std_probs: &ProbVector,
    attn_probs: Option<&ProbVector>,
    pred_mask: &SegmentationMask,
    frame: &AnnotatedFrame,
    w: &LossWeights,
) -> Result<f64> {
    check_finite(&std_probs.as_array(), "standard-path probabilities")?;
    if let Some(a) = attn_probs {
        check_finite(&a.as_array(), "attention-path probabilities")?;
    }
    check_finite(pred_mask.values().data(), "predicted mask")?;
    check_finite(&[w.lambda_attn, w.lambda_seg], "loss weights")?;
    let target = seg_target(frame)?;
    if target.values().shape() != pred_mask.values().shape() {
        return Err(Error::Shape("predicted mask does not match frame".into()));
    }
    let class = frame.label.index();
    let mut loss = tape::cross_entropy(&std_probs.as_array(), class);
    if let Some(a) = attn_probs {
        loss += w.lambda_attn * tape::cross_entropy(&a.as_array(), class);
    }
    loss += w.lambda_seg * tape::bce_mean(pred_mask.values().data(), target.values().data());
    Ok(loss)
}

/// Per-path outputs recorded while building a frame's loss.
pub(crate) struct FrameGraph {
    pub root: NodeId,
    pub std_probs: NodeId,
    pub attn_probs: Option<NodeId>,
    pub pred_mask: Option<NodeId>,
}

pub(crate) fn frame_graph(
    tape: &mut Tape<'_>,
    model: &Model,
    frame: &AnnotatedFrame,
    w: &LossWeights,
) -> Result<FrameGraph> {
    model.check_input(&frame.image)?;
    let class = frame.label.index();
    let x = tape.input(frame.image.pixels().clone());
    let stages = encode_on(tape, model.spec(), x)?;
    let last = *stages.last().expect("stages");
    let std_probs = head_on(tape, last)?;
    let mut terms = vec![(tape.cross_entropy(std_probs, class), 1.0)];

    let target = seg_target(frame)?;
    let attn_probs = if w.lambda_attn > 0.0 {
        let p = attend_on(tape, last, &target, frame.label)?;
        terms.push((tape.cross_entropy(p, class), w.lambda_attn));
        Some(p)
    } else {
        None
    };
    let pred_mask = match model.decoder() {
        Some(dec) if w.lambda_seg > 0.0 => {
            let p = decode_on(tape, model.spec(), dec, &stages)?;
            terms.push((tape.bce_mean(p, target.values().clone())?, w.lambda_seg));
            Some(p)
        }
        _ => None,
    };
    let root = tape.weighted_sum(terms);
    Ok(FrameGraph { root, std_probs, attn_probs, pred_mask })
}

/// Training loss of one frame.
pub fn frame_loss(model: &Model, frame: &AnnotatedFrame, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new(model.params());
    let g = frame_graph(&mut tape, model, frame, w)?;
    Ok(tape.value(g.root).data()[0])
}

/// Training loss of one frame and its gradient with respect to every parameter.
pub fn frame_loss_and_gradients(model: &Model, frame: &AnnotatedFrame, w: &LossWeights) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new(model.params());
    let g = frame_graph(&mut tape, model, frame, w)?;
    Ok((tape.value(g.root).data()[0], tape.backward(g.root)))
}

/// Per-path probabilities and mask for one frame, as seen by the loss.
pub fn frame_outputs(
    model: &Model,
    frame: &AnnotatedFrame,
    w: &LossWeights,
) -> Result<(f64, ProbVector, Option<ProbVector>, Option<SegmentationMask>)> {
    let mut tape = Tape::new(model.params());
    let g = frame_graph(&mut tape, model, frame, w)?;
    let std = ProbVector::from_slice_unchecked(tape.value(g.std_probs).data());
    let attn = g.attn_probs.map(|p| ProbVector::from_slice_unchecked(tape.value(p).data()));
    let mask = match g.pred_mask {
        Some(p) => {
            let t = tape.value(p).clone();
            let (_, h, w) = t.dims3()?;
            Some(SegmentationMask::predicted(t.reshape(&[h, w])?)?)
        }
        None => None,
    };
    Ok((tape.value(g.root).data()[0], std, attn, mask))
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    fn new(params: &ParamStore, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for id in 0..params.len() {
            let g = grads.tensor(id).data();
            let m = self.m.tensor_mut(id).data_mut();
            let v = self.v.tensor_mut(id).data_mut();
            let p = params.tensor_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn add_grads(mut a: (f64, ParamStore), b: (f64, ParamStore)) -> (f64, ParamStore) {
    a.0 += b.0;
    for id in 0..a.1.len() {
        a.1.tensor_mut(id).add_assign(b.1.tensor(id));
    }
    a
}

fn batch_gradients(
    model: &Model,
    batch: &[&AnnotatedFrame],
    w: &LossWeights,
    deterministic: bool,
) -> Result<(f64, ParamStore)> {
    let zero = || (0.0, model.params().zeros_like());
    if deterministic {
        let mut acc = zero();
        for f in batch {
            acc = add_grads(acc, frame_loss_and_gradients(model, f, w)?);
        }
        Ok(acc)
    } else {
        batch
            .par_iter()
            .map(|f| frame_loss_and_gradients(model, f, w))
            .try_reduce(zero, |a, b| Ok(add_grads(a, b)))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over members of each member's mean per-frame loss.
    pub mean_loss: f64,
    /// Ensemble accuracy on the validation frames.
    pub val_accuracy: f64,
    pub member_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.mean_loss, r.val_accuracy));
        }
        s
    }
}

/// Fraction of `frames` whose ensemble prediction matches the label.
pub fn ensemble_accuracy(models: &[Model], frames: &[AnnotatedFrame]) -> Result<f64> {
    if frames.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for f in frames {
        if predict(&f.image, models)?.0 == f.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / frames.len() as f64)
}

fn train_member_epoch(
    model: &mut Model,
    adam: &mut Adam,
    frames: &[AnnotatedFrame],
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&AnnotatedFrame> = chunk.iter().map(|&i| &frames[i]).collect();
        let (loss, mut grads) = batch_gradients(model, &batch, &cfg.loss_weights, cfg.deterministic)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        total += loss;
        for id in 0..grads.len() {
            grads.tensor_mut(id).scale(1.0 / batch.len() as f64);
        }
        adam.update(model.params_mut(), &grads);
    }
    Ok(total / frames.len() as f64)
}

/// Trains one model per configured backbone on `split.train`.
///
/// Each epoch's batch order comes from substream `shuffle/epoch{e}` and is
/// shared by all members; member `k` initialises from `init/member{k}`.
pub fn train(split: &DatasetSplit, config: &TrainConfig) -> Result<(Vec<Model>, TrainLog)> {
    config.validate()?;
    let frames = &split.train;
    for label in [ClassLabel::NonBleeding, ClassLabel::Bleeding] {
        if !frames.iter().any(|f| f.label == label) {
            return Err(Error::Dataset(format!("training set has no {label} frames")));
        }
    }
    let seeder = Seeder::new(config.seed);
    let mut models = config
        .backbones
        .iter()
        .enumerate()
        .map(|(k, spec)| Model::init(*spec, Some(DecoderSpec::for_backbone(spec)), &seeder, k))
        .collect::<Result<Vec<_>>>()?;
    let mut optimisers: Vec<Adam> = models.iter().map(|m| Adam::new(m.params(), config.learning_rate)).collect();

    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut seeder.stream(&format!("shuffle/epoch{epoch}")));

        let member_losses: Vec<f64> = if config.deterministic {
            models
                .iter_mut()
                .zip(&mut optimisers)
                .map(|(m, opt)| train_member_epoch(m, opt, frames, &order, config))
                .collect::<Result<_>>()?
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = models
                    .iter_mut()
                    .zip(&mut optimisers)
                    .map(|(m, opt)| {
                        let order = &order;
                        scope.spawn(move || train_member_epoch(m, opt, frames, order, config))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect::<Result<_>>()
            })?
        };
        for m in &mut models {
            m.meta.epoch = epoch;
        }
        let mean_loss = member_losses.iter().sum::<f64>() / member_losses.len() as f64;
        let val_accuracy = ensemble_accuracy(&models, &split.val)?;
        log::info!("epoch {epoch}: loss {mean_loss:.5} val_acc {val_accuracy:.4}");
        log.records.push(EpochRecord { epoch, mean_loss, val_accuracy, member_losses });
    }
    Ok((models, log))
}
