//! SGD with momentum over the composite loss, and the per-step training log.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{decode_level, DetectorModel};
use crate::error::{Error, Result};
use crate::loss::{assign_targets, yolo_loss, GroundTruthBox, LossBreakdown, LossConfig};
use crate::nn::{apply_bn_stats, Forward, Mode, BN_MOMENTUM};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            epochs: 300,
            batch_size: 32,
            loss: LossConfig::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Heavy-ball SGD: v ← μ·v + g, θ ← θ − lr·v.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub steps: usize,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, model: &mut DetectorModel, grads: &BTreeMap<String, Tensor>, lr: f64, momentum: f64) -> Result<()> {
        for (path, g) in grads {
            let p = model.params.get_mut(path)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("{path}: gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let v = self
                .velocity
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// One optimization step on a batch of `N×3×S×S` images.
///
/// The loss is the composite loss summed over levels and averaged over the
/// batch. Returns its breakdown as measured before the update. On a
/// non-finite loss or gradient the model is left untouched.
pub fn train_step(
    model: &mut DetectorModel,
    images: &Tensor,
    gts: &[Vec<GroundTruthBox>],
    opt: &mut Sgd,
    hyper: &TrainHyper,
) -> Result<LossBreakdown> {
    hyper.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 || n != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} images with {} ground-truth lists",
            gts.len()
        )));
    }
    let spec = model.config().grid_spec();
    let maps = gts
        .iter()
        .map(|g| assign_targets(g, &spec))
        .collect::<Result<Vec<_>>>()?;

    let (breakdown, grads, stats) = {
        let tape = Tape::new();
        let fx = Forward::new(&tape, &model.params, Mode::Train);
        let diag = |e: Error| match e {
            Error::NonFinite { index, value } => Error::NonFiniteLoss(format!(
                "step {}: non-finite activation {value} at index {index}",
                opt.steps
            )),
            other => other,
        };
        let raw = model.forward(&fx, tape.constant(images.clone())).map_err(diag)?;
        let decoded = raw
            .levels
            .iter()
            .zip(&spec.levels)
            .map(|(r, l)| decode_level(*r, l, spec.num_classes))
            .collect::<Result<Vec<_>>>()
            .map_err(diag)?;
        let (total, breakdown) = yolo_loss(&decoded, &maps, &hyper.loss).map_err(|e| match e {
            Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("step {}: {m}", opt.steps)),
            other => diag(other),
        })?;
        let inv_n = 1.0 / n as f64;
        let scaled = total.mul_scalar(inv_n).map_err(diag)?;
        let gm = tape.backward(scaled)?;
        let grads: BTreeMap<String, Tensor> = gm
            .named()
            .map(|(name, g)| (name.to_string(), g.clone()))
            .collect();
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss(format!(
                "step {}: non-finite gradient for {name}",
                opt.steps
            )));
        }
        (breakdown.scaled(inv_n), grads, fx.take_stats())
    };
    opt.step(model, &grads, hyper.lr, hyper.momentum)?;
    apply_bn_stats(&mut model.params, &stats, BN_MOMENTUM)?;
    Ok(breakdown)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,coord_xy,coord_wh,obj,noobj,cls,total,lr";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.coord_xy, l.coord_wh, l.obj, l.noobj, l.cls, l.total, self.lr
        )
    }
}

pub fn write_train_log(records: &[StepRecord]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// A training image (3×S×S) with its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

/// Stacks samples into an N×3×S×S batch.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Vec<Vec<GroundTruthBox>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape(
                "collate",
                format!("image {:?} in a batch of {shape:?}", s.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut batch_shape = vec![samples.len()];
    batch_shape.extend(&shape);
    Ok((
        Tensor::new(&batch_shape, data, false)?,
        samples.iter().map(|s| s.boxes.clone()).collect(),
    ))
}

/// Runs `hyper.epochs` epochs of shuffled mini-batches, calling `on_step`
/// after every step. Shuffling is driven by `seed` alone.
pub fn fit(
    model: &mut DetectorModel,
    samples: &[Sample],
    hyper: &TrainHyper,
    seed: u64,
    opt: &mut Sgd,
    mut on_step: impl FnMut(&StepRecord, &DetectorModel) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (images, gts) = collate(&batch)?;
            let loss = train_step(model, &images, &gts, opt, hyper)?;
            let rec = StepRecord {
                step: opt.steps,
                loss,
                lr: hyper.lr,
            };
            on_step(&rec, model)?;
            log.push(rec);
        }
    }
    Ok(log)
}
