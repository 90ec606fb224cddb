//! Mini-batch Adam training, validation-best checkpointing and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::loss::{compute_loss, loss_gradient, LossBreakdown, LossOptions, LossVariant};
use crate::metrics::{aggregate, MetricOptions, MetricsReport};
use crate::net::gradcheck::Objective;
use crate::net::{forward_pass, stack_tensors, ArchConfig, ModelParams, Prediction, Tensor};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::raster::{build_stack, drivable_mask, LayerSpec, Mask, RasterConfig};
use crate::scenegen::{Sample, SceneFamily};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub loss: LossVariant,
    pub loss_options: LossOptions,
    /// Seeds parameter initialization and the shuffle stream.
    pub seed: u64,
    /// Joint gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Share of samples held out for validation when no explicit split is given.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 100,
            epochs: 20,
            adam: AdamConfig::default(),
            loss: LossVariant::AngleScaled,
            loss_options: LossOptions::default(),
            seed: 0,
            grad_clip: None,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Smaller batches for single-machine runs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Everything that fixes the network's shape and its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSetup {
    pub arch: ArchConfig,
    pub raster: RasterConfig,
    pub layers: Vec<LayerSpec>,
}

impl ModelSetup {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.raster.validate()?;
        if self.layers.len() != self.arch.backbones {
            return Err(Error::Config(format!(
                "{} raster layers for {} backbones",
                self.layers.len(),
                self.arch.backbones
            )));
        }
        if self.raster.size_px != self.arch.raster_size {
            return Err(Error::Config(format!(
                "raster is {} px but the model expects {} px",
                self.raster.size_px, self.arch.raster_size
            )));
        }
        Ok(())
    }
}

/// A sample rasterized and ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample_id: String,
    pub family: SceneFamily,
    pub inputs: Vec<Tensor>,
    pub kinematics: [f64; 3],
    pub gt: Vec<Vec2>,
    pub mask: Mask,
}

pub fn prepare(samples: &[Sample], raster: &RasterConfig, layers: &[LayerSpec]) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let stack = build_stack(&s.scene, layers, raster)?;
            Ok(Prepared {
                sample_id: s.sample_id.clone(),
                family: s.family,
                inputs: stack_tensors(&stack),
                kinematics: s.kinematics,
                gt: s.gt.points.clone(),
                mask: drivable_mask(&s.scene, raster)?,
            })
        })
        .collect()
}

/// Deterministic split: a sample goes to validation when the leading 8 bytes
/// of sha256(sample_id), read as a fraction of 2^64, fall below `fraction`.
pub fn split_by_hash<T, F>(items: Vec<T>, fraction: f64, id: F) -> (Vec<T>, Vec<T>)
where
    F: Fn(&T) -> &str,
{
    let mut train = Vec::new();
    let mut val = Vec::new();
    for item in items {
        let digest = Sha256::digest(id(&item).as_bytes());
        let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        if (head as f64 / 2f64.powi(64)) < fraction {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    (train, val)
}

/// Mean loss and mean parameter gradient over `batch`, summed in slice order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[&Prepared],
    variant: LossVariant,
    opts: LossOptions,
) -> Result<(f64, Vec<Tensor>, Vec<LossBreakdown>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape.clone()))
        .collect();
    let mut total = 0.0;
    let mut breakdowns = Vec::with_capacity(batch.len());
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        let pass = forward_pass(params, &s.inputs, s.kinematics)?;
        let lg = loss_gradient(&pass.prediction(), &s.gt, variant, opts)?;
        let d_traj: Vec<Vec<Vec2>> = lg
            .d_trajectories
            .iter()
            .map(|t| t.iter().map(|&p| p * w).collect())
            .collect();
        let d_logits: Vec<f64> = lg.d_logits.iter().map(|v| v * w).collect();
        for (acc, g) in grads.iter_mut().zip(pass.backward(params, &d_traj, &d_logits)) {
            acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        total += lg.breakdown.total;
        breakdowns.push(lg.breakdown);
    }
    Ok((total * w, grads, breakdowns))
}

pub fn predict(params: &ModelParams, sample: &Prepared) -> Result<Prediction> {
    Ok(forward_pass(params, &sample.inputs, sample.kinematics)?.prediction())
}

/// Mean loss over `data` without gradients.
pub fn dataset_loss(params: &ModelParams, data: &[Prepared], variant: LossVariant, opts: LossOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let mut sum = 0.0;
    for s in data {
        sum += compute_loss(&predict(params, s)?, &s.gt, variant, opts)?.total;
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Equal to `train_loss` when there is no validation set.
    pub val_loss: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Loss terms of one sample the first time it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyLog {
    pub sample_id: String,
    pub winner_index: usize,
    pub regression: f64,
    pub classification: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the last step.
    pub last: Checkpoint,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub penalties: Vec<PenaltyLog>,
}

impl TrainOutcome {
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,wall_s\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{:.3}\n", e.epoch, e.train_loss, e.val_loss, e.wall_s));
        }
        out
    }

    pub fn step_csv(&self) -> String {
        let mut out = String::from("step,epoch,batch,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.epoch, s.batch, s.loss));
        }
        out
    }

    pub fn penalty_csv(&self) -> String {
        let mut out = String::from("sample_id,winner_index,regression,classification,penalty\n");
        for p in &self.penalties {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.sample_id, p.winner_index, p.regression, p.classification, p.penalty
            ));
        }
        out
    }
}

/// SHA-256 over the JSON of the training config and model setup.
pub fn config_hash(cfg: &TrainConfig, setup: &ModelSetup) -> String {
    let json = serde_json::to_string(&(cfg, setup)).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Trains from a fresh initialization. An empty `val` selects the best
/// epoch by mean training loss instead.
pub fn train(setup: &ModelSetup, cfg: &TrainConfig, train_set: &[Prepared], val: &[Prepared]) -> Result<TrainOutcome> {
    setup.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let hash = config_hash(cfg, setup);
    let mut params = ModelParams::init(&setup.arch, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, params.tensors());
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let snapshot = |params: &ModelParams, adam: &Adam, epoch: usize, val_loss: Option<f64>| Checkpoint {
        params: params.clone(),
        raster: setup.raster.clone(),
        layers: setup.layers.clone(),
        train_config_hash: hash.clone(),
        step: adam.step,
        epoch,
        best_validation: false,
        validation_loss: val_loss,
        optimizer: Some(adam.clone()),
    };

    let mut best: Option<Checkpoint> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut penalties = Vec::with_capacity(train_set.len());
    let mut seen = vec![false; train_set.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut epoch_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads, parts) = batch_loss_and_grad(&params, &batch, cfg.loss, cfg.loss_options)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} in epoch {epoch} batch {b} (parameter norm {:.6e})",
                    params.l2_norm()
                )));
            }
            for (&i, part) in chunk.iter().zip(&parts) {
                if !seen[i] {
                    seen[i] = true;
                    penalties.push(PenaltyLog {
                        sample_id: train_set[i].sample_id.clone(),
                        winner_index: part.winner_index,
                        regression: part.regression,
                        classification: part.classification,
                        penalty: part.penalty,
                    });
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.update(params.tensors_mut(), &grads, cfg.learning_rate)?;
            if !params.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters after epoch {epoch} batch {b}"
                )));
            }
            steps.push(StepLog {
                step: adam.step,
                epoch,
                batch: b,
                loss,
            });
            epoch_sum += loss * chunk.len() as f64;
        }
        let train_loss = epoch_sum / train_set.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            dataset_loss(&params, val, cfg.loss, cfg.loss_options)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss in epoch {epoch} (parameter norm {:.6e})",
                params.l2_norm()
            )));
        }
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_s: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|b| val_loss < b.validation_loss.unwrap_or(f64::INFINITY)) {
            best = Some(snapshot(&params, &adam, epoch, Some(val_loss)));
        }
    }
    let mut best = best.expect("at least one epoch");
    best.best_validation = true;
    let last_val = epochs.last().map(|e| e.val_loss);
    Ok(TrainOutcome {
        best,
        last: snapshot(&params, &adam, cfg.epochs, last_val),
        epochs,
        steps,
        penalties,
    })
}

/// Predictions and metrics of a checkpoint on already-prepared samples.
pub fn evaluate_prepared(
    ck: &Checkpoint,
    data: &[Prepared],
    k_list: &[usize],
    opts: &MetricOptions,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = data
        .iter()
        .map(|s| predict(&ck.params, s))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<Vec2>> = data.iter().map(|s| s.gt.clone()).collect();
    let masks: Vec<Mask> = data.iter().map(|s| s.mask.clone()).collect();
    Ok((aggregate(&preds, &gts, &masks, k_list, opts)?, preds))
}

/// Rasterizes `samples` with the checkpoint's own raster setup, then evaluates.
pub fn evaluate(
    ck: &Checkpoint,
    samples: &[Sample],
    k_list: &[usize],
    opts: &MetricOptions,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let setup = ModelSetup {
        arch: ck.params.arch.clone(),
        raster: ck.raster.clone(),
        layers: ck.layers.clone(),
    };
    setup.validate()?;
    if let Some(s) = samples.iter().find(|s| s.gt.len() != setup.arch.horizon) {
        return Err(Error::Config(format!(
            "sample {} has {} ground-truth points, the model predicts {}",
            s.sample_id,
            s.gt.len(),
            setup.arch.horizon
        )));
    }
    let data = prepare(samples, &setup.raster, &setup.layers)?;
    evaluate_prepared(ck, &data, k_list, opts)
}

/// Mean batch loss as a function of the flat parameter vector.
pub struct LossObjective<'a> {
    pub template: ModelParams,
    pub batch: Vec<&'a Prepared>,
    pub variant: LossVariant,
    pub options: LossOptions,
}

impl LossObjective<'_> {
    fn params_at(&self, point: &[f64]) -> ModelParams {
        let mut p = self.template.clone();
        p.set_flat(point);
        p
    }
}

impl Objective for LossObjective<'_> {
    fn dim(&self) -> usize {
        self.template.num_scalars()
    }

    fn value(&self, point: &[f64]) -> Result<f64> {
        let p = self.params_at(point);
        let mut sum = 0.0;
        for s in &self.batch {
            sum += compute_loss(&predict(&p, s)?, &s.gt, self.variant, self.options)?.total;
        }
        Ok(sum / self.batch.len() as f64)
    }

    fn value_and_grad(&self, point: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.params_at(point);
        let (loss, grads, _) = batch_loss_and_grad(&p, &self.batch, self.variant, self.options)?;
        Ok((loss, grads.iter().flat_map(|t| t.data.iter().copied()).collect()))
    }
}
