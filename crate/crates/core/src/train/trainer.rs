//! Mini-batch training with per-epoch validation and best-F1 selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, Granularity, MetricReport};
use crate::model::{Model, Network};
use crate::numeric::{Gradients, Tape, Tensor};
use crate::params::ParamStore;
use crate::train::{adamw_step, augment, combined_loss, lr_schedule, AdamState, TrainConfig};

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricReport,
    /// Rate used for the epoch's last step.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,mean_train_loss,val_precision,val_recall,val_f1,val_iou,lr";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.epoch,
            self.train_loss,
            self.val.precision,
            self.val.recall,
            self.val.f1,
            self.val.iou,
            self.lr
        )
    }
}

/// Snapshot of the tunable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_f1: f64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, epoch: usize, val_f1: f64) -> Self {
        let params = model
            .params
            .iter()
            .filter(|(id, _)| model.mask.contains(*id))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint {
            epoch,
            val_f1,
            params,
        }
    }

    /// Write the snapshot back into a store with the same names.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (name, value) in &self.params {
            let id = store.id(name).ok_or_else(|| {
                Error::Contract(format!("checkpoint parameter {name} not in model"))
            })?;
            store.assign(id, value.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean loss over the un-augmented training set before any update.
    pub initial_loss: f64,
    pub log: Vec<EpochLog>,
    pub best: Checkpoint,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

/// Independent stream for `(seed, epoch, index)`.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn sample_loss_and_grads(
    model: &Model<f32>,
    sample: &SampleRecord,
    lambda: f64,
) -> Result<(f64, Gradients<f32>)> {
    let mut tape = Tape::with_params(&model.params);
    let x = tape.constant(sample.image.clone());
    let logits = model.net.forward(&mut tape, x)?;
    let prob = Network::crack_probability(&mut tape, logits)?;
    let loss = combined_loss(&mut tape, prob, &sample.mask, lambda)?;
    let value = tape.value(loss).data()[0] as f64;
    Ok((value, tape.backward(loss)?))
}

/// Mean combined loss without gradients or augmentation.
pub fn mean_loss(model: &Model<f32>, samples: &[SampleRecord], lambda: f64) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::inference(&model.params);
            let x = tape.constant(s.image.clone());
            let logits = model.net.forward(&mut tape, x)?;
            let prob = Network::crack_probability(&mut tape, logits)?;
            let loss = combined_loss(&mut tape, prob, &s.mask, lambda)?;
            Ok(tape.value(loss).data()[0] as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train the tunable parameters of `model`. After every epoch the model is
/// scored on `val` and the best-F1 snapshot is kept. The model is left at
/// its final weights.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.mask.tunable.is_empty() {
        return Err(Error::Contract("model has no tunable parameters".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let initial_loss = mean_loss(model, train, cfg.lambda_ce).map_err(|e| match e {
        Error::Numeric(m) => Error::Training(format!("{m} before the first update")),
        other => other,
    })?;
    if !initial_loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite initial loss {initial_loss}"
        )));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let max_iter = total.saturating_sub(cfg.warmup_iters);
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut iter = 0;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, u64::MAX));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let sample = if cfg.augment {
                        augment(&train[i], &mut sample_rng(cfg.seed, epoch as u64, i as u64))?
                    } else {
                        train[i].clone()
                    };
                    let out = sample_loss_and_grads(model, &sample, cfg.lambda_ce).map_err(
                        |e| match e {
                            Error::Numeric(m) => Error::Training(format!(
                                "{m} at epoch {epoch}, step {}, sample {}",
                                step + 1,
                                train[i].id
                            )),
                            other => other,
                        },
                    )?;
                    Ok((train[i].id.as_str(), out))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::default();
            for (id, (loss, g)) in results {
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss {loss} at epoch {epoch}, step {}, sample {id}",
                        step + 1
                    )));
                }
                loss_sum += loss;
                grads.merge(g);
            }
            grads.scale(1.0 / batch.len() as f32);
            model.params.zero_grads();
            grads.accumulate_into(&mut model.params)?;
            lr = lr_schedule(iter, cfg, max_iter);
            adamw_step(&mut model.params, &mut state, lr, cfg)?;
            iter += 1;
        }
        model.params.zero_grads();
        let val_report =
            evaluate_dataset(model, val, None, Granularity::Micro, cfg.binarize_threshold)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val: val_report,
            lr,
        };
        on_epoch(&entry);
        if best.as_ref().is_none_or(|b| val_report.f1 > b.val_f1) {
            best = Some(Checkpoint::capture(model, epoch, val_report.f1));
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        initial_loss,
        log,
        best: best.expect("at least one epoch"),
        steps: iter,
    })
}
