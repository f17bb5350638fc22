//! Loss, learning-rate schedule, optimiser, augmentation and the training
//! loop.

pub mod augment;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

pub use augment::{augment, Transform};
pub use loss::{combined_loss, cross_entropy, dice_loss, BCE_EPS, DICE_EPS};
pub use optim::{adamw_step, AdamState};
pub use schedule::lr_schedule;
pub use trainer::{train_loop, Checkpoint, EpochLog, TrainOutcome};

/// Optimisation hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub warmup_iters: usize,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_ce: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub binarize_threshold: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-4,
            warmup_iters: 300,
            power: 6.0,
            epochs: 140,
            batch_size: 8,
            lambda_ce: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            binarize_threshold: 0.5,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings used for the 64 px toy runs: smaller batches, a short
    /// warm-up and a larger peak rate so that 20 epochs are enough.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 1e-3,
            warmup_iters: 50,
            epochs: 20,
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ce) {
            return Err(Error::Config(format!(
                "lambda_ce {} outside [0, 1]",
                self.lambda_ce
            )));
        }
        let positive = [self.lr0, self.power, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "learning rate, power, eps, epochs and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config(
                "weight decay must be >= 0 and threshold in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Threshold a `(H, W)` crack-probability map; ties count as crack.
pub fn binarize_probability<F: Scalar>(prob: &Tensor<F>, threshold: f64) -> Result<Mask> {
    let s = prob.shape();
    if s.len() != 2 {
        return Err(Error::dim("binarize_probability", s, &[2]));
    }
    let t = F::lit(threshold);
    Mask::new(
        s[0],
        s[1],
        prob.data().iter().map(|&p| (p >= t) as u8).collect(),
    )
}

/// Per-pixel class argmax of `(K, H, W)` logits, returned as "class != 0".
/// Ties resolve to the higher class index, matching the `>=` threshold rule.
pub fn binarize_argmax<F: Scalar>(logits: &Tensor<F>) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::dim("binarize_argmax", s, &[2]));
    }
    let plane = s[1] * s[2];
    let d = logits.data();
    let data = (0..plane)
        .map(|p| {
            let best = (1..s[0]).fold(0, |b, k| {
                if d[k * plane + p] >= d[b * plane + p] {
                    k
                } else {
                    b
                }
            });
            (best != 0) as u8
        })
        .collect();
    Mask::new(s[1], s[2], data)
}
