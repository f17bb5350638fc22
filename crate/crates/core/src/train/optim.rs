//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numeric::{Scalar, Tensor};
use crate::params::{ParamId, ParamStore};
use crate::train::TrainConfig;

/// First and second moments of every tunable parameter seen so far.
#[derive(Clone, Debug, Default)]
pub struct AdamState<F> {
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moment_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<F>, Tensor<F>)> {
        self.moments.get(&id)
    }
}

/// One update of every tunable parameter from its accumulated gradient slot
/// (a missing slot counts as a zero gradient). Weight decay is applied only
/// to parameters whose role decays. Frozen parameters are never read or
/// written.
pub fn adamw_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in store.tunable_ids() {
        let p = store.get_mut(id);
        let (m, v) = state.moments.entry(id).or_insert_with(|| {
            (
                Tensor::zeros(p.value.shape()),
                Tensor::zeros(p.value.shape()),
            )
        });
        let decay = if p.role.decays() {
            lr * cfg.weight_decay
        } else {
            0.0
        };
        let grad = p.grad.as_ref().map(Tensor::data);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grad.map_or(0.0, |g| g[i].to_f64_lossy());
            let mi = b1 * m.data()[i].to_f64_lossy() + (1.0 - b1) * g;
            let vi = b2 * v.data()[i].to_f64_lossy() + (1.0 - b2) * g * g;
            m.data_mut()[i] = F::lit(mi);
            v.data_mut()[i] = F::lit(vi);
            let mut x = values[i].to_f64_lossy();
            if decay != 0.0 {
                x *= 1.0 - decay;
            }
            if mi != 0.0 {
                x -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            }
            values[i] = F::lit(x);
        }
    }
    Ok(())
}
