//! Finite-difference verification of the full model gradient in `f64`.
//!
//! Every tunable tensor gets a directional-derivative check along a random
//! direction. Delta tensors and tensors up to `exhaustive_limit` elements are
//! then checked coordinate by coordinate; larger tensors are checked at their
//! largest-gradient coordinates plus a random sample.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SampleRecord;
use crate::error::Result;
use crate::model::{Model, Network};
use crate::numeric::gradcheck::{CheckSummary, STEP};
use crate::numeric::{Gradients, Tape, Tensor};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::train::combined_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckPlan {
    pub step: f64,
    /// Derivatives at or below this magnitude are not compared.
    pub floor: f64,
    pub exhaustive_limit: usize,
    pub top_k: usize,
    pub random_k: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GradcheckPlan {
    fn default() -> Self {
        GradcheckPlan {
            step: STEP * 1e-2,
            floor: 1e-6,
            exhaustive_limit: 64,
            top_k: 8,
            random_k: 8,
            lambda: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCheck {
    pub coordinates: CheckSummary,
    pub directional: CheckSummary,
    pub tensors: usize,
    pub exhaustive_tensors: usize,
}

impl ModelCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.coordinates
            .max_rel_error
            .max(self.directional.max_rel_error)
    }
}

/// Replace exactly-zero tunable delta tensors (fresh LoRA `B`, adapter
/// up-projections) with small Gaussian noise so that every path through the
/// deltas carries a nonzero gradient.
pub fn perturb_zero_deltas(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.tunable_ids() {
        let p = store.get_mut(id);
        if p.group == ParamGroup::Delta && p.value.data().iter().all(|v| *v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            });
        }
    }
}

fn loss_value(
    net: &Network,
    store: &ParamStore<f64>,
    sample: &SampleRecord,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::inference(store);
    let x = tape.constant(sample.image.cast());
    let logits = net.forward(&mut tape, x)?;
    let prob = Network::crack_probability(&mut tape, logits)?;
    let loss = combined_loss(&mut tape, prob, &sample.mask, lambda)?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradient of the combined loss on one sample.
pub fn analytic_gradients(
    model: &Model<f64>,
    sample: &SampleRecord,
    lambda: f64,
) -> Result<(f64, Gradients<f64>)> {
    let mut tape = Tape::with_params(&model.params);
    let x = tape.constant(sample.image.cast());
    let logits = model.net.forward(&mut tape, x)?;
    let prob = Network::crack_probability(&mut tape, logits)?;
    let loss = combined_loss(&mut tape, prob, &sample.mask, lambda)?;
    Ok((tape.value(loss).data()[0], tape.backward(loss)?))
}

fn shifted_loss(
    model: &Model<f64>,
    store: &mut ParamStore<f64>,
    id: ParamId,
    delta: &[(usize, f64)],
    sample: &SampleRecord,
    lambda: f64,
) -> Result<f64> {
    let orig: Vec<f64> = delta
        .iter()
        .map(|&(i, _)| store.value(id).data()[i])
        .collect();
    for &(i, d) in delta {
        store.get_mut(id).value.data_mut()[i] += d;
    }
    let out = loss_value(&model.net, store, sample, lambda);
    for (&(i, _), o) in delta.iter().zip(orig) {
        store.get_mut(id).value.data_mut()[i] = o;
    }
    out
}

/// Compare analytic and central-difference derivatives of the combined loss
/// on `sample` for every tunable parameter of `model`.
pub fn check_model(
    model: &Model<f64>,
    sample: &SampleRecord,
    plan: &GradcheckPlan,
    mut progress: impl FnMut(&str, &CheckSummary),
) -> Result<ModelCheck> {
    let (_, grads) = analytic_gradients(model, sample, plan.lambda)?;
    let mut store = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut report = ModelCheck::default();
    let h = plan.step;
    for id in model.params.tunable_ids() {
        let p = model.params.get(id);
        let zeros;
        let g = match grads.param(id) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(p.value.shape());
                &zeros
            }
        };
        let n = g.numel();
        let name = p.name.clone();
        report.tensors += 1;

        let dir: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.into_iter().map(|v| v / norm).collect()
        };
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
        let plus: Vec<(usize, f64)> = dir.iter().enumerate().map(|(i, d)| (i, h * d)).collect();
        let minus: Vec<(usize, f64)> = dir.iter().enumerate().map(|(i, d)| (i, -h * d)).collect();
        let numeric = (shifted_loss(model, &mut store, id, &plus, sample, plan.lambda)?
            - shifted_loss(model, &mut store, id, &minus, sample, plan.lambda)?)
            / (2.0 * h);
        report.directional.record(
            || format!("{name} (direction)"),
            analytic,
            numeric,
            plan.floor,
        );

        let exhaustive = p.group == ParamGroup::Delta || n <= plan.exhaustive_limit;
        let coords: Vec<usize> = if exhaustive {
            report.exhaustive_tensors += 1;
            (0..n).collect()
        } else {
            let mut by_mag: Vec<usize> = (0..n).collect();
            by_mag.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
            let mut picked: Vec<usize> = by_mag[..plan.top_k.min(n)].to_vec();
            picked.extend(index::sample(&mut rng, n, plan.random_k.min(n)).iter());
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let mut summary = CheckSummary::default();
        for i in coords {
            let numeric = (shifted_loss(model, &mut store, id, &[(i, h)], sample, plan.lambda)?
                - shifted_loss(model, &mut store, id, &[(i, -h)], sample, plan.lambda)?)
                / (2.0 * h);
            summary.record(|| format!("{name}[{i}]"), g.data()[i], numeric, plan.floor);
        }
        progress(&name, &summary);
        report.coordinates.merge(summary);
    }
    Ok(report)
}
