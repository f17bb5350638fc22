//! Adapter and low-rank deltas attached to a frozen encoder.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Linear, LoraPair, INIT_STD};
use crate::model::Network;
use crate::numeric::kernels::{gemm, row_major};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamSink, ParamStore};

/// Bottleneck adapter settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub middle_dim: usize,
    pub scaling: f64,
    pub sequential: bool,
    pub parallel: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            middle_dim: 32,
            scaling: 0.2,
            sequential: true,
            parallel: true,
        }
    }
}

/// Projection inside an attention module that can carry a low-rank bypass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn letter(self) -> char {
        match self {
            LoraTarget::Query => 'q',
            LoraTarget::Key => 'k',
            LoraTarget::Value => 'v',
            LoraTarget::Output => 'o',
        }
    }

    /// Parse a compact target list such as `qv` or `qkvo`.
    pub fn parse_set(s: &str) -> Result<BTreeSet<LoraTarget>> {
        let set = s
            .chars()
            .map(|c| match c {
                'q' => Ok(LoraTarget::Query),
                'k' => Ok(LoraTarget::Key),
                'v' => Ok(LoraTarget::Value),
                'o' => Ok(LoraTarget::Output),
                other => Err(Error::Config(format!("unknown LoRA target {other:?}"))),
            })
            .collect::<Result<BTreeSet<_>>>()?;
        if set.is_empty() {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
        Ok(set)
    }

    pub fn format_set(set: &BTreeSet<LoraTarget>) -> String {
        set.iter().map(|t| t.letter()).collect()
    }
}

/// Low-rank bypass settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: BTreeSet<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            targets: [LoraTarget::Query, LoraTarget::Value].into_iter().collect(),
        }
    }
}

/// Which deltas to attach.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpec {
    pub adapter: Option<AdapterConfig>,
    pub lora: Option<LoraConfig>,
}

/// Bottleneck `x ↦ up(GELU(down(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn build<S: ParamSink>(
        sink: &mut S,
        name: &str,
        dim: usize,
        middle: usize,
    ) -> Result<Self> {
        Ok(Adapter {
            down: Linear::build_with(
                sink,
                &format!("{name}.down"),
                dim,
                middle,
                true,
                ParamGroup::Delta,
                Init::Normal(INIT_STD),
            )?,
            up: Linear::build_with(
                sink,
                &format!("{name}.up"),
                middle,
                dim,
                true,
                ParamGroup::Delta,
                Init::Zeros,
            )?,
        })
    }

    /// The bottleneck branch alone, without any residual.
    pub fn branch<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, x)?;
        let h = tape.gelu(h);
        self.up.forward(tape, h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        ids.extend(self.up.param_ids());
        ids
    }
}

/// Parallel adapter together with its scaling factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelAdapter {
    pub adapter: Adapter,
    pub scaling: f64,
}

/// `x + up(GELU(down(x)))`.
pub fn sequential_adapter<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    adapter: &Adapter,
) -> Result<Var> {
    let branch = adapter.branch(tape, x)?;
    tape.add(branch, x)
}

/// `s·up(GELU(down(LN(x)))) + MLP(LN(x)) + x`, with the norm and MLP taken
/// from the host block.
pub fn parallel_adapter<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    adapter: &ParallelAdapter,
    host_norm: &crate::model::layers::LayerNorm,
    host_mlp: &crate::model::layers::Mlp,
) -> Result<Var> {
    let normed = host_norm.forward(tape, x)?;
    let mlp = host_mlp.forward(tape, normed)?;
    let plain = tape.add(x, mlp)?;
    let branch = adapter.adapter.branch(tape, normed)?;
    let scaled = tape.scale(branch, F::lit(adapter.scaling));
    tape.add(plain, scaled)
}

/// `x·W0 + b0 + (x·A)·B` for 2-D `x`, `W0: (d, k)`, `A: (d, r)`, `B: (r, k)`.
pub fn lora_linear<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    w0: Var,
    b0: Option<Var>,
    a: Var,
    b: Var,
) -> Result<Var> {
    let (sw, sa, sb) = (
        tape.shape(w0).to_vec(),
        tape.shape(a).to_vec(),
        tape.shape(b).to_vec(),
    );
    if sw.len() != 2
        || sa.len() != 2
        || sb.len() != 2
        || sa[0] != sw[0]
        || sb[1] != sw[1]
        || sa[1] != sb[0]
    {
        return Err(Error::Config(format!(
            "LoRA shapes inconsistent: base {sw:?}, A {sa:?}, B {sb:?}"
        )));
    }
    let base = tape.linear(x, w0, b0)?;
    let down = tape.matmul(x, a)?;
    let bypass = tape.matmul(down, b)?;
    tape.add(base, bypass)
}

/// Parameter names that stay tunable; everything else is frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreezeMask {
    pub tunable: BTreeSet<ParamId>,
}

impl FreezeMask {
    pub fn contains(&self, id: ParamId) -> bool {
        self.tunable.contains(&id)
    }
}

/// Attach the requested deltas to every encoder block, freeze the backbone
/// and return the resulting tunable set (deltas, prompt state and decoder).
pub fn attach_deltas<S: ParamSink>(
    net: &mut Network,
    sink: &mut S,
    spec: &DeltaSpec,
) -> Result<FreezeMask> {
    if net.deltas.adapter.is_some() && spec.adapter.is_some()
        || net.deltas.lora.is_some() && spec.lora.is_some()
    {
        return Err(Error::Contract(
            "deltas of this kind are already attached".into(),
        ));
    }
    let dim = net.encoder.config.embed_dim;
    if let Some(cfg) = &spec.lora {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if cfg.targets.is_empty() {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
    }
    if let Some(cfg) = &spec.adapter {
        if cfg.middle_dim == 0 {
            return Err(Error::Config(
                "adapter middle dimension must be at least 1".into(),
            ));
        }
        if !cfg.scaling.is_finite() {
            return Err(Error::Config("adapter scaling must be finite".into()));
        }
    }
    for (i, block) in net.encoder.blocks.iter_mut().enumerate() {
        let prefix = format!("encoder.blocks.{i}");
        if let Some(cfg) = &spec.lora {
            for target in &cfg.targets {
                let lin = match target {
                    LoraTarget::Query => &mut block.attn.query,
                    LoraTarget::Key => &mut block.attn.key,
                    LoraTarget::Value => &mut block.attn.value,
                    LoraTarget::Output => &mut block.attn.output,
                };
                let a = sink.register(
                    format!("{}.lora_a", lin.name),
                    vec![lin.in_dim, cfg.rank],
                    Init::Normal(INIT_STD),
                    ParamRole::Weight,
                    ParamGroup::Delta,
                )?;
                let b = sink.register(
                    format!("{}.lora_b", lin.name),
                    vec![cfg.rank, lin.out_dim],
                    Init::Zeros,
                    ParamRole::Weight,
                    ParamGroup::Delta,
                )?;
                lin.lora = Some(LoraPair {
                    a,
                    b,
                    rank: cfg.rank,
                    merged: false,
                });
            }
        }
        if let Some(cfg) = &spec.adapter {
            if cfg.sequential {
                block.seq_adapter = Some(Adapter::build(
                    sink,
                    &format!("{prefix}.adapter_seq"),
                    dim,
                    cfg.middle_dim,
                )?);
            }
            if cfg.parallel {
                block.par_adapter = Some(ParallelAdapter {
                    adapter: Adapter::build(
                        sink,
                        &format!("{prefix}.adapter_par"),
                        dim,
                        cfg.middle_dim,
                    )?,
                    scaling: cfg.scaling,
                });
            }
        }
    }
    if spec.adapter.is_some() {
        net.deltas.adapter = spec.adapter.clone();
    }
    if spec.lora.is_some() {
        net.deltas.lora = spec.lora.clone();
    }
    Ok(apply_freeze(sink))
}

/// Freeze every backbone parameter and return the tunable set.
pub fn apply_freeze<S: ParamSink>(sink: &mut S) -> FreezeMask {
    let mut mask = FreezeMask::default();
    for info in sink.infos() {
        let tunable = info.group != ParamGroup::Backbone;
        sink.set_tunable(info.id, tunable);
        if tunable {
            mask.tunable.insert(info.id);
        }
    }
    mask
}

fn lora_linears_mut(net: &mut Network) -> Vec<&mut Linear> {
    net.encoder
        .blocks
        .iter_mut()
        .flat_map(|b| b.attn.linears_mut())
        .filter(|l| l.lora.is_some())
        .collect()
}

fn lora_product<F: Scalar>(
    store: &ParamStore<F>,
    (d, k): (usize, usize),
    pair: &LoraPair,
) -> Vec<F> {
    let r = pair.rank;
    let mut prod = vec![F::zero(); d * k];
    gemm(
        d,
        r,
        k,
        store.value(pair.a).data(),
        row_major(r),
        store.value(pair.b).data(),
        row_major(k),
        F::zero(),
        &mut prod,
    );
    prod
}

/// Fold every bypass into its base weight (`W0 ← W0 + A·B`). The bypass is
/// then skipped in the forward pass. Rejected when already merged.
pub fn merge_lora<F: Scalar>(net: &mut Network, store: &mut ParamStore<F>) -> Result<()> {
    let linears = lora_linears_mut(net);
    if linears.is_empty() {
        return Err(Error::Contract("no LoRA bypass attached".into()));
    }
    if linears
        .iter()
        .any(|l| l.lora.as_ref().is_some_and(|p| p.merged))
    {
        return Err(Error::Contract("LoRA weights are already merged".into()));
    }
    for lin in linears {
        let dims = (lin.in_dim, lin.out_dim);
        let pair = lin.lora.as_mut().expect("filtered");
        let prod = lora_product(store, dims, pair);
        let w = &mut store.get_mut(lin.weight).value;
        w.data_mut()
            .iter_mut()
            .zip(&prod)
            .for_each(|(w, p)| *w += *p);
        pair.merged = true;
    }
    Ok(())
}

/// Undo [`merge_lora`], restoring the separate bypass path.
pub fn unmerge_lora<F: Scalar>(net: &mut Network, store: &mut ParamStore<F>) -> Result<()> {
    let linears = lora_linears_mut(net);
    if linears.is_empty()
        || linears
            .iter()
            .any(|l| l.lora.as_ref().is_some_and(|p| !p.merged))
    {
        return Err(Error::Contract("LoRA weights are not merged".into()));
    }
    for lin in linears {
        let dims = (lin.in_dim, lin.out_dim);
        let pair = lin.lora.as_mut().expect("filtered");
        let prod = lora_product(store, dims, pair);
        let w = &mut store.get_mut(lin.weight).value;
        w.data_mut()
            .iter_mut()
            .zip(&prod)
            .for_each(|(w, p)| *w -= *p);
        pair.merged = false;
    }
    Ok(())
}

/// `W0 + A·B` for a single projection.
pub fn merged_weight<F: Scalar>(w0: &Tensor<F>, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sw, sa, sb) = (w0.shape(), a.shape(), b.shape());
    if sw.len() != 2
        || sa.len() != 2
        || sb.len() != 2
        || sa[0] != sw[0]
        || sb[1] != sw[1]
        || sa[1] != sb[0]
    {
        return Err(Error::Config(format!(
            "LoRA shapes inconsistent: base {sw:?}, A {sa:?}, B {sb:?}"
        )));
    }
    let mut out = w0.data().to_vec();
    gemm(
        sa[0],
        sa[1],
        sb[1],
        a.data(),
        row_major(sa[1]),
        b.data(),
        row_major(sb[1]),
        F::one(),
        &mut out,
    );
    Tensor::new(sw, out)
}

/// Closed-form delta count for LoRA bypasses: `depth·|targets|·r·(d + d)`.
pub fn lora_delta_count(dim: usize, depth: usize, rank: usize, targets: usize) -> usize {
    depth * targets * rank * 2 * dim
}

/// Closed-form delta count for `per_block` adapters per block.
pub fn adapter_delta_count(dim: usize, depth: usize, middle: usize, per_block: usize) -> usize {
    depth * per_block * (2 * dim * middle + middle + dim)
}
