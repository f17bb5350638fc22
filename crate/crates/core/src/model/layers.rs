//! Parameterised building blocks shared by the encoder and the decoder.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamSink};

pub(crate) const LN_EPS: f64 = 1e-6;
pub(crate) const INIT_STD: f64 = 0.02;

/// Low-rank bypass attached to a [`Linear`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    /// Set once `A·B` has been folded into the base weight.
    pub merged: bool,
}

/// Affine map `y = x·W + b` with `W: (in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraPair>,
}

impl Linear {
    pub fn build<S: ParamSink>(
        sink: &mut S,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        Self::build_with(
            sink,
            name,
            in_dim,
            out_dim,
            bias,
            group,
            Init::TruncNormal(INIT_STD),
        )
    }

    pub fn build_with<S: ParamSink>(
        sink: &mut S,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        init: Init,
    ) -> Result<Self> {
        let weight = sink.register(
            format!("{name}.weight"),
            vec![in_dim, out_dim],
            init,
            ParamRole::Weight,
            group,
        )?;
        let bias = if bias {
            Some(sink.register(
                format!("{name}.bias"),
                vec![out_dim],
                Init::Zeros,
                ParamRole::Bias,
                group,
            )?)
        } else {
            None
        };
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            lora: None,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        ids.extend(self.bias);
        if let Some(l) = &self.lora {
            ids.extend([l.a, l.b]);
        }
        ids
    }

    /// Apply over the last axis of `x`, any leading shape.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let last = *shape.last().expect("non-empty shape");
        if last != self.in_dim {
            return Err(Error::dim("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = shape.iter().product::<usize>() / last;
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, [rows, last])?
        };
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        let mut y = tape.linear(flat, w, b)?;
        if let Some(l) = self.lora.as_ref().filter(|l| !l.merged) {
            let a = tape.param(l.a);
            let bm = tape.param(l.b);
            let down = tape.matmul(flat, a)?;
            let bypass = tape.matmul(down, bm)?;
            y = tape.add(y, bypass)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            tape.reshape(y, out)
        }
    }
}

/// Layer normalisation over the last axis with learnable gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn build<S: ParamSink>(
        sink: &mut S,
        name: &str,
        dim: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gain: sink.register(
                format!("{name}.gain"),
                vec![dim],
                Init::Ones,
                ParamRole::NormGain,
                group,
            )?,
            bias: sink.register(
                format!("{name}.bias"),
                vec![dim],
                Init::Zeros,
                ParamRole::NormBias,
                group,
            )?,
            dim,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, F::lit(LN_EPS))
    }

    /// Normalise a channel-first `(c, h, w)` map across channels.
    pub fn forward_channels<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let hwc = tape.permute(x, &[1, 2, 0])?;
        let y = self.forward(tape, hwc)?;
        tape.permute(y, &[2, 0, 1])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Result of [`Attention::forward`]; `weights` is `(batch·heads, tq, tk)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl Attention {
    pub fn build<S: ParamSink>(
        sink: &mut S,
        name: &str,
        dim: usize,
        heads: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: dimension {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            query: Linear::build(sink, &format!("{name}.query"), dim, dim, true, group)?,
            key: Linear::build(sink, &format!("{name}.key"), dim, dim, true, group)?,
            value: Linear::build(sink, &format!("{name}.value"), dim, dim, true, group)?,
            output: Linear::build(sink, &format!("{name}.output"), dim, dim, true, group)?,
            heads,
            dim,
        })
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ]
    }

    /// Attend `batch` independent groups. `q_in` is `(batch·tq, dim)`,
    /// `k_in`/`v_in` are `(batch·tk, dim)`. An optional `bias` of shape
    /// `(heads, tq, tk)` is added to every group's logits before the softmax.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        batch: usize,
        bias: Option<Var>,
    ) -> Result<AttentionOutput> {
        let rows_q = tape.shape(q_in)[0];
        let rows_k = tape.shape(k_in)[0];
        if batch == 0
            || !rows_q.is_multiple_of(batch)
            || !rows_k.is_multiple_of(batch)
            || tape.shape(v_in)[0] != rows_k
        {
            return Err(Error::dim("attention", tape.shape(q_in), tape.shape(k_in)));
        }
        let (tq, tk) = (rows_q / batch, rows_k / batch);
        let q = self.query.forward(tape, q_in)?;
        let k = self.key.forward(tape, k_in)?;
        let v = self.value.forward(tape, v_in)?;
        let q = self.split_heads(tape, q, batch, tq)?;
        let k = self.split_heads(tape, k, batch, tk)?;
        let v = self.split_heads(tape, v, batch, tk)?;
        let head_dim = self.dim / self.heads;
        let logits = tape.matmul_nt(q, k)?;
        let mut logits = tape.scale(logits, F::lit(1.0 / (head_dim as f64).sqrt()));
        if let Some(bias) = bias {
            let grouped = tape.reshape(logits, [batch, self.heads, tq, tk])?;
            let biased = tape.add_bcast(grouped, bias)?;
            logits = tape.reshape(biased, [batch * self.heads, tq, tk])?;
        }
        let weights = tape.softmax(logits, 2)?;
        let mixed = tape.matmul(weights, v)?;
        let merged = self.merge_heads(tape, mixed, batch, tq)?;
        let out = self.output.forward(tape, merged)?;
        Ok(AttentionOutput { out, weights })
    }

    // (batch·t, dim) -> (batch·heads, t, head_dim)
    fn split_heads<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let (h, d) = (self.heads, self.dim);
        let hd = d / h;
        let index: Arc<[usize]> = (0..batch * h * t * hd)
            .map(|o| {
                let j = o % hd;
                let ti = (o / hd) % t;
                let hi = (o / (hd * t)) % h;
                let b = o / (hd * t * h);
                (b * t + ti) * d + hi * hd + j
            })
            .collect();
        tape.gather(x, index, [batch * h, t, hd])
    }

    // (batch·heads, t, head_dim) -> (batch·t, dim)
    fn merge_heads<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let (h, d) = (self.heads, self.dim);
        let hd = d / h;
        let index: Arc<[usize]> = (0..batch * t * d)
            .map(|o| {
                let c = o % d;
                let ti = (o / d) % t;
                let b = o / (d * t);
                let (hi, j) = (c / hd, c % hd);
                ((b * h + hi) * t + ti) * hd + j
            })
            .collect();
        tape.gather(x, index, [batch * t, d])
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn build<S: ParamSink>(
        sink: &mut S,
        name: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        Ok(Mlp {
            up: Linear::build(sink, &format!("{name}.up"), dim, hidden, true, group)?,
            down: Linear::build(sink, &format!("{name}.down"), hidden, dim, true, group)?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}
