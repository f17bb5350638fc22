//! Prompt state and two-way transformer mask decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Attention, LayerNorm, Linear, Mlp, INIT_STD};
use crate::numeric::{ResizeMode, Scalar, Tape, Var};
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamSink};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub token_dim: usize,
    pub num_class: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub upsample_mid: usize,
    pub upsample_out: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            token_dim: 256,
            num_class: 2,
            depth: 2,
            num_heads: 8,
            mlp_dim: 1024,
            upsample_mid: 64,
            upsample_out: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_class < 2 {
            return Err(Error::Config(format!(
                "num_class must be at least 2, got {}",
                self.num_class
            )));
        }
        let sizes = [
            self.token_dim,
            self.depth,
            self.num_heads,
            self.mlp_dim,
            self.upsample_mid,
            self.upsample_out,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!(
                "decoder sizes must be positive: {self:?}"
            )));
        }
        if !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "token_dim {} not divisible by {} heads",
                self.token_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Prompt-free conditioning: a dense default vector and the decoder's
/// positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    pub dense_default: ParamId,
    /// `(token_dim, h, w)`.
    pub pos: ParamId,
}

impl PromptState {
    pub fn build<S: ParamSink>(sink: &mut S, dim: usize, grid: usize) -> Result<Self> {
        let g = ParamGroup::Prompt;
        Ok(PromptState {
            dense_default: sink.register(
                "prompt.dense_default".into(),
                vec![dim],
                Init::Zeros,
                ParamRole::Embedding,
                g,
            )?,
            pos: sink.register(
                "prompt.pos_embed".into(),
                vec![dim, grid, grid],
                Init::Normal(INIT_STD),
                ParamRole::Embedding,
                g,
            )?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    fn build<S: ParamSink>(sink: &mut S, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let (d, h, g) = (cfg.token_dim, cfg.num_heads, ParamGroup::Decoder);
        Ok(TwoWayBlock {
            self_attn: Attention::build(sink, &format!("{name}.self_attn"), d, h, g)?,
            norm1: LayerNorm::build(sink, &format!("{name}.norm1"), d, g)?,
            token_to_image: Attention::build(sink, &format!("{name}.token_to_image"), d, h, g)?,
            norm2: LayerNorm::build(sink, &format!("{name}.norm2"), d, g)?,
            mlp: Mlp::build(sink, &format!("{name}.mlp"), d, cfg.mlp_dim, g)?,
            norm3: LayerNorm::build(sink, &format!("{name}.norm3"), d, g)?,
            image_to_token: Attention::build(sink, &format!("{name}.image_to_token"), d, h, g)?,
            norm4: LayerNorm::build(sink, &format!("{name}.norm4"), d, g)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    /// `(token_dim, mid, 2, 2)`.
    pub conv1: ParamId,
    pub bias1: ParamId,
    pub norm: LayerNorm,
    /// `(mid, out, 2, 2)`.
    pub conv2: ParamId,
    pub bias2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    /// `(num_class, token_dim)`.
    pub mask_tokens: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
    /// Token head `token_dim → token_dim → token_dim → upsample_out`.
    pub head: [Linear; 3],
    pub upsampler: Upsampler,
}

impl MaskDecoder {
    pub fn build<S: ParamSink>(sink: &mut S, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, g) = (config.token_dim, ParamGroup::Decoder);
        let std = Init::TruncNormal(INIT_STD);
        let mask_tokens = sink.register(
            "decoder.mask_tokens".into(),
            vec![config.num_class, d],
            Init::Normal(INIT_STD),
            ParamRole::Embedding,
            g,
        )?;
        let blocks = (0..config.depth)
            .map(|i| TwoWayBlock::build(sink, &format!("decoder.blocks.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = Attention::build(sink, "decoder.final_attn", d, config.num_heads, g)?;
        let final_norm = LayerNorm::build(sink, "decoder.final_norm", d, g)?;
        let head = [
            Linear::build(sink, "decoder.head.0", d, d, true, g)?,
            Linear::build(sink, "decoder.head.1", d, d, true, g)?,
            Linear::build(sink, "decoder.head.2", d, config.upsample_out, true, g)?,
        ];
        let (mid, out) = (config.upsample_mid, config.upsample_out);
        let upsampler = Upsampler {
            conv1: sink.register(
                "decoder.upsample.conv1.weight".into(),
                vec![d, mid, 2, 2],
                std,
                ParamRole::Weight,
                g,
            )?,
            bias1: sink.register(
                "decoder.upsample.conv1.bias".into(),
                vec![mid],
                Init::Zeros,
                ParamRole::Bias,
                g,
            )?,
            norm: LayerNorm::build(sink, "decoder.upsample.norm", mid, g)?,
            conv2: sink.register(
                "decoder.upsample.conv2.weight".into(),
                vec![mid, out, 2, 2],
                std,
                ParamRole::Weight,
                g,
            )?,
            bias2: sink.register(
                "decoder.upsample.conv2.bias".into(),
                vec![out],
                Init::Zeros,
                ParamRole::Bias,
                g,
            )?,
        };
        Ok(MaskDecoder {
            config: config.clone(),
            mask_tokens,
            blocks,
            final_attn,
            final_norm,
            head,
            upsampler,
        })
    }
}

/// Add the dense default vector to every position of a `(C, h, w)` embedding.
pub fn apply_default_prompt<F: Scalar>(
    tape: &mut Tape<'_, F>,
    embedding: Var,
    prompt: &PromptState,
) -> Result<Var> {
    let hwc = tape.permute(embedding, &[1, 2, 0])?;
    let dense = tape.param(prompt.dense_default);
    let shifted = tape.add_bcast(hwc, dense)?;
    tape.permute(shifted, &[2, 0, 1])
}

/// One two-way block on tokens `(T, C)` and a token-major image `(h·w, C)`
/// with positional rows `pos` `(h·w, C)`. Returns the updated pair.
pub fn two_way_block<F: Scalar>(
    tape: &mut Tape<'_, F>,
    tokens: Var,
    image: Var,
    pos: Var,
    block: &TwoWayBlock,
) -> Result<(Var, Var)> {
    let attn = block
        .self_attn
        .forward(tape, tokens, tokens, tokens, 1, None)?
        .out;
    let t = tape.add(tokens, attn)?;
    let t = block.norm1.forward(tape, t)?;

    let keys = tape.add(image, pos)?;
    let cross = block
        .token_to_image
        .forward(tape, t, keys, image, 1, None)?
        .out;
    let t = tape.add(t, cross)?;
    let t = block.norm2.forward(tape, t)?;

    let mlp = block.mlp.forward(tape, t)?;
    let t = tape.add(t, mlp)?;
    let t = block.norm3.forward(tape, t)?;

    let back = block.image_to_token.forward(tape, keys, t, t, 1, None)?.out;
    let img = tape.add(image, back)?;
    let img = block.norm4.forward(tape, img)?;
    Ok((t, img))
}

/// `(C, h, w)` to `(out, 4h, 4w)` through two stride-2 transposed convolutions.
pub fn upsample_embedding<F: Scalar>(
    tape: &mut Tape<'_, F>,
    embedding: Var,
    up: &Upsampler,
) -> Result<Var> {
    let w1 = tape.param(up.conv1);
    let b1 = tape.param(up.bias1);
    let y = tape.conv_transpose2d(embedding, w1, Some(b1), 2)?;
    let y = up.norm.forward_channels(tape, y)?;
    let y = tape.gelu(y);
    let w2 = tape.param(up.conv2);
    let b2 = tape.param(up.bias2);
    let y = tape.conv_transpose2d(y, w2, Some(b2), 2)?;
    Ok(tape.gelu(y))
}

/// Resize the `(c, h', w')` features to full resolution, then take the inner
/// product of each class row of `classifier` `(K, c)` with every pixel.
pub fn predict_masks<F: Scalar>(
    tape: &mut Tape<'_, F>,
    classifier: Var,
    features: Var,
    (height, width): (usize, usize),
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let cs = tape.shape(classifier).to_vec();
    if fs.len() != 3 || cs.len() != 2 || cs[1] != fs[0] {
        return Err(Error::dim("predict_masks", &cs, &fs));
    }
    let full = tape.resize(features, height, width, ResizeMode::Bilinear)?;
    let flat = tape.reshape(full, [fs[0], height * width])?;
    let logits = tape.matmul(classifier, flat)?;
    tape.reshape(logits, [cs[0], height, width])
}

/// Embedding `(C, h, w)` to class logits `(K, H, W)`.
pub fn decoder_forward<F: Scalar>(
    tape: &mut Tape<'_, F>,
    embedding: Var,
    prompt: &PromptState,
    decoder: &MaskDecoder,
    full_res: (usize, usize),
) -> Result<Var> {
    let shape = tape.shape(embedding).to_vec();
    let d = decoder.config.token_dim;
    if shape.len() != 3 || shape[0] != d {
        return Err(Error::dim("decoder_forward", &shape, &[d]));
    }
    let (h, w) = (shape[1], shape[2]);
    let emb = apply_default_prompt(tape, embedding, prompt)?;
    let pos = tape.param(prompt.pos);
    if tape.shape(pos) != shape.as_slice() {
        return Err(Error::dim(
            "decoder positional table",
            tape.shape(pos),
            &shape,
        ));
    }
    let mut image = tape.permute(emb, &[1, 2, 0])?;
    image = tape.reshape(image, [h * w, d])?;
    let pos = tape.permute(pos, &[1, 2, 0])?;
    let pos = tape.reshape(pos, [h * w, d])?;
    let mut tokens = tape.param(decoder.mask_tokens);
    for block in &decoder.blocks {
        (tokens, image) = two_way_block(tape, tokens, image, pos, block)?;
    }
    let keys = tape.add(image, pos)?;
    let last = decoder
        .final_attn
        .forward(tape, tokens, keys, image, 1, None)?
        .out;
    let t = tape.add(tokens, last)?;
    let t = decoder.final_norm.forward(tape, t)?;
    let mut cls = decoder.head[0].forward(tape, t)?;
    cls = tape.gelu(cls);
    cls = decoder.head[1].forward(tape, cls)?;
    cls = tape.gelu(cls);
    cls = decoder.head[2].forward(tape, cls)?;

    let grid = tape.reshape(image, [h, w, d])?;
    let grid = tape.permute(grid, &[2, 0, 1])?;
    let features = upsample_embedding(tape, grid, &decoder.upsampler)?;
    predict_masks(tape, cls, features, full_res)
}
