//! Windowed vision transformer image encoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Attention, AttentionOutput, LayerNorm, Mlp, INIT_STD};
use crate::model::peft::{parallel_adapter, sequential_adapter, Adapter, ParallelAdapter};
use crate::numeric::{Scalar, Tape, Var, GATHER_PAD};
use crate::params::{Init, ParamGroup, ParamId, ParamRole, ParamSink};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub patch_size: usize,
    pub neck_dim: usize,
    pub image_size: usize,
}

impl EncoderConfig {
    fn preset(embed_dim: usize, depth: usize, num_heads: usize, image_size: usize) -> Self {
        EncoderConfig {
            embed_dim,
            depth,
            num_heads,
            window_size: 14,
            patch_size: 16,
            neck_dim: 256,
            image_size,
        }
    }

    pub fn vit_b(image_size: usize) -> Self {
        Self::preset(768, 12, 12, image_size)
    }

    pub fn vit_l(image_size: usize) -> Self {
        Self::preset(1024, 24, 16, image_size)
    }

    pub fn vit_h(image_size: usize) -> Self {
        Self::preset(1280, 32, 16, image_size)
    }

    /// Small desk preset: 64 wide, 2 blocks, 4 heads, 2×2 windows, 64 px.
    pub fn toy() -> Self {
        EncoderConfig {
            window_size: 2,
            ..Self::preset(64, 2, 4, 64)
        }
    }

    /// Look up a preset by name (`vit-b`, `vit-l`, `vit-h`, `vit-toy`).
    pub fn by_name(name: &str, image_size: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vit-b" => Ok(Self::vit_b(image_size)),
            "vit-l" => Ok(Self::vit_l(image_size)),
            "vit-h" => Ok(Self::vit_h(image_size)),
            "vit-toy" => Ok(EncoderConfig {
                image_size,
                ..Self::toy()
            }),
            other => Err(Error::Config(format!("unknown encoder preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.embed_dim,
            self.depth,
            self.num_heads,
            self.window_size,
            self.patch_size,
            self.neck_dim,
            self.image_size,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!(
                "encoder sizes must be positive: {self:?}"
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Bookkeeping needed to undo [`window_partition`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub window: usize,
}

impl PadInfo {
    pub fn windows(&self) -> usize {
        (self.padded_height / self.window) * (self.padded_width / self.window)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    /// Additive pre-softmax bias `(heads, w², w²)` shared by all windows.
    pub rel_pos: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub seq_adapter: Option<Adapter>,
    pub par_adapter: Option<ParallelAdapter>,
}

impl VitBlock {
    fn build<S: ParamSink>(sink: &mut S, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let (d, g) = (cfg.embed_dim, ParamGroup::Backbone);
        let w2 = cfg.window_size * cfg.window_size;
        Ok(VitBlock {
            norm1: LayerNorm::build(sink, &format!("{name}.norm1"), d, g)?,
            attn: Attention::build(sink, &format!("{name}.attn"), d, cfg.num_heads, g)?,
            rel_pos: sink.register(
                format!("{name}.attn.rel_pos"),
                vec![cfg.num_heads, w2, w2],
                Init::Zeros,
                ParamRole::Embedding,
                g,
            )?,
            norm2: LayerNorm::build(sink, &format!("{name}.norm2"), d, g)?,
            mlp: Mlp::build(sink, &format!("{name}.mlp"), d, 4 * d, g)?,
            window: cfg.window_size,
            seq_adapter: None,
            par_adapter: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub conv1: ParamId,
    pub norm1: LayerNorm,
    pub conv2: ParamId,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub abs_pos: ParamId,
    pub blocks: Vec<VitBlock>,
    pub neck: Neck,
}

impl ImageEncoder {
    pub fn build<S: ParamSink>(sink: &mut S, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (d, p, n, g) = (
            config.embed_dim,
            config.patch_size,
            config.neck_dim,
            config.grid(),
        );
        let bb = ParamGroup::Backbone;
        let std = Init::TruncNormal(INIT_STD);
        let patch_weight = sink.register(
            "encoder.patch_embed.weight".into(),
            vec![d, 3, p, p],
            std,
            ParamRole::Weight,
            bb,
        )?;
        let patch_bias = sink.register(
            "encoder.patch_embed.bias".into(),
            vec![d],
            Init::Zeros,
            ParamRole::Bias,
            bb,
        )?;
        let abs_pos = sink.register(
            "encoder.pos_embed".into(),
            vec![g, g, d],
            Init::Zeros,
            ParamRole::Embedding,
            bb,
        )?;
        let blocks = (0..config.depth)
            .map(|i| VitBlock::build(sink, &format!("encoder.blocks.{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let neck = Neck {
            conv1: sink.register(
                "encoder.neck.conv1.weight".into(),
                vec![n, d, 1, 1],
                std,
                ParamRole::Weight,
                bb,
            )?,
            norm1: LayerNorm::build(sink, "encoder.neck.norm1", n, bb)?,
            conv2: sink.register(
                "encoder.neck.conv2.weight".into(),
                vec![n, n, 3, 3],
                std,
                ParamRole::Weight,
                bb,
            )?,
            norm2: LayerNorm::build(sink, "encoder.neck.norm2", n, bb)?,
        };
        Ok(ImageEncoder {
            config: config.clone(),
            patch_weight,
            patch_bias,
            abs_pos,
            blocks,
            neck,
        })
    }
}

/// `(3, H, W)` image to an `(H/p, W/p, d)` token grid via a stride-`p`
/// convolution.
pub fn patch_embed<F: Scalar>(
    tape: &mut Tape<'_, F>,
    image: Var,
    enc: &ImageEncoder,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    let p = enc.config.patch_size;
    if shape.len() != 3
        || shape[0] != 3
        || !shape[1].is_multiple_of(p)
        || !shape[2].is_multiple_of(p)
    {
        return Err(Error::dim("patch_embed", &shape, &[3, p, p]));
    }
    let w = tape.param(enc.patch_weight);
    let b = tape.param(enc.patch_bias);
    let chw = tape.conv2d(image, w, Some(b), p, 0)?;
    tape.permute(chw, &[1, 2, 0])
}

pub fn add_absolute_positions<F: Scalar>(
    tape: &mut Tape<'_, F>,
    grid: Var,
    table: Var,
) -> Result<Var> {
    tape.add(grid, table)
}

/// Split `(H, W, C)` into `(N, w, w, C)` windows, zero-padding the bottom and
/// right edges to a multiple of `w`.
pub fn window_partition<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    window: usize,
) -> Result<(Var, PadInfo)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || window == 0 {
        return Err(Error::dim("window_partition", &shape, &[window]));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let pad = PadInfo {
        height: h,
        width: w,
        padded_height: h.div_ceil(window) * window,
        padded_width: w.div_ceil(window) * window,
        window,
    };
    let per_row = pad.padded_width / window;
    let n = pad.windows();
    let index: Arc<[usize]> = (0..n * window * window * c)
        .map(|o| {
            let ch = o % c;
            let col = (o / c) % window;
            let row = (o / (c * window)) % window;
            let win = o / (c * window * window);
            let y = (win / per_row) * window + row;
            let xx = (win % per_row) * window + col;
            if y < h && xx < w {
                (y * w + xx) * c + ch
            } else {
                GATHER_PAD
            }
        })
        .collect();
    let out = tape.gather(x, index, [n, window, window, c])?;
    Ok((out, pad))
}

/// Inverse of [`window_partition`]: reassemble and crop to `(H, W, C)`.
pub fn window_unpartition<F: Scalar>(
    tape: &mut Tape<'_, F>,
    windows: Var,
    pad: &PadInfo,
    height: usize,
    width: usize,
) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let wsz = pad.window;
    let consistent = shape.len() == 4
        && wsz > 0
        && pad.height == height
        && pad.width == width
        && pad.padded_height == height.div_ceil(wsz) * wsz
        && pad.padded_width == width.div_ceil(wsz) * wsz
        && shape[0] == pad.windows()
        && shape[1] == wsz
        && shape[2] == wsz;
    if !consistent {
        return Err(Error::Contract(format!(
            "window_unpartition: windows {shape:?} inconsistent with {pad:?} for {height}x{width}"
        )));
    }
    let c = shape[3];
    let per_row = pad.padded_width / wsz;
    let index: Arc<[usize]> = (0..height * width * c)
        .map(|o| {
            let ch = o % c;
            let xx = (o / c) % width;
            let y = o / (c * width);
            let win = (y / wsz) * per_row + xx / wsz;
            ((win * wsz + y % wsz) * wsz + xx % wsz) * c + ch
        })
        .collect();
    tape.gather(windows, index, [height, width, c])
}

/// Multi-head self-attention inside each `(w, w)` window of `(N, w, w, C)`.
pub fn window_attention<F: Scalar>(
    tape: &mut Tape<'_, F>,
    windows: Var,
    block: &VitBlock,
) -> Result<AttentionOutput> {
    let shape = tape.shape(windows).to_vec();
    if shape.len() != 4 || shape[3] != block.attn.dim {
        return Err(Error::dim("window_attention", &shape, &[block.attn.dim]));
    }
    let (n, t) = (shape[0], shape[1] * shape[2]);
    let flat = tape.reshape(windows, [n * t, shape[3]])?;
    let bias = tape.param(block.rel_pos);
    if tape.shape(bias) != [block.attn.heads, t, t] {
        return Err(Error::dim(
            "window_attention bias",
            tape.shape(bias),
            &[block.attn.heads, t, t],
        ));
    }
    let res = block.attn.forward(tape, flat, flat, flat, n, Some(bias))?;
    Ok(AttentionOutput {
        out: tape.reshape(res.out, shape)?,
        weights: res.weights,
    })
}

/// Pre-norm transformer block with windowed attention, optional adapters.
pub fn vit_block<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, block: &VitBlock) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("vit_block", &shape, &[block.attn.dim]));
    }
    let normed = block.norm1.forward(tape, x)?;
    let (windows, pad) = window_partition(tape, normed, block.window)?;
    let mut attended = window_attention(tape, windows, block)?.out;
    if let Some(adapter) = &block.seq_adapter {
        let wshape = tape.shape(attended).to_vec();
        let flat = tape.reshape(attended, [wshape[..3].iter().product::<usize>(), wshape[3]])?;
        let adapted = sequential_adapter(tape, flat, adapter)?;
        attended = tape.reshape(adapted, wshape)?;
    }
    let attended = window_unpartition(tape, attended, &pad, shape[0], shape[1])?;
    let x1 = tape.add(x, attended)?;
    match &block.par_adapter {
        Some(par) => parallel_adapter(tape, x1, par, &block.norm2, &block.mlp),
        None => {
            let normed = block.norm2.forward(tape, x1)?;
            let mlp = block.mlp.forward(tape, normed)?;
            tape.add(x1, mlp)
        }
    }
}

/// `(H', W', d)` grid to a `(neck_dim, H', W')` embedding.
pub fn neck<F: Scalar>(tape: &mut Tape<'_, F>, grid: Var, neck: &Neck) -> Result<Var> {
    let chw = tape.permute(grid, &[2, 0, 1])?;
    let w1 = tape.param(neck.conv1);
    let y = tape.conv2d(chw, w1, None, 1, 0)?;
    let y = neck.norm1.forward_channels(tape, y)?;
    let w2 = tape.param(neck.conv2);
    let y = tape.conv2d(y, w2, None, 1, 1)?;
    neck.norm2.forward_channels(tape, y)
}

/// Full encoder: `(3, H, W)` image to a `(neck_dim, H/p, W/p)` embedding.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<'_, F>,
    image: Var,
    enc: &ImageEncoder,
) -> Result<Var> {
    let grid = patch_embed(tape, image, enc)?;
    let table = tape.param(enc.abs_pos);
    let mut x = add_absolute_positions(tape, grid, table)?;
    for block in &enc.blocks {
        x = vit_block(tape, x, block)?;
    }
    neck(tape, x, &enc.neck)
}
