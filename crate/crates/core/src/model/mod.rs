//! Segmentation network: windowed ViT encoder, optional parameter-efficient
//! deltas, and a prompt-free mask decoder.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod peft;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::params::{CountFilter, Initializer, ParamSink, ParamStore, ShapeRegistry};

pub use decoder::{DecoderConfig, MaskDecoder, PromptState};
pub use encoder::{EncoderConfig, ImageEncoder};
pub use peft::{AdapterConfig, DeltaSpec, FreezeMask, LoraConfig, LoraTarget};

/// Everything needed to rebuild a network's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub deltas: DeltaSpec,
}

impl ModelConfig {
    /// Desk preset: toy encoder, default decoder, LoRA on query/value.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::default(),
            deltas: DeltaSpec {
                adapter: None,
                lora: Some(LoraConfig::default()),
            },
        }
    }
}

/// Network structure; weights live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: ImageEncoder,
    pub prompt: PromptState,
    pub decoder: MaskDecoder,
    /// Deltas currently attached.
    pub deltas: DeltaSpec,
}

impl Network {
    /// Base network without deltas; every parameter starts tunable.
    pub fn build_base<S: ParamSink>(
        sink: &mut S,
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
    ) -> Result<Self> {
        if encoder.neck_dim != decoder.token_dim {
            return Err(Error::Config(format!(
                "encoder neck_dim {} differs from decoder token_dim {}",
                encoder.neck_dim, decoder.token_dim
            )));
        }
        let encoder = ImageEncoder::build(sink, encoder)?;
        let prompt = PromptState::build(sink, decoder.token_dim, encoder.config.grid())?;
        let decoder = MaskDecoder::build(sink, decoder)?;
        Ok(Network {
            encoder,
            prompt,
            decoder,
            deltas: DeltaSpec::default(),
        })
    }

    /// Base network plus the configured deltas, with the backbone frozen.
    pub fn build<S: ParamSink>(sink: &mut S, config: &ModelConfig) -> Result<(Self, FreezeMask)> {
        let mut net = Self::build_base(sink, &config.encoder, &config.decoder)?;
        let mask = peft::attach_deltas(&mut net, sink, &config.deltas)?;
        Ok((net, mask))
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.config.clone(),
            decoder: self.decoder.config.clone(),
            deltas: self.deltas.clone(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.encoder.config.image_size
    }

    /// `(3, H, W)` image to `(num_class, H, W)` logits.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let embedding = encoder::encoder_forward(tape, image, &self.encoder)?;
        decoder::decoder_forward(
            tape,
            embedding,
            &self.prompt,
            &self.decoder,
            (shape[1], shape[2]),
        )
    }

    /// Crack-class probability map `(H, W)` from logits `(K, H, W)`.
    pub fn crack_probability<F: Scalar>(tape: &mut Tape<'_, F>, logits: Var) -> Result<Var> {
        let shape = tape.shape(logits).to_vec();
        if shape.len() != 3 || shape[0] < 2 {
            return Err(Error::dim("crack_probability", &shape, &[2]));
        }
        let probs = tape.softmax(logits, 0)?;
        let plane = shape[1] * shape[2];
        let index: Arc<[usize]> = (plane..2 * plane).collect();
        tape.gather(probs, index, [shape[1], shape[2]])
    }
}

/// Exact scalar-parameter count of a store or shape registry.
pub fn count_parameters<S: ParamSink>(sink: &S, filter: CountFilter) -> usize {
    sink.count(filter)
}

/// Structure and parameter shapes without allocating any weights.
pub fn shape_only(config: &ModelConfig) -> Result<(Network, ShapeRegistry)> {
    let mut reg = ShapeRegistry::new();
    let (net, _) = Network::build(&mut reg, config)?;
    Ok((net, reg))
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub net: Network,
    pub params: ParamStore<F>,
    pub mask: FreezeMask,
}

impl<F: Scalar> Model<F> {
    /// Fresh model with weights drawn from a seeded generator.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (net, mask) = Network::build(&mut Initializer::new(&mut params, &mut rng), config)?;
        Ok(Model { net, params, mask })
    }

    pub fn config(&self) -> ModelConfig {
        self.net.config()
    }

    /// Same model in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
            mask: self.mask.clone(),
        }
    }

    /// Gradient-free forward pass to `(num_class, H, W)` logits.
    pub fn logits(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(image.clone());
        let y = self.net.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Gradient-free crack probability map `(H, W)`.
    pub fn crack_probability(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(image.clone());
        let y = self.net.forward(&mut tape, x)?;
        let p = Network::crack_probability(&mut tape, y)?;
        Ok(tape.value(p).clone())
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        peft::merge_lora(&mut self.net, &mut self.params)
    }

    pub fn unmerge_lora(&mut self) -> Result<()> {
        peft::unmerge_lora(&mut self.net, &mut self.params)
    }
}
