//! Zero-initialised adapters and LoRA leave a network's output untouched.

use crackseg::model::{AdapterConfig, DeltaSpec, LoraConfig, Model, ModelConfig};
use crackseg::numeric::Tensor;

fn main() -> crackseg::Result<()> {
    let base_cfg = ModelConfig {
        deltas: DeltaSpec::default(),
        ..ModelConfig::toy()
    };
    let delta_cfg = ModelConfig {
        deltas: DeltaSpec {
            adapter: Some(AdapterConfig::default()),
            lora: Some(LoraConfig::default()),
        },
        ..ModelConfig::toy()
    };
    let base = Model::<f32>::init(&base_cfg, 3)?;
    let with = Model::<f32>::init(&delta_cfg, 3)?;
    let x = Tensor::from_fn([3, 64, 64], |i| (i % 97) as f32 / 96.0);
    let same = base.logits(&x)?.bitwise_eq(&with.logits(&x)?);
    println!(
        "{} extra tunable tensors, output bitwise identical: {same}",
        with.params.len() - base.params.len()
    );
    Ok(())
}
