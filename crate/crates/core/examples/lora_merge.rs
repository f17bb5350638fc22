//! Fold trained LoRA factors into the base weights and compare outputs.

use crackseg::model::{Model, ModelConfig};
use crackseg::numeric::Tensor;
use rand::{Rng, SeedableRng};

fn main() -> crackseg::Result<()> {
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    // stand-in for training: give every B factor some weight
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.ends_with("lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model
            .params
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.05..0.05));
    }
    let x = Tensor::from_fn([3, 64, 64], |_| rng.random_range(0.0..1.0));
    let bypass = model.logits(&x)?;
    model.merge_lora()?;
    let merged = model.logits(&x)?;
    println!(
        "relative difference after merge: {:.2e}",
        merged.max_rel_diff(&bypass, 0.0)
    );
    model.unmerge_lora()?;
    println!(
        "relative difference after unmerge: {:.2e}",
        model.logits(&x)?.max_rel_diff(&bypass, 0.0)
    );
    Ok(())
}
