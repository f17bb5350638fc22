//! Parameter counts for the ViT presets with LoRA and adapter deltas,
//! computed from shapes alone.

use crackseg::model::{
    count_parameters, shape_only, AdapterConfig, DeltaSpec, EncoderConfig, LoraConfig, LoraTarget,
    ModelConfig,
};
use crackseg::params::CountFilter;

fn main() -> crackseg::Result<()> {
    let lora = |rank| DeltaSpec {
        adapter: None,
        lora: Some(LoraConfig {
            rank,
            targets: LoraTarget::parse_set("qv").unwrap(),
        }),
    };
    let adapter = DeltaSpec {
        adapter: Some(AdapterConfig::default()),
        lora: None,
    };
    println!(
        "{:<8} {:<14} {:>13} {:>11} {:>11}",
        "encoder", "deltas", "all", "tunable", "delta-only"
    );
    for name in ["vit-b", "vit-l", "vit-h"] {
        for (label, deltas) in [
            ("lora qv r=1", lora(1)),
            ("lora qv r=4", lora(4)),
            ("adapters m=32", adapter.clone()),
        ] {
            let cfg = ModelConfig {
                encoder: EncoderConfig::by_name(name, 1024)?,
                deltas,
                ..ModelConfig::toy()
            };
            let (_, reg) = shape_only(&cfg)?;
            println!(
                "{name:<8} {label:<14} {:>13} {:>11} {:>11}",
                count_parameters(&reg, CountFilter::All),
                count_parameters(&reg, CountFilter::Tunable),
                count_parameters(&reg, CountFilter::DeltaOnly)
            );
        }
    }
    Ok(())
}
