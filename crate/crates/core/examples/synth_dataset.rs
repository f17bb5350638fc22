//! Generate a small synthetic crack dataset and summarise it.

use crackseg::data::synth::synth_generate;

fn main() -> crackseg::Result<()> {
    let out = std::env::temp_dir().join("crackseg-synth-example");
    let samples = synth_generate(20, 64, 7, &out)?;
    for s in &samples {
        println!(
            "{}  crack pixels {:>4} ({:.2}%)",
            s.id,
            s.mask.positives(),
            100.0 * s.mask.positive_fraction()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
