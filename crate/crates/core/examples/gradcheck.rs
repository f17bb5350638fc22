//! Finite-difference check of every tunable gradient of the toy model.
//! Pass `--quick` to check only the LoRA factors' directions.

use crackseg::data::synth::synth_sample;
use crackseg::model::{Model, ModelConfig};
use crackseg::train::gradcheck::{check_model, perturb_zero_deltas, GradcheckPlan};

fn main() -> crackseg::Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 0)?.cast::<f64>();
    perturb_zero_deltas(&mut model.params, 0.02, 0);
    if quick {
        let keep: Vec<_> = model
            .params
            .iter()
            .filter(|(_, p)| !p.name.contains("lora"))
            .map(|(id, _)| id)
            .collect();
        for id in keep {
            model.params.set_tunable(id, false);
        }
    }
    let sample = synth_sample(0, 0, 64)?;
    let report = check_model(&model, &sample, &GradcheckPlan::default(), |name, s| {
        println!(
            "{name:<48} {:>4} coords  max rel {:.2e}",
            s.checked, s.max_rel_error
        );
    })?;
    println!(
        "{} tensors, {} coordinates checked, max relative error {:.3e}",
        report.tensors,
        report.coordinates.checked,
        report.max_rel_error()
    );
    Ok(())
}
