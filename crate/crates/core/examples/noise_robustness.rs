//! Apply both corruptions to a synthetic image and write the results, then
//! compare a briefly trained model on clean and corrupted inputs.

use crackseg::data::synth::{synth_dataset, synth_sample};
use crackseg::data::tensor_to_rgb;
use crackseg::eval::{evaluate_dataset, Granularity, NoiseSpec};
use crackseg::model::{Model, ModelConfig};
use crackseg::train::{train_loop, TrainConfig};

fn main() -> crackseg::Result<()> {
    let dir = std::env::temp_dir().join("crackseg-noise-example");
    std::fs::create_dir_all(&dir)?;
    let img = tensor_to_rgb(&synth_sample(1, 0, 64)?.image)?;
    img.save(dir.join("clean.png"))?;
    for spec in [NoiseSpec::case1(), NoiseSpec::case2()] {
        spec.apply(&img)?
            .save(dir.join(format!("case{}.png", spec.case_number())))?;
    }
    println!("images in {}", dir.display());

    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::desk()
    };
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 0)?;
    let (train, val, test) = (
        synth_dataset(200, 64, 1)?,
        synth_dataset(40, 64, 2)?,
        synth_dataset(60, 64, 3)?,
    );
    train_loop(&mut model, &train, &val, &cfg, |_| {})?;
    for noise in [None, Some(NoiseSpec::case1()), Some(NoiseSpec::case2())] {
        let r = evaluate_dataset(&model, &test, noise.as_ref(), Granularity::Micro, 0.5)?;
        let tag = noise.map_or("clean".into(), |n| format!("case{}", n.case_number()));
        println!("{tag:<6} f1 {:.3}  iou {:.3}", r.f1, r.iou);
    }
    Ok(())
}
