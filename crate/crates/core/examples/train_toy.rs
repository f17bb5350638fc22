//! Train the toy model with LoRA on synthetic data and report held-out
//! metrics. Usage: `train_toy [epochs]`.

use crackseg::data::synth::synth_dataset;
use crackseg::eval::{evaluate_dataset, Granularity};
use crackseg::model::{Model, ModelConfig};
use crackseg::train::{train_loop, TrainConfig};

fn main() -> crackseg::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(5);
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk()
    };
    let (train, val, test) = (
        synth_dataset(200, 64, 1000)?,
        synth_dataset(40, 64, 2000)?,
        synth_dataset(60, 64, 3000)?,
    );
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 0)?;
    let out = train_loop(&mut model, &train, &val, &cfg, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  val f1 {:.3}  lr {:.2e}",
            e.epoch, e.train_loss, e.val.f1, e.lr
        )
    })?;
    out.best.restore(&mut model.params)?;
    let report = evaluate_dataset(
        &model,
        &test,
        None,
        Granularity::Micro,
        cfg.binarize_threshold,
    )?;
    println!("best epoch {}\n{report}", out.best.epoch);
    Ok(())
}
