//! Window partitioning with padding and the attention weights inside one
//! encoder block.

use crackseg::model::encoder::{window_attention, window_partition, window_unpartition};
use crackseg::model::{Model, ModelConfig};
use crackseg::numeric::{Tape, Tensor};

fn main() -> crackseg::Result<()> {
    let model = Model::<f32>::init(&ModelConfig::toy(), 0)?;
    let block = &model.net.encoder.blocks[0];
    let mut tape = Tape::inference(&model.params);
    // 5x5 grid, window 2: padded to 6x6, nine windows
    let x = tape.constant(Tensor::from_fn([5, 5, 64], |i| (i % 13) as f32 / 13.0));
    let (windows, pad) = window_partition(&mut tape, x, 2)?;
    println!(
        "windows {:?} from {}x{} padded to {}x{}",
        tape.shape(windows),
        pad.height,
        pad.width,
        pad.padded_height,
        pad.padded_width
    );
    let attn = window_attention(&mut tape, windows, block)?;
    let w = tape.value(attn.weights);
    println!(
        "attention weights {:?}; first row {:?}",
        w.shape(),
        &w.data()[..4]
    );
    let back = window_unpartition(&mut tape, windows, &pad, 5, 5)?;
    println!(
        "unpartition restores input: {}",
        tape.value(back).bitwise_eq(tape.value(x))
    );
    Ok(())
}
