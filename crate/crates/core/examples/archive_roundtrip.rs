//! Save tunable and full checkpoints, reload them and print the header.

use crackseg::data::archive::{archive_model, restore_model, ArchiveKind, TensorArchive};
use crackseg::model::{Model, ModelConfig};

fn main() -> crackseg::Result<()> {
    let dir = std::env::temp_dir().join("crackseg-archive-example");
    let model = Model::<f32>::init(&ModelConfig::toy(), 5)?;
    for kind in [ArchiveKind::Tunable, ArchiveKind::Full] {
        let path = dir.join(format!("{}.ckpt", kind.as_str()));
        archive_model(&model, kind, 5)?.save(&path)?;
        let back = restore_model(&TensorArchive::load(&path)?)?;
        let same = model
            .params
            .iter()
            .zip(back.params.iter())
            .all(|((_, a), (_, b))| a.value.bitwise_eq(&b.value));
        println!(
            "{:<8} {:>9} bytes, restored bitwise: {same}",
            kind.as_str(),
            std::fs::metadata(&path)?.len()
        );
    }
    let bytes = std::fs::read(dir.join("tunable.ckpt"))?;
    let header: String = String::from_utf8_lossy(&bytes)
        .lines()
        .take(8)
        .collect::<Vec<_>>()
        .join("\n");
    println!("{header}");
    Ok(())
}
