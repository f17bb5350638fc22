use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crackseg::data::archive::{
    archive_model, merged_archive, restore_model, ArchiveKind, TensorArchive,
};
use crackseg::data::synth::synth_sample;
use crackseg::data::{load_dataset, DatasetManifest, Split};
use crackseg::model::{Model, ModelConfig};
use crackseg::numeric::Tensor;
use image::{GrayImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;

fn crackseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackseg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crackseg(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn probe(seed: u64) -> Tensor<f32> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, 64, 64], |_| r.random_range(0.0..1.0))
}

#[test]
fn full_archive_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::init(&ModelConfig::toy(), 3).unwrap();
    let path = dir.path().join("full.ckpt");
    archive_model(&model, ArchiveKind::Full, 99)
        .unwrap()
        .save(&path)
        .unwrap();
    let back = restore_model(&TensorArchive::load(&path).unwrap()).unwrap();
    assert_eq!(back.config(), model.config());
    for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
    }
}

#[test]
fn tunable_archive_holds_delta_prompt_and_decoder_names() {
    let model = Model::<f32>::init(&ModelConfig::toy(), 0).unwrap();
    let ar = archive_model(&model, ArchiveKind::Tunable, 0).unwrap();
    let names: BTreeSet<&str> = ar.tensors.iter().map(|(n, _)| n.as_str()).collect();
    let want: BTreeSet<&str> = model
        .params
        .iter()
        .filter(|(id, _)| model.mask.contains(*id))
        .map(|(_, p)| p.name.as_str())
        .collect();
    assert_eq!(names, want);
    assert!(names
        .iter()
        .all(|n| n.starts_with("decoder.") || n.starts_with("prompt.") || n.contains(".lora_")));
    assert_eq!(names.iter().filter(|n| n.contains(".lora_")).count(), 8);
}

#[test]
fn delta_overlay_changes_output_iff_deltas_nonzero() {
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 5).unwrap();
    let fresh = Model::<f32>::init(&ModelConfig::toy(), 5).unwrap();
    let x = probe(1);
    let base_out = fresh.logits(&x).unwrap();

    let mut same = fresh.clone();
    archive_model(&model, ArchiveKind::Tunable, 5)
        .unwrap()
        .overlay(&mut same.params)
        .unwrap();
    assert!(same.logits(&x).unwrap().bitwise_eq(&base_out));

    let id = model
        .params
        .id("encoder.blocks.1.attn.value.lora_b")
        .unwrap();
    model.params.get_mut(id).value.data_mut()[7] = 0.5;
    let mut changed = fresh.clone();
    archive_model(&model, ArchiveKind::Tunable, 5)
        .unwrap()
        .overlay(&mut changed.params)
        .unwrap();
    assert!(!changed.logits(&x).unwrap().bitwise_eq(&base_out));
}

#[test]
fn overlay_rejects_foreign_archives() {
    let model = Model::<f32>::init(&ModelConfig::toy(), 0).unwrap();
    let mut other = Model::<f32>::init(
        &ModelConfig {
            deltas: Default::default(),
            ..ModelConfig::toy()
        },
        0,
    )
    .unwrap();
    let ar = archive_model(&model, ArchiveKind::Tunable, 0).unwrap();
    let msg = ar.overlay(&mut other.params).unwrap_err().to_string();
    assert!(
        msg.contains("unknown parameter encoder.blocks.0.attn.query.lora_a"),
        "{msg}"
    );
}

#[test]
fn merged_archive_preserves_forward() {
    let mut model = Model::<f32>::init(&ModelConfig::toy(), 2).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
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
            .for_each(|v| *v = r.random_range(-0.05..0.05));
    }
    let merged = restore_model(
        &merged_archive(&archive_model(&model, ArchiveKind::Tunable, 2).unwrap()).unwrap(),
    )
    .unwrap();
    assert!(merged.config().deltas.lora.is_none());
    assert!(merged.params.names().all(|n| !n.contains("lora")));
    for s in 0..5 {
        let x = probe(10 + s);
        let d = merged
            .logits(&x)
            .unwrap()
            .max_rel_diff(&model.logits(&x).unwrap(), 1e-3);
        assert!(d < 1e-5, "{d}");
    }
}

#[test]
fn loading_resizes_and_binarises() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new(dir.path(), Split::Val, 448);
    fs::create_dir_all(m.images_dir()).unwrap();
    fs::create_dir_all(m.masks_dir()).unwrap();
    RgbImage::from_pixel(448, 448, image::Rgb([10, 20, 30]))
        .save(m.images_dir().join("b.png"))
        .unwrap();
    GrayImage::from_fn(448, 448, |x, _| {
        image::Luma([if x < 100 { 255 } else { 0 }])
    })
    .save(m.masks_dir().join("b.png"))
    .unwrap();
    RgbImage::new(300, 200)
        .save(m.images_dir().join("a.png"))
        .unwrap();
    GrayImage::from_fn(300, 200, |x, _| {
        image::Luma([if x % 2 == 0 { 128 } else { 127 }])
    })
    .save(m.masks_dir().join("a.png"))
    .unwrap();
    let set = load_dataset(&m).unwrap();
    assert_eq!(
        set.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
        ["a", "b"]
    );
    for s in &set {
        assert_eq!(s.image.shape(), &[3, 448, 448]);
        assert_eq!((s.mask.height(), s.mask.width()), (448, 448));
    }
    assert_eq!(set[1].mask.positives(), 100 * 448);
    assert!(set[0].mask.positive_fraction() > 0.4 && set[0].mask.positive_fraction() < 0.6);
}

#[test]
fn synth_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--n",
            "4",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 8);
    assert_eq!(ta, tb);
    let s = synth_sample(7, 2, 64).unwrap();
    let img = image::open(a.join("images/00002.png")).unwrap().to_rgb8();
    assert_eq!(crackseg::data::rgb_to_tensor(&img), s.image);
}

#[test]
fn count_params_reproduces_vit_h_lora_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("h.cfg");
    fs::write(&cfg, "model.encoder = vit-h\nmodel.image_size = 1024\ndelta.lora.rank = 1\ndelta.lora.targets = qv\n").unwrap();
    let out = ok(&["count-params", "--config", cfg.to_str().unwrap()]);
    assert!(out.contains("delta-only  163840"), "{out}");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let out = crackseg(&["count-params", "--config", "/nonexistent/run.cfg"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    let out = crackseg(&["synth", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn training_pipeline_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (split, n, seed) in [("train", "6", "1"), ("val", "3", "2"), ("test", "3", "3")] {
        let out = root.join("data").join(split);
        ok(&[
            "synth",
            "--n",
            n,
            "--size",
            "32",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let cfg = root.join(format!("{run}.cfg"));
        fs::write(
            &cfg,
            format!(
                "model.image_size = 32\nencoder.embed_dim = 16\nencoder.num_heads = 2\nencoder.patch_size = 8\n\
                 encoder.neck_dim = 16\ndecoder.num_heads = 2\ndecoder.mlp_dim = 32\ndecoder.upsample_mid = 8\n\
                 decoder.upsample_out = 8\ntrain.epochs = 2\ntrain.batch_size = 2\ntrain.warmup_iters = 2\n\
                 seed = 3\ndata.root = {}\noutput.dir = {}\n",
                root.join("data").display(),
                root.join(run).display()
            ),
        )
        .unwrap();
        let c = cfg.to_str().unwrap();
        ok(&["train", "--config", c]);
        let ckpt = root.join(run).join("best.ckpt");
        let ck = ckpt.to_str().unwrap();
        ok(&[
            "eval",
            "--config",
            c,
            "--checkpoint",
            ck,
            "--noise",
            "case2",
            "--granularity",
            "macro",
        ]);
        let pred = root.join(run).join("pred.png");
        let img = root.join("data/test/images/00000.png");
        ok(&[
            "infer",
            "--checkpoint",
            ck,
            "--image",
            img.to_str().unwrap(),
            "--out",
            pred.to_str().unwrap(),
        ]);
        let merged = root.join(run).join("merged.ckpt");
        ok(&[
            "merge-lora",
            "--checkpoint",
            ck,
            "--out",
            merged.to_str().unwrap(),
        ]);
        let noisy = root.join(run).join("noisy");
        ok(&[
            "corrupt",
            "--in",
            root.join("data/test").to_str().unwrap(),
            "--out",
            noisy.to_str().unwrap(),
            "--noise",
            "case1",
        ]);
        outputs.push(tree(&root.join(run)));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "best.ckpt",
        "config.txt",
        "epochs.csv",
        "merged.ckpt",
        "pred.png",
        "report-case2-macro.json",
    ] {
        assert!(names.contains(&f), "{names:?}");
    }
    // config.txt records each run's own output directory
    let normalise = |(name, bytes): &(String, Vec<u8>)| {
        let text = String::from_utf8_lossy(bytes).replace("/r2", "/r1");
        (
            name.clone(),
            if name == "config.txt" {
                text.into_bytes()
            } else {
                bytes.clone()
            },
        )
    };
    let differing: Vec<&str> = outputs[0]
        .iter()
        .zip(&outputs[1])
        .filter(|(a, b)| normalise(a) != normalise(b))
        .map(|(a, _)| a.0.as_str())
        .collect();
    assert_eq!(outputs[0].len(), outputs[1].len());
    assert!(differing.is_empty(), "differing outputs: {differing:?}");
    let pred = image::open(root.join("r1/pred.png")).unwrap().to_luma8();
    assert!(pred.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let csv = fs::read_to_string(root.join("r1/epochs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
