//! Plain-text run configuration: one `key = value` per line, dotted keys,
//! `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{
    AdapterConfig, DecoderConfig, DeltaSpec, EncoderConfig, LoraConfig, LoraTarget, ModelConfig,
};
use crate::train::TrainConfig;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder_preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_root: PathBuf,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_preset: "vit-toy".into(),
            model: ModelConfig::toy(),
            train: TrainConfig::desk(),
            data_root: PathBuf::from("data"),
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: invalid value {raw:?} for {key}"))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if map
                .insert(key.clone(), (n + 1, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
        }
        let mut e = Entries { map };
        let mut cfg = RunConfig::default();

        e.set("model.encoder", &mut cfg.encoder_preset)?;
        let image_size = e.take::<usize>("model.image_size")?;
        let mut enc = EncoderConfig::by_name(&cfg.encoder_preset, image_size.unwrap_or(64))?;
        if image_size.is_none() && cfg.encoder_preset != "vit-toy" {
            enc.image_size = 448;
        }
        e.set("encoder.embed_dim", &mut enc.embed_dim)?;
        e.set("encoder.depth", &mut enc.depth)?;
        e.set("encoder.num_heads", &mut enc.num_heads)?;
        e.set("encoder.window_size", &mut enc.window_size)?;
        e.set("encoder.patch_size", &mut enc.patch_size)?;
        e.set("encoder.neck_dim", &mut enc.neck_dim)?;

        let mut dec = DecoderConfig {
            token_dim: enc.neck_dim,
            ..DecoderConfig::default()
        };
        e.set("decoder.num_class", &mut dec.num_class)?;
        e.set("decoder.depth", &mut dec.depth)?;
        e.set("decoder.num_heads", &mut dec.num_heads)?;
        e.set("decoder.mlp_dim", &mut dec.mlp_dim)?;
        e.set("decoder.upsample_mid", &mut dec.upsample_mid)?;
        e.set("decoder.upsample_out", &mut dec.upsample_out)?;

        let mut deltas = DeltaSpec::default();
        let lora_on = e.take::<bool>("delta.lora")?.unwrap_or(true);
        if lora_on {
            let mut lora = LoraConfig::default();
            e.set("delta.lora.rank", &mut lora.rank)?;
            if let Some(t) = e.take::<String>("delta.lora.targets")? {
                lora.targets = LoraTarget::parse_set(&t)?;
            }
            deltas.lora = Some(lora);
        }
        let adapter_on = e.take::<bool>("delta.adapter")?.unwrap_or(false);
        if adapter_on {
            let mut a = AdapterConfig::default();
            e.set("delta.adapter.middle_dim", &mut a.middle_dim)?;
            e.set("delta.adapter.scaling", &mut a.scaling)?;
            e.set("delta.adapter.sequential", &mut a.sequential)?;
            e.set("delta.adapter.parallel", &mut a.parallel)?;
            deltas.adapter = Some(a);
        }
        cfg.model = ModelConfig {
            encoder: enc,
            decoder: dec,
            deltas,
        };

        let t = &mut cfg.train;
        e.set("train.lr0", &mut t.lr0)?;
        e.set("train.warmup_iters", &mut t.warmup_iters)?;
        e.set("train.power", &mut t.power)?;
        e.set("train.epochs", &mut t.epochs)?;
        e.set("train.batch_size", &mut t.batch_size)?;
        e.set("train.lambda_ce", &mut t.lambda_ce)?;
        e.set("train.beta1", &mut t.beta1)?;
        e.set("train.beta2", &mut t.beta2)?;
        e.set("train.weight_decay", &mut t.weight_decay)?;
        e.set("train.adam_eps", &mut t.adam_eps)?;
        e.set("train.binarize_threshold", &mut t.binarize_threshold)?;
        e.set("train.augment", &mut t.augment)?;

        e.set("data.root", &mut cfg.data_root)?;
        e.set("seed", &mut cfg.seed)?;
        e.set("output.dir", &mut cfg.output_dir)?;
        cfg.train.seed = cfg.seed;

        if let Some((key, (line, _))) = e.map.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {key}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.train.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    /// Fully resolved text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let enc = &self.model.encoder;
        let dec = &self.model.decoder;
        let t = &self.train;
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", &self.seed);
        kv("model.encoder", &self.encoder_preset);
        kv("model.image_size", &enc.image_size);
        kv("encoder.embed_dim", &enc.embed_dim);
        kv("encoder.depth", &enc.depth);
        kv("encoder.num_heads", &enc.num_heads);
        kv("encoder.window_size", &enc.window_size);
        kv("encoder.patch_size", &enc.patch_size);
        kv("encoder.neck_dim", &enc.neck_dim);
        kv("decoder.num_class", &dec.num_class);
        kv("decoder.depth", &dec.depth);
        kv("decoder.num_heads", &dec.num_heads);
        kv("decoder.mlp_dim", &dec.mlp_dim);
        kv("decoder.upsample_mid", &dec.upsample_mid);
        kv("decoder.upsample_out", &dec.upsample_out);
        kv("delta.lora", &self.model.deltas.lora.is_some());
        if let Some(l) = &self.model.deltas.lora {
            kv("delta.lora.rank", &l.rank);
            kv("delta.lora.targets", &LoraTarget::format_set(&l.targets));
        }
        kv("delta.adapter", &self.model.deltas.adapter.is_some());
        if let Some(a) = &self.model.deltas.adapter {
            kv("delta.adapter.middle_dim", &a.middle_dim);
            kv("delta.adapter.scaling", &a.scaling);
            kv("delta.adapter.sequential", &a.sequential);
            kv("delta.adapter.parallel", &a.parallel);
        }
        kv("train.lr0", &t.lr0);
        kv("train.warmup_iters", &t.warmup_iters);
        kv("train.power", &t.power);
        kv("train.epochs", &t.epochs);
        kv("train.batch_size", &t.batch_size);
        kv("train.lambda_ce", &t.lambda_ce);
        kv("train.beta1", &t.beta1);
        kv("train.beta2", &t.beta2);
        kv("train.weight_decay", &t.weight_decay);
        kv("train.adam_eps", &t.adam_eps);
        kv("train.binarize_threshold", &t.binarize_threshold);
        kv("train.augment", &t.augment);
        kv("data.root", &self.data_root.display());
        kv("output.dir", &self.output_dir.display());
        s
    }
}
