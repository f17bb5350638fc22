//! Named-tensor checkpoint archives.
//!
//! Layout: a UTF-8 header of newline-terminated records followed by the raw
//! little-endian `f32` payload.
//!
//! ```text
//! CRACKSEG-ARCHIVE 1
//! meta <key> <escaped value>
//! tensor <name> f32 <d0,d1,..> <byte offset> <byte length>
//! end
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;
use crate::params::ParamStore;

const MAGIC: &str = "CRACKSEG-ARCHIVE 1";

pub const META_MODEL_CONFIG: &str = "model_config";
pub const META_INIT_SEED: &str = "init_seed";
pub const META_KIND: &str = "kind";

/// Which parameters an archive holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchiveKind {
    /// Every parameter of the model.
    Full,
    /// Tunable parameters only; the rest is rebuilt from `init_seed`.
    Tunable,
}

impl ArchiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchiveKind::Full => "full",
            ArchiveKind::Tunable => "tunable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ArchiveKind::Full),
            "tunable" => Ok(ArchiveKind::Tunable),
            other => Err(Error::Archive(format!("unknown archive kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Archive(format!(
                    "bad escape \\{other:?} in meta value"
                )))
            }
        }
    }
    Ok(out)
}

fn bad(line: usize, what: &str) -> Error {
    Error::Archive(format!("header line {line}: {what}"))
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.is_empty() || k.chars().any(char::is_whitespace) {
                return Err(Error::Archive(format!("invalid meta key {k:?}")));
            }
            let _ = writeln!(header, "meta {k} {}", escape(v));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Archive(format!("invalid tensor name {name:?}")));
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let len = t.numel() * 4;
            let _ = writeln!(
                header,
                "tensor {name} f32 {} {offset} {len}",
                shape.join(",")
            );
            offset += len;
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line_no = 0usize;
        let mut next_line = |pos: &mut usize| -> Result<String> {
            line_no += 1;
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(line_no, "truncated header"))?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad(line_no, "header is not UTF-8"))
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(Error::Archive(
                "not a checkpoint archive (bad magic line)".into(),
            ));
        }
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        let mut n = 1;
        loop {
            let line = next_line(&mut pos)?;
            n += 1;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), unescape(v)?);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 || f[1] != "f32" {
                    return Err(bad(
                        n,
                        "expected `tensor <name> f32 <shape> <offset> <len>`",
                    ));
                }
                let shape = if f[2].is_empty() {
                    Vec::new()
                } else {
                    f[2].split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(n, "bad shape")))
                        .collect::<Result<Vec<_>>>()?
                };
                let offset: usize = f[3].parse().map_err(|_| bad(n, "bad offset"))?;
                let len: usize = f[4].parse().map_err(|_| bad(n, "bad length"))?;
                entries.push((f[0].to_string(), shape, offset, len, n));
            } else {
                return Err(bad(n, "unknown record"));
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0usize;
        for (name, shape, offset, len, line) in entries {
            let numel: usize = shape.iter().product();
            if len != numel * 4 {
                return Err(bad(
                    line,
                    &format!("{name}: length {len} does not match shape {shape:?}"),
                ));
            }
            if offset != expected_offset || offset + len > payload.len() {
                return Err(bad(
                    line,
                    &format!("{name}: payload range {offset}+{len} out of place"),
                ));
            }
            expected_offset += len;
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.iter().any(|(n, _): &(String, _)| *n == name) {
                return Err(bad(line, &format!("duplicate tensor {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if expected_offset != payload.len() {
            return Err(Error::Archive(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(TensorArchive { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }

    /// Copy every archived tensor into the store by name. Unknown names and
    /// shape mismatches are reported together and leave the store untouched.
    pub fn overlay(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match store.by_name(name) {
                None => problems.push(format!("unknown parameter {name}")),
                Some(p) if p.value.shape() != t.shape() => problems.push(format!(
                    "{name}: archive shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Archive(problems.join("; ")));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked above");
            store.assign(id, t.clone())?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let raw = self
            .meta
            .get(META_MODEL_CONFIG)
            .ok_or_else(|| Error::Archive(format!("missing meta {META_MODEL_CONFIG}")))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn init_seed(&self) -> Result<u64> {
        self.meta
            .get(META_INIT_SEED)
            .ok_or_else(|| Error::Archive(format!("missing meta {META_INIT_SEED}")))?
            .parse()
            .map_err(|_| Error::Archive(format!("meta {META_INIT_SEED} is not an integer")))
    }

    pub fn kind(&self) -> Result<ArchiveKind> {
        ArchiveKind::parse(self.meta.get(META_KIND).map_or("full", String::as_str))
    }
}

/// Snapshot a model. Tunable archives hold only the parameters in the
/// model's tunable set.
pub fn archive_model(
    model: &Model<f32>,
    kind: ArchiveKind,
    init_seed: u64,
) -> Result<TensorArchive> {
    let tensors = model
        .params
        .iter()
        .filter(|(id, _)| kind == ArchiveKind::Full || model.mask.contains(*id))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    Ok(TensorArchive {
        meta: BTreeMap::new(),
        tensors,
    }
    .with_meta(META_MODEL_CONFIG, serde_json::to_string(&model.config())?)
    .with_meta(META_INIT_SEED, init_seed)
    .with_meta(META_KIND, kind.as_str()))
}

/// Rebuild the model an archive describes: structure from its config, base
/// weights from its init seed, then the archived tensors on top.
pub fn restore_model(archive: &TensorArchive) -> Result<Model<f32>> {
    let config = archive.model_config()?;
    let mut model = Model::init(&config, archive.init_seed()?)?;
    if archive.kind()? == ArchiveKind::Full {
        let missing: Vec<&str> = model
            .params
            .names()
            .filter(|n| archive.get(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Archive(format!(
                "full archive lacks {}",
                missing.join(", ")
            )));
        }
    }
    archive.overlay(&mut model.params)?;
    Ok(model)
}

/// Fold every LoRA product into its base weight and return a plain archive
/// whose config has no LoRA and whose tensors omit the low-rank factors.
pub fn merged_archive(archive: &TensorArchive) -> Result<TensorArchive> {
    let mut model = restore_model(archive)?;
    if model.config().deltas.lora.is_none() {
        return Err(Error::Config("archive has no LoRA deltas to merge".into()));
    }
    model.merge_lora()?;
    let mut config = model.config();
    config.deltas.lora = None;
    let tensors = model
        .params
        .iter()
        .filter(|(_, p)| !(p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b")))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let mut out = TensorArchive {
        meta: archive.meta.clone(),
        tensors,
    };
    out.meta
        .insert(META_MODEL_CONFIG.into(), serde_json::to_string(&config)?);
    out.meta
        .insert(META_KIND.into(), ArchiveKind::Full.as_str().into());
    out.meta.insert("lora_merged".into(), "true".into());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        TensorArchive {
            meta: BTreeMap::new(),
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::new(
                        [2, 3],
                        vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, f32::MAX, 1e-30],
                    )
                    .unwrap(),
                ),
                ("s".into(), Tensor::scalar(7.25)),
                ("empty".into(), Tensor::zeros([1, 4])),
            ],
        }
        .with_meta("note", "line one\nline \\two with spaces")
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let a = sample();
        let b = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a.meta, b.meta);
        for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2));
        }
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(
            text.starts_with("CRACKSEG-ARCHIVE 1\nmeta note line one\\nline \\\\two with spaces\n")
        );
        assert!(text.contains("tensor a.weight f32 2,3 0 24\ntensor s f32 1 24 4\n"));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorArchive::from_bytes(&extra).is_err());
        assert!(TensorArchive::from_bytes(b"NOPE\nend\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("2,3 0 24", "2,3 4 24");
        assert!(TensorArchive::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn overlay_reports_every_problem() {
        let mut store = ParamStore::<f32>::new();
        use crate::params::{ParamGroup, ParamRole};
        store
            .add(
                "a.weight",
                Tensor::zeros([3, 2]),
                ParamRole::Weight,
                ParamGroup::Decoder,
            )
            .unwrap();
        let before = store.clone();
        let err = sample().overlay(&mut store).unwrap_err().to_string();
        assert!(
            err.contains("a.weight")
                && err.contains("unknown parameter s")
                && err.contains("empty")
        );
        assert!(store
            .value(store.id("a.weight").unwrap())
            .bitwise_eq(before.value(before.id("a.weight").unwrap())));
    }
}
