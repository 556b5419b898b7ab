//! Versioned single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic           8  bytes  "SSEGCKPT"
//! format_version  u32
//! spec_json_len   u32, then that many bytes of ModelSpec JSON
//! n_params        u32
//! manifest        per parameter, sorted by canonical name:
//!                   name_len u16, name bytes (UTF-8),
//!                   trainable u8, ndim u8, ndim × dim u32
//! payloads        per parameter in manifest order: f32 LE values
//! checksum        32 bytes, SHA-256 over everything above
//! ```
//!
//! Writes go through a temp file in the target directory plus an atomic
//! rename. An optimizer-state sidecar (magic "SSEGOPTS") reuses the same
//! blob-table encoding so interrupted training resumes bit-exactly.
//!
//! Externally produced weights are imported by renaming: a translation
//! table maps foreign parameter names onto canonical ones
//! (`load_checkpoint_with_map`), after which the usual exact
//! manifest-vs-architecture match applies.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::backend::{Optimizer, OptimizerKind, ParamStore};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, SegmentationModel};

const CKPT_MAGIC: &[u8; 8] = b"SSEGCKPT";
const OPT_MAGIC: &[u8; 8] = b"SSEGOPTS";
pub const FORMAT_VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Debug, Clone)]
struct Blob {
    name: String,
    trainable: bool,
    value: ArrayD<f32>,
}

fn encode_blobs(header_json: &[u8], magic: &[u8; 8], blobs: &[Blob]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        let name = b.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(b.trainable as u8);
        out.push(b.value.ndim() as u8);
        for &d in b.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for b in blobs {
        for &v in b.value.as_slice().expect("standard layout") {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err("truncated container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_blobs(bytes: &[u8], magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<Blob>)> {
    if bytes.len() < 32 {
        return Err(ckpt_err("file too short to be a checkpoint"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(ckpt_err("checksum mismatch: payload corrupted"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != magic {
        return Err(ckpt_err("unrecognized container magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let json_len = r.u32()? as usize;
    let header_json = r.take(json_len)?.to_vec();
    let n = r.u32()? as usize;
    let mut metas = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ckpt_err("parameter name is not UTF-8"))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        metas.push((name, trainable, dims));
    }
    let mut blobs = Vec::with_capacity(n);
    for (name, trainable, dims) in metas {
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| ckpt_err(format!("blob {name} does not match its declared shape")))?;
        blobs.push(Blob {
            name,
            trainable,
            value,
        });
    }
    if r.pos != body.len() {
        return Err(ckpt_err("trailing bytes after payload"));
    }
    Ok((header_json, blobs))
}

// Temp file + rename keeps concurrent readers away from partial writes.
// No fsync: a torn file after power loss is caught by the checksum at
// load time, and per-epoch syncs dominate training time on small models.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize spec and parameters. Byte-stable: identical parameters always
/// produce identical files.
pub fn save_checkpoint(model: &SegmentationModel, path: &Path) -> Result<()> {
    let spec_json = serde_json::to_vec(model.spec()).expect("spec serializes");
    let blobs: Vec<Blob> = model
        .params()
        .iter()
        .map(|(name, e)| Blob {
            name: name.clone(),
            trainable: e.trainable,
            value: e.value.clone(),
        })
        .collect();
    write_atomic(path, &encode_blobs(&spec_json, CKPT_MAGIC, &blobs))
}

fn instantiate(spec: ModelSpec, blobs: Vec<Blob>, expected: Option<&ModelSpec>) -> Result<SegmentationModel> {
    if let Some(expected) = expected {
        if let Some(field) = expected.field_mismatch(&spec) {
            return Err(ckpt_err(format!(
                "checkpoint spec differs from expected spec in field `{field}`"
            )));
        }
    }
    // Assemble the architecture to pin the canonical manifest, then demand
    // an exact match: no silent reshapes, no missing or extra parameters.
    let reference = SegmentationModel::new(spec.clone(), 0)?;
    let mut store = ParamStore::new();
    let mut loaded: BTreeMap<String, Blob> = blobs
        .into_iter()
        .map(|b| (b.name.clone(), b))
        .collect();
    for (name, entry) in reference.params().iter() {
        let blob = loaded.remove(name).ok_or_else(|| {
            ckpt_err(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if blob.value.shape() != entry.value.shape() {
            return Err(ckpt_err(format!(
                "parameter `{name}` has shape {:?}, architecture expects {:?}",
                blob.value.shape(),
                entry.value.shape()
            )));
        }
        store.insert(name.clone(), blob.value, entry.trainable);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(ckpt_err(format!(
            "checkpoint contains parameter `{extra}` unknown to the architecture"
        )));
    }
    SegmentationModel::from_parts(spec, store, 0)
}

/// Read a checkpoint back into a model. With `expected_spec`, every spec
/// field except `pretrained_source` must match.
pub fn load_checkpoint(path: &Path, expected_spec: Option<&ModelSpec>) -> Result<SegmentationModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (spec_json, blobs) = decode_blobs(&bytes, CKPT_MAGIC)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| ckpt_err(format!("invalid spec header: {e}")))?;
    instantiate(spec, blobs, expected_spec)
}

/// Two-column translation table: `<foreign name> <canonical name>` per
/// line, `#` comments allowed. The import hook for externally produced
/// weights.
#[derive(Debug, Clone, Default)]
pub struct NameMap {
    map: BTreeMap<String, String>,
}

impl NameMap {
    pub fn parse(text: &str) -> Result<NameMap> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(foreign), Some(canonical), None) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(Error::config(format!(
                    "name map line {}: expected `<foreign> <canonical>`",
                    lineno + 1
                )));
            };
            if map.insert(foreign.to_string(), canonical.to_string()).is_some() {
                return Err(Error::config(format!(
                    "name map line {}: duplicate foreign name `{foreign}`",
                    lineno + 1
                )));
            }
        }
        Ok(NameMap { map })
    }

    pub fn load(path: &Path) -> Result<NameMap> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&self, name: &str) -> String {
        self.map.get(name).cloned().unwrap_or_else(|| name.to_string())
    }
}

/// Load a checkpoint whose parameters carry foreign names, renaming them
/// through `map` before the exact architecture match.
pub fn load_checkpoint_with_map(
    path: &Path,
    map: &NameMap,
    expected_spec: Option<&ModelSpec>,
) -> Result<SegmentationModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (spec_json, mut blobs) = decode_blobs(&bytes, CKPT_MAGIC)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_json)
        .map_err(|e| ckpt_err(format!("invalid spec header: {e}")))?;
    for b in &mut blobs {
        b.name = map.apply(&b.name);
    }
    instantiate(spec, blobs, expected_spec)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    learning_rate: f32,
    momentum: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step_count: u64,
    next_epoch: usize,
}

/// Persist optimizer slots (and the epoch cursor) next to a checkpoint so
/// a resumed run continues the exact parameter trajectory.
pub fn save_optimizer_state(optimizer: &Optimizer, next_epoch: usize, path: &Path) -> Result<()> {
    let header = OptimizerHeader {
        kind: optimizer.kind,
        learning_rate: optimizer.learning_rate,
        momentum: optimizer.momentum,
        beta1: optimizer.beta1,
        beta2: optimizer.beta2,
        eps: optimizer.eps,
        step_count: optimizer.step_count(),
        next_epoch,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut blobs = Vec::new();
    for (name, slot) in optimizer.slots() {
        if let Some(m) = &slot.m {
            blobs.push(Blob {
                name: format!("m.{name}"),
                trainable: false,
                value: m.clone(),
            });
        }
        if let Some(v) = &slot.v {
            blobs.push(Blob {
                name: format!("v.{name}"),
                trainable: false,
                value: v.clone(),
            });
        }
    }
    write_atomic(path, &encode_blobs(&json, OPT_MAGIC, &blobs))
}

pub fn load_optimizer_state(path: &Path) -> Result<(Optimizer, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (json, blobs) = decode_blobs(&bytes, OPT_MAGIC)?;
    let header: OptimizerHeader = serde_json::from_slice(&json)
        .map_err(|e| ckpt_err(format!("invalid optimizer header: {e}")))?;
    let mut optimizer = Optimizer::new(
        header.kind,
        header.learning_rate,
        header.momentum,
        header.beta1,
        header.beta2,
    );
    optimizer.eps = header.eps;
    optimizer.set_step_count(header.step_count);
    for b in blobs {
        let Some((kind, param)) = b.name.split_once('.') else {
            return Err(ckpt_err(format!("malformed slot name `{}`", b.name)));
        };
        match kind {
            "m" => optimizer.slot_mut(param).m = Some(b.value),
            "v" => optimizer.slot_mut(param).v = Some(b.value),
            _ => return Err(ckpt_err(format!("unknown slot kind in `{}`", b.name))),
        }
    }
    Ok((optimizer, header.next_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DecoderKind, EncoderKind};
    use ndarray::Array4;

    fn small_model() -> SegmentationModel {
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 3, 32, 32);
        SegmentationModel::new(spec, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path, Some(model.spec())).unwrap();
        for (name, e) in model.params().iter() {
            let l = loaded.params().get(name).unwrap();
            assert_eq!(e.value, l.value, "{name}");
            assert_eq!(e.trainable, l.trainable, "{name}");
        }
        let x = Array4::from_elem((1, 3, 32, 32), 0.25);
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }

    #[test]
    fn identical_models_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let model = small_model();
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupting_one_payload_byte_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&small_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let idx = bytes.len() - 200; // inside the payload region
        bytes[idx] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn spec_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&small_model(), &path).unwrap();
        let expected = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 8, 32, 32);
        let err = load_checkpoint(&path, Some(&expected)).unwrap_err();
        assert!(err.to_string().contains("n_classes"), "{err}");
    }

    #[test]
    fn missing_parameter_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        let spec_json = serde_json::to_vec(model.spec()).unwrap();
        let blobs: Vec<Blob> = model
            .params()
            .iter()
            .filter(|(name, _)| *name != "decoder.head.weight")
            .map(|(name, e)| Blob {
                name: name.clone(),
                trainable: e.trainable,
                value: e.value.clone(),
            })
            .collect();
        write_atomic(&path, &encode_blobs(&spec_json, CKPT_MAGIC, &blobs)).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("decoder.head.weight"), "{err}");
    }

    #[test]
    fn unknown_extra_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        let spec_json = serde_json::to_vec(model.spec()).unwrap();
        let mut blobs: Vec<Blob> = model
            .params()
            .iter()
            .map(|(name, e)| Blob {
                name: name.clone(),
                trainable: e.trainable,
                value: e.value.clone(),
            })
            .collect();
        blobs.push(Blob {
            name: "zz.mystery.weight".into(),
            trainable: true,
            value: ArrayD::zeros(IxDyn(&[1])),
        });
        blobs.sort_by(|a, b| a.name.cmp(&b.name));
        write_atomic(&path, &encode_blobs(&spec_json, CKPT_MAGIC, &blobs)).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("zz.mystery.weight"), "{err}");
    }

    #[test]
    fn foreign_names_import_through_a_translation_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("foreign.ckpt");
        let model = small_model();
        let spec_json = serde_json::to_vec(model.spec()).unwrap();
        // Fake an externally converted file: same payload, foreign names.
        let mut table = String::from("# foreign -> canonical\n");
        let blobs: Vec<Blob> = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, (name, e))| {
                let foreign = format!("layer_{i}/{}", name.replace('.', "_"));
                table.push_str(&format!("{foreign} {name}\n"));
                Blob {
                    name: foreign,
                    trainable: e.trainable,
                    value: e.value.clone(),
                }
            })
            .collect();
        write_atomic(&path, &encode_blobs(&spec_json, CKPT_MAGIC, &blobs)).unwrap();

        assert!(load_checkpoint(&path, None).is_err());
        let map = NameMap::parse(&table).unwrap();
        let loaded = load_checkpoint_with_map(&path, &map, Some(model.spec())).unwrap();
        let x = Array4::from_elem((1, 3, 32, 32), 0.5);
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }

    #[test]
    fn name_map_rejects_malformed_lines() {
        assert!(NameMap::parse("only_one_column\n").is_err());
        assert!(NameMap::parse("a b c\n").is_err());
        assert!(NameMap::parse("a b\na c\n").is_err());
        assert!(NameMap::parse("# comment\n\na b\n").is_ok());
    }

    #[test]
    fn optimizer_state_round_trip() {
        use std::collections::BTreeMap;
        let mut store = ParamStore::new();
        store.insert("w".into(), ArrayD::from_elem(IxDyn(&[4]), 1.0), true);
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoment, 1e-3, 0.9, 0.9, 0.999);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[4]), 0.5));
        opt.step(&mut store, &grads);
        opt.step(&mut store, &grads);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.optim");
        save_optimizer_state(&opt, 7, &path).unwrap();
        let (loaded, next_epoch) = load_optimizer_state(&path).unwrap();
        assert_eq!(next_epoch, 7);
        assert_eq!(loaded.step_count(), 2);
        let a = opt.slots().collect::<Vec<_>>();
        let b = loaded.slots().collect::<Vec<_>>();
        assert_eq!(a.len(), b.len());
        for ((na, sa), (nb, sb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(sa.m, sb.m);
            assert_eq!(sa.v, sb.v);
        }
    }
}
