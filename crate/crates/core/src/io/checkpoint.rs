//! `.mpx` checkpoint container.
//!
//! ```text
//! magic            8 bytes   "MAPEXCK1"
//! manifest_len     u64 LE
//! manifest         manifest_len bytes of UTF-8, one `key=value` per line
//! tensor_count     u64 LE
//! per tensor:
//!   name_len       u32 LE
//!   name           name_len bytes of UTF-8
//!   ndim           u32 LE
//!   dims           ndim × u64 LE
//!   data           Π dims × f64 LE, row-major
//! ```
//! Nothing may follow the last tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::data::ModalitySpec;
use crate::error::{MapexError, Result};
use crate::model::{Layout, MapexModel, ModelConfig, PruneRecord, PruneSpec, RoutingDecision};

pub const MAGIC: &[u8; 8] = b"MAPEXCK1";
pub const FORMAT_VERSION: u32 = 1;

/// Run metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: usize,
    pub seed: u64,
}

impl CheckpointMeta {
    /// Hex SHA-256 of the seed and step; runs are re-derived from the seed, so only a digest of the
    /// generator state is kept.
    pub fn rng_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("seed={};step={}", self.seed, self.step).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn manifest(model: &MapexModel, meta: &CheckpointMeta) -> String {
    let c = &model.config;
    let mut m = String::new();
    let mut kv = |k: &str, v: String| writeln!(m, "{k}={v}").expect("write to string");
    kv("format_version", FORMAT_VERSION.to_string());
    kv("model.dim", c.dim.to_string());
    kv("model.depth", c.depth.to_string());
    kv("model.heads", c.heads.to_string());
    kv("model.experts", c.experts.to_string());
    kv("model.expert_hidden", c.expert_hidden.to_string());
    kv("model.top_k", c.top_k.to_string());
    kv("model.routing", c.routing.to_string());
    kv("model.shared_expert", c.shared_expert.to_string());
    kv("model.decoder_depth", c.decoder_depth.to_string());
    kv("model.decoder_dim", c.decoder_dim.to_string());
    kv("model.decoder_heads", c.decoder_heads.to_string());
    kv("model.patch_size", c.patch_size.to_string());
    kv("model.image_size", c.image_size.to_string());
    kv("model.mask_ratio", c.mask_ratio.to_string());
    kv(
        "model.modalities",
        c.modalities.iter().map(|s| format!("{}:{}:{}", s.name, s.channels, s.informativeness)).collect::<Vec<_>>().join(","),
    );
    kv("layout.modalities", join(&model.modality_ids()));
    for (l, b) in model.blocks.iter().enumerate() {
        kv(&format!("layout.experts.{l}"), join(&b.moe.expert_ids()));
    }
    kv("live_routing", model.live_routing.to_string());
    if let Some(p) = &model.prune {
        kv("prune.modalities", join(&p.spec.modalities));
        kv("prune.k", p.spec.k.to_string());
        for (l, r) in p.remap.iter().enumerate() {
            kv(&format!("prune.remap.{l}"), join(r));
        }
    }
    for (l, b) in model.blocks.iter().enumerate() {
        for (m, d) in &b.moe.frozen {
            kv(
                &format!("frozen.{l}.{m}"),
                format!("{};{};{}", join(&d.selected), join(&d.gates), join(&d.probs)),
            );
        }
    }
    kv("step", meta.step.to_string());
    kv("seed", meta.seed.to_string());
    kv("rng_digest", meta.rng_digest());
    m
}

pub fn encode_checkpoint(model: &MapexModel, meta: &CheckpointMeta) -> Vec<u8> {
    let manifest = manifest(model, meta);
    let mut out = Vec::with_capacity(16 + manifest.len() + 8 * model.param_count() + 64 * model.store.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &MapexModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MapexModel, CheckpointMeta)> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MapexError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| {
            MapexError::Checkpoint(format!("length {n} exceeds file size {}", self.bytes.len()))
        })
    }
}

fn ck(msg: impl Into<String>) -> MapexError {
    MapexError::Checkpoint(msg.into())
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| ck(format!("manifest lacks {key}")))
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    field(map, key)?.parse().map_err(|_| ck(format!("manifest field {key} is malformed")))
}

fn list<T: std::str::FromStr>(text: &str, key: &str) -> Result<Vec<T>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|v| v.parse().map_err(|_| ck(format!("manifest list {key} is malformed")))).collect()
}

fn config_from(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut modalities = Vec::new();
    for (i, part) in field(map, "model.modalities")?.split(',').enumerate() {
        let f: Vec<&str> = part.split(':').collect();
        if f.len() != 3 {
            return Err(ck("manifest modality entry is malformed"));
        }
        let channels = f[1].parse().map_err(|_| ck("modality channels malformed"))?;
        let info = f[2].parse().map_err(|_| ck("modality informativeness malformed"))?;
        modalities.push(ModalitySpec::new(i, f[0], channels, info));
    }
    Ok(ModelConfig {
        dim: num(map, "model.dim")?,
        depth: num(map, "model.depth")?,
        heads: num(map, "model.heads")?,
        experts: num(map, "model.experts")?,
        expert_hidden: num(map, "model.expert_hidden")?,
        top_k: num(map, "model.top_k")?,
        routing: field(map, "model.routing")?.parse().map_err(|_| ck("routing mode malformed"))?,
        shared_expert: num(map, "model.shared_expert")?,
        decoder_depth: num(map, "model.decoder_depth")?,
        decoder_dim: num(map, "model.decoder_dim")?,
        decoder_heads: num(map, "model.decoder_heads")?,
        patch_size: num(map, "model.patch_size")?,
        image_size: num(map, "model.image_size")?,
        modalities,
        mask_ratio: num(map, "model.mask_ratio")?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MapexModel, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let mlen = r.u64()?;
    let mlen = r.len(mlen)?;
    let text = std::str::from_utf8(r.take(mlen)?).map_err(|_| ck("manifest is not UTF-8"))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| ck(format!("manifest line {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ck(format!("manifest repeats {k}")));
        }
    }
    let version: u32 = num(&map, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {version}")));
    }
    let config = config_from(&map)?;
    config.validate().map_err(|e| ck(format!("manifest config invalid: {e}")))?;
    let layout = Layout {
        modalities: list(field(&map, "layout.modalities")?, "layout.modalities")?,
        experts: (0..config.depth)
            .map(|l| {
                let key = format!("layout.experts.{l}");
                list(field(&map, &key)?, &key)
            })
            .collect::<Result<_>>()?,
    };
    let mut model = MapexModel::build(config, &layout, None)?;
    model.live_routing = num(&map, "live_routing")?;
    if map.contains_key("prune.k") {
        let spec = PruneSpec {
            modalities: list(field(&map, "prune.modalities")?, "prune.modalities")?,
            k: num(&map, "prune.k")?,
        };
        let remap = (0..model.config.depth)
            .map(|l| {
                let key = format!("prune.remap.{l}");
                list(field(&map, &key)?, &key)
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        if remap != layout.experts {
            return Err(ck("prune remap disagrees with expert layout"));
        }
        model.prune = Some(PruneRecord { spec, remap });
    }
    for (k, v) in &map {
        let Some(rest) = k.strip_prefix("frozen.") else { continue };
        let (l, m) = rest.split_once('.').ok_or_else(|| ck(format!("bad key {k}")))?;
        let l: usize = l.parse().map_err(|_| ck(format!("bad key {k}")))?;
        let m: usize = m.parse().map_err(|_| ck(format!("bad key {k}")))?;
        let parts: Vec<&str> = v.split(';').collect();
        if parts.len() != 3 || l >= model.blocks.len() {
            return Err(ck(format!("bad frozen decision {k}")));
        }
        let d = RoutingDecision { modality: m, selected: list(parts[0], k)?, gates: list(parts[1], k)?, probs: list(parts[2], k)? };
        model.blocks[l].moe.frozen.insert(m, d);
    }
    let meta = CheckpointMeta { step: num(&map, "step")?, seed: num(&map, "seed")? };

    let count = r.u64()?;
    if count != model.store.len() as u64 {
        return Err(ck(format!("{count} tensors stored, model has {}", model.store.len())));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let nlen = r.u32()? as u64;
        let nlen = r.len(nlen)?;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| ck("tensor name is not UTF-8"))?.to_string();
        let id = model.store.find(&name).ok_or_else(|| ck(format!("unexpected tensor {name}")))?;
        if !seen.insert(name.clone()) {
            return Err(ck(format!("tensor {name} appears twice")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        if shape != model.store.value(id).shape() {
            return Err(ck(format!("tensor {name} has shape {shape:?}, expected {:?}", model.store.value(id).shape())));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| ck("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.store.value_mut(id) = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes after tensor section", bytes.len() - r.pos)));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::prune;

    fn bits(m: &MapexModel) -> Vec<(String, Vec<u64>)> {
        m.store.iter().map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect())).collect()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = MapexModel::new(ModelConfig::tiny(), 12).unwrap();
        let meta = CheckpointMeta { step: 40, seed: 12 };
        let bytes = encode_checkpoint(&model, &meta);
        let (back, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(back.config, model.config);
        assert_eq!(encode_checkpoint(&back, &meta), bytes);

        let pruned = prune(&model, &PruneSpec::new(&[1, 3], 1)).unwrap();
        let bytes = encode_checkpoint(&pruned, &meta);
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.prune, pruned.prune);
        assert_eq!(bits(&back), bits(&pruned));
        for (a, b) in back.blocks.iter().zip(&pruned.blocks) {
            assert_eq!(a.moe.frozen, b.moe.frozen);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = MapexModel::new(ModelConfig::tiny(), 1).unwrap();
        let bytes = encode_checkpoint(&model, &CheckpointMeta::default());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(MapexError::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(MapexError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(MapexError::Checkpoint(_))));
        let text = String::from_utf8_lossy(&bytes).replace("format_version=1", "format_version=9");
        assert!(matches!(decode_checkpoint(text.as_bytes()), Err(MapexError::Checkpoint(_))));
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = CheckpointMeta { step: 3, seed: 4 }.rng_digest();
        assert_eq!(d.len(), 64);
        assert_eq!(d, CheckpointMeta { step: 3, seed: 4 }.rng_digest());
        assert_ne!(d, CheckpointMeta { step: 4, seed: 4 }.rng_digest());
    }
}
