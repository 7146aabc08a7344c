//! Checkpoints and cross-modal weight initialization.
//!
//! On-disk layout, all integers little-endian:
//!
//! ```text
//! b"TIRD"  u32 version  u32 count
//! count × { u16 name_len, name, u8 rank, rank × u32 dim, numel × f64 }
//! u32 meta_len, meta_len bytes of `key=value\n` lines
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Streams, TrackerNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TIRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub entries: ParamStore,
    pub metadata: IndexMap<String, String>,
}

impl Checkpoint {
    /// Snapshot of `net` with its architecture recorded in the metadata.
    pub fn from_net(net: &TrackerNet) -> Self {
        let mut metadata: IndexMap<String, String> = net.config().to_kv().into_iter().collect();
        metadata.insert("model.streams".into(), net.streams().name().into());
        Self {
            version: FORMAT_VERSION,
            entries: net.params().clone(),
            metadata,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    /// Rebuilds the network described by the metadata and loads every entry.
    pub fn to_net(&self) -> Result<TrackerNet> {
        let mut cfg = ModelConfig::default();
        let mut streams = None;
        for (k, v) in &self.metadata {
            if k == "model.streams" {
                streams = Some(Streams::parse(v)?);
            } else if k.starts_with("model.") {
                cfg.apply_kv(k, v)?;
            }
        }
        let streams = streams.ok_or_else(|| Error::Format("checkpoint metadata lacks `model.streams`".into()))?;
        let mut net = TrackerNet::new(cfg, streams, 0)?;
        if net.params().len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, architecture expects {}",
                self.entries.len(),
                net.params().len()
            )));
        }
        for (name, slot) in net.params_mut().iter_mut() {
            let value = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if value.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "`{name}` has shape {:?}, architecture expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(net)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + self.entries.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in self.entries.iter() {
            let len = u16::try_from(name.len()).map_err(|_| Error::Usage(format!("parameter name too long: `{name}`")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!("metadata entry `{k}` cannot be serialized")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "<header>")? != MAGIC {
            return Err(Error::Format("missing TIRD magic".into()));
        }
        let version = r.u32("<header>")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("<header>")?;
        let mut entries = ParamStore::new();
        for i in 0..count {
            let placeholder = format!("#{i}");
            let len = r.u16(&placeholder)? as usize;
            let name = String::from_utf8(r.take(len, &placeholder)?.to_vec()).map_err(|_| Error::Corruption {
                entry: placeholder.clone(),
                detail: "name is not UTF-8".into(),
            })?;
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let data = match numel {
                Some(n) if rank > 0 && n > 0 => {
                    let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect()
                }
                _ => {
                    return Err(Error::Corruption {
                        entry: name,
                        detail: format!("invalid shape {shape:?}"),
                    })
                }
            };
            let tensor = Tensor::new(shape, data).expect("length matches shape");
            entries.insert(name.clone(), tensor).map_err(|_| Error::Corruption {
                entry: name,
                detail: "duplicate entry".into(),
            })?;
        }
        let meta_len = r.u32("<metadata>")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "<metadata>")?).map_err(|_| Error::Corruption {
            entry: "<metadata>".into(),
            detail: "not UTF-8".into(),
        })?;
        if r.pos != bytes.len() {
            return Err(Error::Corruption {
                entry: "<metadata>".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let mut metadata = IndexMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Corruption {
                entry: "<metadata>".into(),
                detail: format!("line `{line}` is not key=value"),
            })?;
            metadata.insert(k.to_string(), v.to_string());
        }
        Ok(Self {
            version,
            entries,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corruption {
                entry: entry.to_string(),
                detail: format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, entry: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, entry)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(net: &TrackerNet, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_net(net);
    ckpt.save(path)?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

/// Which shared (non-backbone) weights [`cross_modal_init`] may copy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TransferScope {
    /// Backbone plus any fusion and head entries whose shapes match.
    #[default]
    Full,
    BackboneOnly,
}

impl TransferScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(TransferScope::Full),
            "backbone-only" | "backbone_only" | "backbone" => Ok(TransferScope::BackboneOnly),
            other => Err(Error::Config(format!("unknown transfer scope `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferScope::Full => "full",
            TransferScope::BackboneOnly => "backbone-only",
        }
    }
}

/// Outcome of [`cross_modal_init`]: `transferred` and `fresh` partition the
/// target's parameter names; `ignored` lists source entries nothing consumed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitReport {
    pub transferred: Vec<String>,
    pub fresh: Vec<String>,
    pub ignored: Vec<String>,
}

/// Copies the source `backbone.*` weights into every backbone branch of
/// `target` and, under [`TransferScope::Full`], shape-matching fusion and head
/// weights. Adapters keep their fresh initialization. Nothing is modified
/// when an error is returned.
pub fn cross_modal_init(target: &mut TrackerNet, source: &Checkpoint, scope: TransferScope) -> Result<InitReport> {
    let backbone_prefixes = target.streams().backbone_prefixes();
    let adapter_prefixes = target.streams().adapter_prefixes();
    let source_backbone = source.entries.names().filter(|n| n.starts_with("backbone.")).count();
    if source_backbone == 0 {
        return Err(Error::Transfer(
            "source checkpoint has no `backbone.*` entries; expected a single-stream thermal net".into(),
        ));
    }

    let mut plan: Vec<(String, String)> = Vec::new();
    let mut report = InitReport::default();
    for (name, value) in target.params().iter() {
        let backbone_rest = backbone_prefixes
            .iter()
            .find_map(|p| name.strip_prefix(p).and_then(|r| r.strip_prefix('.')));
        if let Some(rest) = backbone_rest {
            let src_name = format!("backbone.{rest}");
            let src = source
                .entries
                .get(&src_name)
                .ok_or_else(|| Error::Transfer(format!("source lacks `{src_name}` needed for `{name}`")))?;
            if src.shape() != value.shape() {
                return Err(Error::Transfer(format!(
                    "`{src_name}` has shape {:?}, `{name}` needs {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            plan.push((name.to_string(), src_name));
            continue;
        }
        let is_adapter = adapter_prefixes
            .iter()
            .any(|p| name.strip_prefix(p).is_some_and(|r| r.starts_with('.')));
        let shared = scope == TransferScope::Full
            && !is_adapter
            && source.entries.get(name).is_some_and(|s| s.shape() == value.shape());
        if shared {
            plan.push((name.to_string(), name.to_string()));
        } else {
            report.fresh.push(name.to_string());
        }
    }

    for (dst, src) in &plan {
        let value = source.entries.get(src).expect("checked while planning").clone();
        *target.params_mut().get_mut(dst).expect("target name") = value;
        report.transferred.push(dst.clone());
    }
    report.ignored = source
        .entries
        .names()
        .filter(|n| !plan.iter().any(|(_, s)| s == n))
        .map(String::from)
        .collect();
    for name in &report.ignored {
        log::info!("transfer: source entry `{name}` not used");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            adapter_mid_channels: 4,
            backbone_channels: vec![4, 8],
            backbone_stride: 4,
            d_model: 8,
            n_heads: 2,
            n_fusion_layers: 1,
            template_size: 8,
            search_size: 16,
            head_channels: 4,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let net = TrackerNet::dual(tiny(), 3).unwrap();
        let ckpt = Checkpoint::from_net(&net).with_meta("source_domain", "thermal");
        let bytes = ckpt.encode().unwrap();
        assert_eq!(&bytes[..4], b"TIRD");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_net().unwrap(), net);
    }

    #[test]
    fn decode_rejects_bad_headers() {
        let net = TrackerNet::dual(tiny(), 3).unwrap();
        let mut bytes = Checkpoint::from_net(&net).encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!(TransferScope::parse("full").unwrap(), TransferScope::Full);
        assert_eq!(TransferScope::parse("backbone-only").unwrap(), TransferScope::BackboneOnly);
        assert!(TransferScope::parse("most").is_err());
    }
}
