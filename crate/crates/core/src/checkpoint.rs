//! Single-file checkpoints: a JSON header (network spec, metadata and a
//! manifest of tensor identifiers with byte offsets) followed by FDTENSR1
//! tensors in registry order. Encoding is byte-deterministic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_fdnet, Network, NetworkSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FDCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: EntryKind,
    /// Offset of the tensor blob from the start of the tensor section.
    pub offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training iterations completed.
    pub iteration: usize,
    /// Dataset channel means, used as the padding value at inference.
    pub channel_means: Vec<f64>,
    pub ignore: u8,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    meta: CheckpointMeta,
    entries: Vec<ManifestEntry>,
}

fn tensors(net: &Network) -> Vec<(String, EntryKind, Tensor)> {
    let mut out: Vec<(String, EntryKind, Tensor)> = net
        .params
        .params()
        .iter()
        .map(|p| (p.name.clone(), EntryKind::Param, p.value.clone()))
        .collect();
    for s in net.params.all_stats() {
        out.push((s.name.clone(), EntryKind::RunningMean, Tensor::from_vec(s.mean.clone())));
        out.push((s.name.clone(), EntryKind::RunningVar, Tensor::from_vec(s.var.clone())));
    }
    out
}

pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut entries = Vec::new();
    for (id, kind, t) in tensors(net) {
        entries.push(ManifestEntry {
            id,
            kind,
            offset: body.len() as u64,
        });
        t.write_to(&mut body).expect("writing to a Vec cannot fail");
    }
    let header = serde_json::to_vec(&Header {
        spec: net.spec.clone(),
        meta: meta.clone(),
        entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing FDCKPT01 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {}", e)))?;
    let body = &bytes[16 + hlen..];
    let mut net = build_fdnet(&header.spec, 0)?;
    let read = |e: &ManifestEntry| -> Result<Tensor> {
        let start = usize::try_from(e.offset).ok().filter(|&o| o <= body.len()).ok_or_else(|| bad("offset out of range"))?;
        let mut slice = &body[start..];
        Tensor::read_from(&mut slice)
    };
    let mut seen = 0usize;
    for e in &header.entries {
        let t = read(e)?;
        match e.kind {
            EntryKind::Param => {
                let id = net.params.find(&e.id).ok_or_else(|| bad(&format!("unknown parameter {}", e.id)))?;
                let p = net.params.get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(bad(&format!("{}: shape {:?} != {:?}", e.id, t.shape(), p.value.shape())));
                }
                p.value = t;
            }
            EntryKind::RunningMean | EntryKind::RunningVar => {
                let s = net
                    .params
                    .all_stats_mut()
                    .iter_mut()
                    .find(|s| s.name == e.id)
                    .ok_or_else(|| bad(&format!("unknown running stats {}", e.id)))?;
                let target = if e.kind == EntryKind::RunningMean { &mut s.mean } else { &mut s.var };
                if t.len() != target.len() {
                    return Err(bad(&format!("{}: {} channels, expected {}", e.id, t.len(), target.len())));
                }
                *target = t.into_data();
            }
        }
        seen += 1;
    }
    let expected = net.params.params().len() + 2 * net.params.all_stats().len();
    if seen != expected {
        return Err(bad(&format!("{} tensors, expected {}", seen, expected)));
    }
    Ok((net, header.meta))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
