//! Binary model checkpoints. The layout is described in `docs/checkpoint-format.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::matrix::Matrix;
use crate::model::{Model, Role};
use crate::propagation::Variant;

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_BINARY: u8 = 1;
const FLAG_WEIGHTS: u8 = 2;
const FLAG_OFFSET: u8 = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    /// Hash of the resolved configuration that produced the model.
    pub config_hash: String,
}

fn put_bits(out: &mut Vec<u8>, bits: &[bool]) {
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (k, b) in chunk.iter().enumerate() {
            if *b {
                byte |= 1 << k;
            }
        }
        out.push(byte);
    }
}

fn put_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model: only unmasked embedding entries are stored.
pub fn encode(model: &Model, meta: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut flags = 0;
    if model.binary_propagation {
        flags |= FLAG_BINARY;
    }
    if model.edge_weights.is_some() {
        flags |= FLAG_WEIGHTS;
    }
    if model.weight_offset.is_some() {
        flags |= FLAG_OFFSET;
    }
    let variant = match model.variant {
        Variant::Plain => 0u8,
        Variant::Weighted => 1,
    };
    out.extend_from_slice(&[model.role.code(), variant, flags, 0]);
    out.extend_from_slice(&(model.graph.num_users() as u64).to_le_bytes());
    out.extend_from_slice(&(model.graph.num_items() as u64).to_le_bytes());
    out.extend_from_slice(&(model.emb.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.layers as u32).to_le_bytes());
    out.extend_from_slice(&(model.graph.num_edges() as u64).to_le_bytes());
    out.extend_from_slice(&(meta.config_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.config_hash.as_bytes());

    let emb = &model.emb;
    put_bits(&mut out, &emb.user_mask);
    put_bits(&mut out, &emb.item_mask);
    let kept = |m: &Matrix, mask: &[bool]| -> Vec<f64> {
        m.as_slice().iter().zip(mask).filter(|(_, k)| **k).map(|(x, _)| *x).collect()
    };
    put_f64s(&mut out, kept(&emb.users, &emb.user_mask));
    put_f64s(&mut out, kept(&emb.items, &emb.item_mask));
    for (u, v) in model.graph.edges() {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_bits(&mut out, &model.original);
    if let Some(w) = &model.edge_weights {
        put_f64s(&mut out, w.iter().copied());
    }
    if let Some(o) = &model.weight_offset {
        put_f64s(&mut out, o.iter().copied());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| "size overflow".to_string())
    }

    fn bits(&mut self, n: usize) -> std::result::Result<Vec<bool>, String> {
        let bytes = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect())
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn scatter(rows: usize, cols: usize, mask: &[bool], values: &[f64]) -> Matrix {
    let mut data = vec![0.0; rows * cols];
    let mut it = values.iter();
    for (slot, m) in data.iter_mut().zip(mask) {
        if *m {
            *slot = *it.next().unwrap();
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<(Model, Metadata), String> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("integrity check failed (hash mismatch)".into());
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let role = Role::from_code(r.u8()?).ok_or("unknown role")?;
    let variant = match r.u8()? {
        0 => Variant::Plain,
        1 => Variant::Weighted,
        v => return Err(format!("unknown variant {v}")),
    };
    let flags = r.u8()?;
    r.u8()?;
    let (num_users, num_items) = (r.u64()?, r.u64()?);
    let dim = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let num_edges = r.u64()?;
    let hash_len = r.u32()? as usize;
    let config_hash = String::from_utf8(r.take(hash_len)?.to_vec()).map_err(|_| "config hash is not UTF-8")?;

    let user_mask = r.bits(num_users * dim)?;
    let item_mask = r.bits(num_items * dim)?;
    let user_vals = r.f64s(user_mask.iter().filter(|m| **m).count())?;
    let item_vals = r.f64s(item_mask.iter().filter(|m| **m).count())?;
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        edges.push((r.u32()?, r.u32()?));
    }
    let original = r.bits(num_edges)?;
    let edge_weights = if flags & FLAG_WEIGHTS != 0 { Some(r.f64s(num_edges)?) } else { None };
    let weight_offset = if flags & FLAG_OFFSET != 0 { Some(r.f64s(num_edges)?) } else { None };
    if r.pos != body.len() {
        return Err("trailing bytes after payload".into());
    }

    let users = scatter(num_users, dim, &user_mask, &user_vals);
    let items = scatter(num_items, dim, &item_mask, &item_vals);
    let emb = EmbeddingTable::new(users, items)
        .and_then(|e| e.with_masks(user_mask, item_mask))
        .map_err(|e| e.to_string())?;
    let graph = BipartiteGraph::from_edges(num_users, num_items, &edges).map_err(|e| e.to_string())?;
    if graph.num_edges() != num_edges || graph.edges().zip(&edges).any(|(a, b)| a != *b) {
        return Err("edge list is not sorted and duplicate-free".into());
    }
    let model = Model {
        role,
        graph,
        emb,
        layers,
        variant,
        edge_weights,
        weight_offset,
        binary_propagation: flags & FLAG_BINARY != 0,
        original,
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok((model, Metadata { config_hash }))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, Metadata)> {
    decode_inner(bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, model: &Model, meta: &Metadata) -> Result<()> {
    write_atomic(path, &encode(model, meta))
}

pub fn load(path: &Path) -> Result<(Model, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample_model() -> Model {
        let g = BipartiteGraph::from_edges(3, 4, &[(0, 0), (0, 3), (1, 1), (2, 2), (2, 0)]).unwrap();
        let mut emb = EmbeddingTable::xavier(3, 4, 5, &mut rng::stream(1, "t"));
        emb.user_mask[3] = false;
        emb.item_mask[7] = false;
        emb.apply_masks();
        let mut m = Model::weighted(Role::Student, g, emb, 2, vec![true, false, true, true, false]).unwrap();
        m.edge_weights = Some(vec![0.5, -1.0, 2.0, 0.25, 1.5]);
        m.weight_offset = Some(vec![0.1; 5]);
        m
    }

    #[test]
    fn round_trip() {
        let m = sample_model();
        let meta = Metadata {
            config_hash: "abc123".into(),
        };
        let bytes = encode(&m, &meta);
        let (back, meta_back) = decode(&bytes, Path::new("x.ckpt")).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample_model(), &Metadata::default());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(&bytes, Path::new("student.ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("student.ckpt") && msg.contains("integrity"), "{msg}");
    }

    #[test]
    fn masked_entries_shrink_the_file() {
        let m = sample_model();
        let full = encode(&m, &Metadata::default()).len();
        let mut pruned = m.clone();
        pruned.emb.user_mask.iter_mut().for_each(|x| *x = false);
        pruned.emb.apply_masks();
        let small = encode(&pruned, &Metadata::default()).len();
        assert_eq!(full - small, 8 * (m.emb.user_mask.iter().filter(|x| **x).count()));
    }
}
