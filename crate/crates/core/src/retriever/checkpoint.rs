//! Binary checkpoint container.
//!
//! Layout: `b"KICRANK\0"`, format version (u32 LE), header length (u32 LE),
//! JSON header, entity real parts, entity imaginary parts, relation phases
//! (all f64 LE), then a SHA-256 of every preceding byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelShape, RetrieverError, RetrieverModel};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KICRANK\0";
const CHECKSUM_LEN: usize = 32;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    shape: ModelShape,
}

pub(crate) fn encode(model: &RetrieverModel, version: u32) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        format_version: version,
        shape: model.shape(),
    })
    .expect("header serializes");
    let (er, ei, ph) = model.params();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * (er.len() * 2 + ph.len()) + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in er.iter().chain(ei).chain(ph) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<RetrieverModel, RetrieverError> {
    if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN {
        return Err(RetrieverError::Checksum);
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(RetrieverError::Checksum);
    }
    if &body[..8] != MAGIC {
        return Err(RetrieverError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(RetrieverError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if header_end > body.len() {
        return Err(RetrieverError::Corrupt("header overruns file".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| RetrieverError::Corrupt(format!("header: {e}")))?;
    let s = header.shape;
    let n_ent = s.num_entities * s.dim;
    let n_rel = s.num_relations * s.dim;
    let payload = &body[header_end..];
    if payload.len() != 8 * (2 * n_ent + n_rel) {
        return Err(RetrieverError::Corrupt(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            8 * (2 * n_ent + n_rel)
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
    let entity_re = take(n_ent);
    let entity_im = take(n_ent);
    let phase = take(n_rel);
    if s.dim == 0 {
        return Err(RetrieverError::Corrupt("dim is zero".into()));
    }
    let mut model = RetrieverModel::from_parts(s.dim, s.gamma, entity_re, entity_im, phase);
    model.seed = s.seed;
    // from_parts infers counts from lengths; zero-entity models need the header.
    model.num_entities = s.num_entities;
    model.num_relations = s.num_relations;
    Ok(model)
}

pub fn save_model(model: &RetrieverModel, path: &Path) -> Result<(), RetrieverError> {
    fs::write(path, encode(model, FORMAT_VERSION))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<RetrieverModel, RetrieverError> {
    decode(&fs::read(path)?)
}
