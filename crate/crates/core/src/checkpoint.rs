//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `BQECKPT\0`, `u32` version, `u8` kind
//! (0 = full model, 1 = QE only), `u32`-prefixed JSON model config, then
//! `u8` store count and per store a `u32` tensor count followed by
//! `u32`-prefixed name, `u64` rows, `u64` cols and raw `f64` data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BqeParams, ModelConfig, QeParams};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"BQECKPT\0";
pub const VERSION: u32 = 1;

const KIND_FULL: u8 = 0;
const KIND_QE: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) {
    put_u32(out, store.len() as u32);
    for (name, m) in store.iter() {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn encode(kind: u8, config: &ModelConfig, stores: &[&ParamStore]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(kind);
    let json = serde_json::to_vec(config).expect("model config serialises");
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    out.push(stores.len() as u8);
    for s in stores {
        put_store(&mut out, s);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn store(&mut self) -> Result<Vec<(String, Matrix)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(out)
    }
}

struct Decoded {
    kind: u8,
    config: ModelConfig,
    stores: Vec<Vec<(String, Matrix)>>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u8()?;
    let stores = (0..count).map(|_| r.store()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Decoded { kind, config, stores })
}

fn fill(store: &mut ParamStore, tensors: Vec<(String, Matrix)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            store.len(),
            tensors.len()
        )));
    }
    for (id, (name, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
        if store.name(id) != name || store.get(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match {} {:?}",
                value.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::UnwritablePath {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn encode_model(params: &BqeParams) -> Vec<u8> {
    let mut stores = vec![&params.store];
    if let Some(qe) = &params.qe {
        stores.push(&qe.store);
    }
    encode(KIND_FULL, &params.config, &stores)
}

pub fn decode_model(bytes: &[u8]) -> Result<BqeParams> {
    let d = decode(bytes)?;
    if d.kind != KIND_FULL {
        return Err(Error::Checkpoint("expected a full-model checkpoint".into()));
    }
    let mut params = BqeParams::new(&d.config)?;
    let expected = 1 + usize::from(params.qe.is_some());
    if d.stores.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} stores, found {}", d.stores.len())));
    }
    let mut stores = d.stores.into_iter();
    fill(&mut params.store, stores.next().expect("main store"))?;
    if let Some(qe) = &mut params.qe {
        fill(&mut qe.store, stores.next().expect("qe store"))?;
    }
    Ok(params)
}

pub fn encode_qe(qe: &QeParams) -> Vec<u8> {
    encode(KIND_QE, &qe.config, &[&qe.store])
}

pub fn decode_qe(bytes: &[u8]) -> Result<QeParams> {
    let d = decode(bytes)?;
    if d.kind != KIND_QE {
        return Err(Error::Checkpoint("expected a QE checkpoint".into()));
    }
    let mut qe = QeParams::new(&d.config)?;
    let store = d
        .stores
        .into_iter()
        .next()
        .ok_or_else(|| Error::Checkpoint("missing QE store".into()))?;
    fill(&mut qe.store, store)?;
    Ok(qe)
}

pub fn save_model(params: &BqeParams, path: &Path) -> Result<()> {
    write(path, &encode_model(params))
}

pub fn load_model(path: &Path) -> Result<BqeParams> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_qe(qe: &QeParams, path: &Path) -> Result<()> {
    write(path, &encode_qe(qe))
}

pub fn load_qe(path: &Path) -> Result<QeParams> {
    decode_qe(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
