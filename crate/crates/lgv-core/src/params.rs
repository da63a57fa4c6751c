//! Named parameter tensors with gradient accumulators and the on-disk
//! checkpoint format (JSON header + little-endian f32 payload in header
//! order).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Shape, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn by_idx(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn by_idx_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Round every value to f32 and back. Saving a checkpoint applies this to
    /// the live store so that a resumed run and a continued run see identical
    /// parameter bytes.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Records which store entries were bound as tape leaves so that gradients
/// can be routed back by store index. Binding the same parameter twice on one
/// tape returns the same leaf.
pub struct Binder {
    tape: Tape,
    cache: HashMap<usize, Var>,
}

impl Binder {
    pub fn new(tape: &Tape) -> Binder {
        Binder { tape: tape.clone(), cache: HashMap::new() }
    }

    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Var {
        let i = store.idx(name);
        if let Some(v) = self.cache.get(&i) {
            return v.clone();
        }
        let v = self.tape.leaf(store.by_idx(i).1.clone());
        self.cache.insert(i, v.clone());
        v
    }

    /// Accumulate adjoints of all bound parameters into `acc` (store order).
    pub fn accumulate(&self, grads: &Grads, acc: &mut GradAccum) {
        for (&i, var) in &self.cache {
            if let Some(g) = grads.wrt(var) {
                let slot = &mut acc.buf[i];
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }
}

/// Per-parameter gradient buffers, aligned with a store's entry order.
#[derive(Clone)]
pub struct GradAccum {
    buf: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn zeros_like(store: &ParamStore) -> GradAccum {
        GradAccum { buf: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    pub fn add(&mut self, other: &GradAccum) {
        for (a, b) in self.buf.iter_mut().zip(&other.buf) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.buf {
            for x in a.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.buf[i]
    }

    pub fn all_finite(&self) -> bool {
        self.buf.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<TensorMeta>,
    hyper: Vec<(String, f64)>,
}

const FORMAT_NAME: &str = "lgv-checkpoint";

/// Write `store` to `path`. The live store is quantized to f32 first so the
/// in-memory state after saving equals the state a reader will load.
pub fn write_checkpoint(store: &mut ParamStore, hyper: &[(String, f64)], path: &Path) -> Result<()> {
    store.quantize_f32();
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: 1,
        tensors: store
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.to_string(),
                shape: match t.shape() {
                    Shape::Vector(n) => vec![n],
                    Shape::Matrix(r, c) => vec![r, c],
                },
            })
            .collect(),
        hyper: hyper.to_vec(),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    bytes.push(b'\n');
    for (_, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a checkpoint into a fresh store plus its hyperparameter list.
pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, Vec<(String, f64)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path.display().to_string(), "missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if header.format != FORMAT_NAME {
        return Err(Error::format(path.display().to_string(), format!("unknown format {}", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload length mismatch: expected {} bytes, found {}", expected * 4, payload.len()),
        ));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let b = [payload[off + 4 * k], payload[off + 4 * k + 1], payload[off + 4 * k + 2], payload[off + 4 * k + 3]];
            data.push(f32::from_le_bytes(b) as f64);
        }
        off += 4 * n;
        let shape = match meta.shape.len() {
            1 => Shape::Vector(meta.shape[0]),
            2 => Shape::Matrix(meta.shape[0], meta.shape[1]),
            d => return Err(Error::format(path.display().to_string(), format!("rank-{d} tensor unsupported"))),
        };
        store.insert(&meta.name, Tensor::new(shape, data));
    }
    Ok((store, header.hyper))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = std::env::temp_dir().join("lgv_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");

        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5e-7, 2.0, -9.25]));
        store.insert("b", Tensor::vector(vec![0.5, 0.25]));
        write_checkpoint(&mut store, &[("epoch".into(), 3.0)], &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (mut loaded, hyper) = read_checkpoint(&path).unwrap();
        assert_eq!(hyper[0].0, "epoch");
        assert_eq!(loaded.get("w").data()[4], 2.0);
        write_checkpoint(&mut loaded, &hyper, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2, "write -> read -> write must be byte identical");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = std::env::temp_dir().join("lgv_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("b.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
        write_checkpoint(&mut store, &[], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 12 bytes") && msg.contains("found 8"), "{msg}");
    }
}
