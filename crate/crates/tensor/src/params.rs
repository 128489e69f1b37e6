//! Named parameter collections and the `DUGE1` checkpoint format.
//!
//! Layout: the 6-byte header `DUGE1\n`, a little-endian `u64` manifest length,
//! a JSON manifest `[{"name", "shape", "offset"}]` (offsets in elements), then
//! the flat little-endian `f32` blob.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DUGE1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered name → tensor map. Insertion order is the manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(TensorError::Invalid {
                op: "param_insert",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect()
    }

    /// Human-readable list of entries whose name or shape differ; empty when congruent.
    pub fn manifest_diff(&self, other: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.len().max(other.len());
        for i in 0..n {
            let a = self.names.get(i).map(|s| (s, self.tensors[i].shape()));
            let b = other.names.get(i).map(|s| (s, other.tensors[i].shape()));
            if a != b {
                out.push(format!("#{i}: {a:?} vs {b:?}"));
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value through `f32`, making the in-memory store identical
    /// to what a save/load cycle produces.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Binds every parameter onto `tape`; those selected by `trainable` become
    /// gradient-carrying leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.len());
        let mut index = HashMap::with_capacity(self.len());
        for (i, (name, t)) in self.iter().enumerate() {
            let v = if trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            index.insert(name.to_string(), i);
        }
        Bound { vars, index }
    }

    /// Binds vars already on a tape, one per entry in store order. Lets
    /// [`crate::grad_check`] drive model code that reads parameters by name.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(TensorError::Invalid {
                op: "bind_vars",
                msg: format!("{} vars for {} parameters", vars.len(), self.len()),
            });
        }
        let index = self.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Bound {
            vars: vars.to_vec(),
            index,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(6 + 8 + manifest.len() + 4 * self.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(bad("missing DUGE1 header"));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body = bytes.get(14..14 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        let blob = &bytes[14 + len..];
        if blob.len() % 4 != 0 {
            return Err(bad("blob length not a multiple of 4"));
        }
        let floats: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut store = ParamStore::new();
        for e in manifest {
            let n: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(&format!("entry `{}` exceeds blob", e.name)))?
                .to_vec();
            store.insert(e.name, Tensor::new(&e.shape, data)?)?;
        }
        if store.numel() != floats.len() {
            return Err(bad("blob has trailing values"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A [`ParamStore`] bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Panics if `name` is not part of the bound store; model code only asks
    /// for names it registered itself.
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order (zeros for untouched or frozen entries).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap())
            .unwrap();
        s.insert("a.b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_after_f32_rounding_is_exact() {
        let mut s = sample();
        s.round_to_f32();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
    }

    #[test]
    fn header_and_offsets() {
        let s = sample();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..6], b"DUGE1\n");
        let m = s.manifest();
        assert_eq!(m[0].offset, 0);
        assert_eq!(m[1].offset, 6);
        assert_eq!(m[1].shape, vec![3]);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(ParamStore::from_bytes(b"NOPE").is_err());
        let mut bytes = sample().to_bytes();
        bytes.pop();
        assert!(ParamStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn manifest_diff_reports_shape_change() {
        let a = sample();
        let mut b = ParamStore::new();
        b.insert("a.w", Tensor::zeros(&[3, 2])).unwrap();
        b.insert("a.b", Tensor::zeros(&[3])).unwrap();
        let d = a.manifest_diff(&b);
        assert_eq!(d.len(), 1);
        assert!(d[0].contains("a.w"));
        assert!(a.manifest_diff(&a.clone()).is_empty());
    }
}
