//! Versioned JSON container of named tensors shared by every trainable model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;

pub const FORMAT: &str = "coea-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    /// Model hyper-parameters needed to rebuild the tensors' owner.
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(
        kind: &str,
        meta: BTreeMap<String, serde_json::Value>,
        params: &impl Params,
    ) -> Self {
        let mut tensors = Vec::new();
        params.visit(&mut |name, shape, data| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    /// Copies tensors into `params`, which must already have the configured
    /// shapes. Every tensor must be present with a matching shape.
    pub fn load_into(&self, params: &mut impl Params) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let by_name: BTreeMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        let mut seen = 0;
        params.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match by_name.get(name) {
                None => err = Some(format!("tensor {name} missing")),
                Some(t) if t.shape != shape => {
                    err = Some(format!(
                        "tensor {name} has shape {:?}, configuration expects {:?}",
                        t.shape, shape
                    ))
                }
                Some(t) if t.data.len() != data.len() => {
                    err = Some(format!("tensor {name} has wrong element count"))
                }
                Some(t) => {
                    data.copy_from_slice(&t.data);
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if seen != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("meta key {key} missing")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint(format!("meta key {key} missing")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{visit1, visit1_mut};
    use ndarray::Array1;

    #[derive(Clone)]
    struct Vec1(Array1<f64>);

    impl Params for Vec1 {
        fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            visit1(f, "v", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            visit1_mut(f, "v", &mut self.0);
        }
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let p = Vec1(Array1::from(vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]));
        let ck = Checkpoint::from_params("test", BTreeMap::new(), &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let mut q = Vec1(Array1::zeros(4));
        Checkpoint::load(&path).unwrap().load_into(&mut q).unwrap();
        assert_eq!(p.to_flat(), q.to_flat());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Vec1(Array1::zeros(3));
        let ck = Checkpoint::from_params("test", BTreeMap::new(), &p);
        let mut q = Vec1(Array1::zeros(4));
        assert!(matches!(ck.load_into(&mut q), Err(Error::Checkpoint(_))));
    }
}
