//! JSON checkpoints: a versioned header, a config echo and named parameters.
//!
//! Values are written with shortest round-trip formatting and parsed with
//! exact float parsing, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "mapkit-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint field `{field}`: {message}")]
    Field { field: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: BTreeMap<String, String>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    /// Captures every parameter whose name satisfies `select`.
    pub fn capture(store: &ParamStore, config: BTreeMap<String, String>, select: impl Fn(&str) -> bool) -> Self {
        let params = store
            .iter()
            .filter(|(_, p)| select(&p.name))
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != FORMAT {
            return Err(field_err("format", format!("expected `{FORMAT}`, found `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(field_err("version", format!("expected {VERSION}, found {}", ck.version)));
        }
        for p in &ck.params {
            let n: usize = p.shape.iter().product();
            if n != p.values.len() {
                return Err(field_err(
                    &p.name,
                    format!("shape {:?} needs {n} values, found {}", p.shape, p.values.len()),
                ));
            }
        }
        Ok(ck)
    }

    /// Requires every `expected` config key to match the stored echo.
    pub fn check_config(&self, expected: &BTreeMap<String, String>) -> Result<(), CheckpointError> {
        for (k, v) in expected {
            match self.config.get(k) {
                Some(found) if found == v => {}
                Some(found) => {
                    return Err(field_err(
                        &format!("config.{k}"),
                        format!("checkpoint has {found}, model expects {v}"),
                    ))
                }
                None => return Err(field_err(&format!("config.{k}"), "missing".into())),
            }
        }
        Ok(())
    }

    /// Copies stored values into same-named parameters. Every record must
    /// name an existing parameter of identical shape.
    pub fn apply(&self, store: &mut ParamStore) -> Result<usize, CheckpointError> {
        for rec in &self.params {
            let id = store
                .id(&rec.name)
                .map_err(|_| field_err(&rec.name, "no such parameter in model".into()))?;
            let p = store.get_mut(id);
            if p.value.shape() != rec.shape.as_slice() {
                return Err(field_err(
                    &rec.name,
                    format!("shape {:?} does not match model shape {:?}", rec.shape, p.value.shape()),
                ));
            }
            p.value = Tensor::new(rec.shape.clone(), rec.values.clone()).expect("validated on load");
        }
        Ok(self.params.len())
    }
}

fn field_err(field: &str, message: String) -> CheckpointError {
    CheckpointError::Field {
        field: field.to_string(),
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_exact_round_trip(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40)) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.add("p", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.json");
            Checkpoint::capture(&store, BTreeMap::new(), |_| true).save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let bits: Vec<u64> = back.params[0].values.iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let mut a = ParamStore::new();
        a.add("enc.w", Tensor::zeros(&[2, 3])).unwrap();
        let ck = Checkpoint::capture(&a, BTreeMap::new(), |_| true);
        let mut b = ParamStore::new();
        b.add("enc.w", Tensor::zeros(&[2, 4])).unwrap();
        let err = ck.apply(&mut b).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }

    #[test]
    fn config_mismatch_reported() {
        let mut cfg = BTreeMap::new();
        cfg.insert("hidden".to_string(), "64".to_string());
        let ck = Checkpoint::capture(&ParamStore::new(), cfg, |_| true);
        let mut want = BTreeMap::new();
        want.insert("hidden".to_string(), "32".to_string());
        assert!(ck.check_config(&want).unwrap_err().to_string().contains("config.hidden"));
    }
}
