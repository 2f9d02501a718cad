//! Self-describing parameter container: JSON with a versioned header,
//! mapping parameter names to shape + data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumError;

pub const CONTAINER_FORMAT: &str = "slotgan-params";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct ParamContainer {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

impl ParamContainer {
    pub fn from_store(store: &ParamStore) -> Self {
        ParamContainer {
            format: CONTAINER_FORMAT.to_string(),
            version: CONTAINER_VERSION,
            params: store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    pub fn into_store(self) -> Result<ParamStore, NumError> {
        if self.format != CONTAINER_FORMAT {
            return Err(NumError::Invalid(format!(
                "unknown container format {:?}",
                self.format
            )));
        }
        if self.version != CONTAINER_VERSION {
            return Err(NumError::Invalid(format!(
                "unsupported container version {}",
                self.version
            )));
        }
        let mut store = ParamStore::new();
        for rec in self.params {
            let t = Tensor::new(rec.shape, rec.data)?;
            store.insert(&rec.name, t);
            if rec.frozen {
                store.set_frozen(&rec.name, true);
            }
        }
        Ok(store)
    }
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<(), NumError> {
    let container = ParamContainer::from_store(store);
    let text = serde_json::to_string(&container)
        .map_err(|e| NumError::Invalid(format!("serialize params: {}", e)))?;
    fs::write(path, text).map_err(|e| NumError::Invalid(format!("write {}: {}", path.display(), e)))
}

pub fn load_params(path: &Path) -> Result<ParamStore, NumError> {
    let text = fs::read_to_string(path)
        .map_err(|e| NumError::Invalid(format!("read {}: {}", path.display(), e)))?;
    let container: ParamContainer = serde_json::from_str(&text)
        .map_err(|e| NumError::Invalid(format!("parse {}: {}", path.display(), e)))?;
    container.into_store()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_exactly() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 2], vec![0.1, -2.5e-17, 3.0, f64::MIN_POSITIVE]).unwrap());
        store.insert("b", Tensor::from_vec(vec![1.0 / 3.0]));
        store.set_frozen("b", true);
        let dir = std::env::temp_dir().join("slotgan-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.json");
        save_params(&store, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.get("w").value, store.get("w").value);
        assert_eq!(loaded.get("b").value, store.get("b").value);
        assert!(loaded.get("b").frozen);
    }

    #[test]
    fn rejects_wrong_version() {
        let c = ParamContainer {
            format: CONTAINER_FORMAT.to_string(),
            version: 999,
            params: vec![],
        };
        assert!(c.into_store().is_err());
    }
}
