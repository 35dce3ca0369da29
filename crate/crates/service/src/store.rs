//! Document persistence: one JSON document per (collection, id).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid document id {0:?}")]
    BadId(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("document {collection}/{id} is not valid JSON: {source}")]
    Corrupt { collection: String, id: String, source: serde_json::Error },
}

pub trait DocumentStore: Send + Sync {
    fn put(&self, collection: &str, id: &str, doc: &Value) -> Result<(), StoreError>;
    fn get(&self, collection: &str, id: &str) -> Result<Option<Value>, StoreError>;
}

impl dyn DocumentStore {
    pub fn put_typed<T: Serialize>(&self, collection: &str, id: &str, doc: &T) -> Result<(), StoreError> {
        self.put(collection, id, &serde_json::to_value(doc).expect("documents serialize"))
    }

    pub fn get_typed<T: DeserializeOwned>(&self, collection: &str, id: &str) -> Result<Option<T>, StoreError> {
        match self.get(collection, id)? {
            None => Ok(None),
            Some(v) => serde_json::from_value(v)
                .map(Some)
                .map_err(|source| StoreError::Corrupt { collection: collection.into(), id: id.into(), source }),
        }
    }
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

/// `root/<collection>/<id>.json`, written through a temporary file and a
/// rename so readers never see a partial document.
pub struct FsStore {
    root: PathBuf,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsStore { root: root.into() }
    }

    fn path(&self, collection: &str, id: &str) -> Result<PathBuf, StoreError> {
        check_id(collection)?;
        check_id(id)?;
        Ok(self.root.join(collection).join(format!("{id}.json")))
    }
}

impl DocumentStore for FsStore {
    fn put(&self, collection: &str, id: &str, doc: &Value) -> Result<(), StoreError> {
        let path = self.path(collection, id)?;
        let io = |source| StoreError::Io { path: path.display().to_string(), source };
        std::fs::create_dir_all(path.parent().expect("documents live in a collection dir")).map_err(io)?;
        let tmp = path.with_extension(format!("json.tmp-{}", uuid::Uuid::new_v4().simple()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(doc).expect("values serialize")).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }

    fn get(&self, collection: &str, id: &str) -> Result<Option<Value>, StoreError> {
        let path = self.path(collection, id)?;
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| StoreError::Corrupt { collection: collection.into(), id: id.into(), source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StoreError::Io { path: path.display().to_string(), source }),
        }
    }
}

#[derive(Default)]
pub struct MemoryStore {
    docs: Mutex<BTreeMap<(String, String), Value>>,
}

impl DocumentStore for MemoryStore {
    fn put(&self, collection: &str, id: &str, doc: &Value) -> Result<(), StoreError> {
        check_id(collection)?;
        check_id(id)?;
        self.docs.lock().unwrap().insert((collection.into(), id.into()), doc.clone());
        Ok(())
    }

    fn get(&self, collection: &str, id: &str) -> Result<Option<Value>, StoreError> {
        check_id(id)?;
        Ok(self.docs.lock().unwrap().get(&(collection.to_string(), id.to_string())).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn round_trip(store: &dyn DocumentStore) {
        assert_eq!(store.get("cases", "a").unwrap(), None);
        store.put("cases", "a", &json!({"x": 1})).unwrap();
        store.put("cases", "a", &json!({"x": 2})).unwrap();
        assert_eq!(store.get("cases", "a").unwrap(), Some(json!({"x": 2})));
        assert!(matches!(store.put("cases", "../escape", &json!(1)), Err(StoreError::BadId(_))));
        assert!(matches!(store.get("cases", ""), Err(StoreError::BadId(_))));
    }

    #[test]
    fn filesystem_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::new(dir.path());
        round_trip(&store);
        assert!(dir.path().join("cases/a.json").exists());
        let leftovers = std::fs::read_dir(dir.path().join("cases")).unwrap().count();
        assert_eq!(leftovers, 1);
        std::fs::write(dir.path().join("cases/bad.json"), "{").unwrap();
        assert!(matches!(store.get("cases", "bad"), Err(StoreError::Corrupt { .. })));
    }

    #[test]
    fn memory_store() {
        round_trip(&MemoryStore::default());
    }
}
