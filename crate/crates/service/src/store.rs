use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use planerect::dataset::{load_manifest, write_manifest_atomic, AnnotationRecord};
use planerect::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub record: AnnotationRecord,
    pub version: u64,
}

pub type Snapshot = Arc<BTreeMap<String, Entry>>;

#[derive(Debug)]
pub enum PutError {
    Conflict { current: u64 },
    Io(Error),
}

/// Annotation records persisted as a manifest file.
///
/// Writers are serialized and every save rewrites the manifest atomically,
/// so a crash leaves either the old or the new file. Readers work on
/// immutable snapshots and never block on a save in progress.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    writer: Mutex<()>,
    current: RwLock<Snapshot>,
}

impl AnnotationStore {
    /// Opens `path`, treating a missing file as an empty store.
    pub fn open(path: &Path) -> planerect::Result<Self> {
        let records = if path.exists() { load_manifest(path)? } else { Vec::new() };
        let map = records.into_iter().map(|r| (r.image_id.clone(), Entry { record: r, version: 1 })).collect();
        Ok(Self { path: path.to_path_buf(), writer: Mutex::new(()), current: RwLock::new(Arc::new(map)) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Snapshot {
        Arc::clone(&self.current.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Inserts or replaces a record and returns its new version. With
    /// `expected`, the save only happens if the stored version still equals
    /// it (0 meaning "not stored yet").
    pub fn put(&self, record: AnnotationRecord, expected: Option<u64>) -> Result<u64, PutError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let current = next.get(&record.image_id).map_or(0, |e| e.version);
        if expected.is_some_and(|v| v != current) {
            return Err(PutError::Conflict { current });
        }
        let version = current + 1;
        next.insert(record.image_id.clone(), Entry { record, version });
        let records: Vec<AnnotationRecord> = next.values().map(|e| e.record.clone()).collect();
        write_manifest_atomic(&self.path, &records).map_err(PutError::Io)?;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(version)
    }
}
