//! Restore points for a workspace directory.
//!
//! A snapshot lives in its own directory below a store directory that must be
//! outside the workspace:
//!
//! ```text
//! <store_dir>/<snapshot_id>/data/...        full copy of the tree
//! <store_dir>/<snapshot_id>/manifest        one JSON ManifestEntry per line
//! <store_dir>/<snapshot_id>/snapshot.json   id, source root, creation time, digest
//! ```
//!
//! Manifest lines carry the fields `rel_path`, `kind`, `size_bytes`,
//! `mode_bits`, `content_hash` (files) and `link_target` (symlinks), in that
//! order. `snapshot.json` is written last and marks the snapshot complete.

mod digest;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use digest::{compute_digest, EntryKind, ManifestEntry, WorkspaceDigest, EMPTY_TREE_DIGEST};

const DATA_DIR: &str = "data";
const MANIFEST_FILE: &str = "manifest";
const META_FILE: &str = "snapshot.json";

/// Restore attempts before giving up (the first try plus one retry).
pub const RESTORE_ATTEMPTS: u32 = 2;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("ROOT_NOT_FOUND: {0} is not an existing directory")]
    RootNotFound(PathBuf),
    #[error("STORE_INSIDE_ROOT: snapshot store {store} is inside workspace {root}")]
    StoreInsideRoot { store: PathBuf, root: PathBuf },
    #[error("INSUFFICIENT_SPACE: no space left while writing {0}")]
    InsufficientSpace(PathBuf),
    #[error("SNAPSHOT_MISSING: snapshot {id} not found at {path}")]
    SnapshotMissing { id: String, path: PathBuf },
    #[error("RESTORE_VERIFY_FAILED: snapshot {id} restored to {actual} instead of {expected} after {attempts} attempts")]
    RestoreVerifyFailed {
        id: String,
        expected: String,
        actual: String,
        attempts: u32,
    },
    #[error("IO_ERROR: unsupported entry {path}: {reason}")]
    UnsupportedEntry { path: PathBuf, reason: String },
    #[error("IO_ERROR: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SnapshotError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.raw_os_error() == Some(libc::ENOSPC) {
            SnapshotError::InsufficientSpace(path.to_path_buf())
        } else {
            SnapshotError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            SnapshotError::RootNotFound(_) => "ROOT_NOT_FOUND",
            SnapshotError::StoreInsideRoot { .. } => "STORE_INSIDE_ROOT",
            SnapshotError::InsufficientSpace(_) => "INSUFFICIENT_SPACE",
            SnapshotError::SnapshotMissing { .. } => "SNAPSHOT_MISSING",
            SnapshotError::RestoreVerifyFailed { .. } => "RESTORE_VERIFY_FAILED",
            SnapshotError::UnsupportedEntry { .. } | SnapshotError::Io { .. } => "IO_ERROR",
        }
    }
}

/// A restore point. Immutable once created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub source_root: PathBuf,
    pub storage_path: PathBuf,
    pub created_at: DateTime<Utc>,
    #[serde(skip)]
    pub manifest: Vec<ManifestEntry>,
    pub pre_digest: WorkspaceDigest,
}

impl Snapshot {
    pub fn data_path(&self) -> PathBuf {
        self.storage_path.join(DATA_DIR)
    }

    /// Loads a snapshot written by [`CopyBackend`] from its storage directory.
    pub fn load(storage_path: &Path) -> Result<Snapshot, SnapshotError> {
        let meta_path = storage_path.join(META_FILE);
        let meta = fs::read(&meta_path).map_err(|e| missing_or_io(storage_path, &meta_path, e))?;
        let mut snap: Snapshot = serde_json::from_slice(&meta).map_err(|e| SnapshotError::Io {
            path: meta_path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        let manifest_path = storage_path.join(MANIFEST_FILE);
        let file = fs::File::open(&manifest_path)
            .map_err(|e| missing_or_io(storage_path, &manifest_path, e))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| SnapshotError::io(&manifest_path, e))?;
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| SnapshotError::Io {
                path: manifest_path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })?;
            snap.manifest.push(entry);
        }
        snap.storage_path = storage_path.to_path_buf();
        Ok(snap)
    }
}

fn missing_or_io(storage: &Path, path: &Path, e: std::io::Error) -> SnapshotError {
    if e.kind() == std::io::ErrorKind::NotFound {
        SnapshotError::SnapshotMissing {
            id: storage
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path: storage.to_path_buf(),
        }
    } else {
        SnapshotError::io(path, e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub snapshot_id: String,
    pub restored_digest: WorkspaceDigest,
    pub verified: bool,
    pub attempts: u32,
}

/// Storage strategy for restore points.
///
/// Only the full-copy backend exists today; a copy-on-write filesystem
/// backend would implement the same three operations.
pub trait SnapshotBackend: Send + Sync {
    fn take(&self, root: &Path, store_dir: &Path) -> Result<Snapshot, SnapshotError>;
    fn restore(&self, snap: &Snapshot) -> Result<RestoreReport, SnapshotError>;
    fn discard(&self, snap: &Snapshot) -> Result<(), SnapshotError>;
}

/// Full recursive copy with a content manifest.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyBackend;

/// Filesystem-safe snapshot id: UTC timestamp plus a random suffix.
pub fn new_snapshot_id() -> String {
    format!(
        "{}-{:08x}",
        Utc::now().format("%Y%m%dT%H%M%S%.6fZ"),
        rand::random::<u32>()
    )
}

impl SnapshotBackend for CopyBackend {
    fn take(&self, root: &Path, store_dir: &Path) -> Result<Snapshot, SnapshotError> {
        digest::ensure_dir(root)?;
        let root = root.canonicalize().map_err(|e| SnapshotError::io(root, e))?;
        let store = store_dir
            .canonicalize()
            .map_err(|e| SnapshotError::io(store_dir, e))?;
        if !store.is_dir() {
            return Err(SnapshotError::io(
                &store,
                std::io::Error::new(std::io::ErrorKind::NotADirectory, "store is not a directory"),
            ));
        }
        if store.starts_with(&root) {
            return Err(SnapshotError::StoreInsideRoot { store, root });
        }

        let id = new_snapshot_id();
        let storage_path = store.join(&id);
        fs::create_dir(&storage_path).map_err(|e| SnapshotError::io(&storage_path, e))?;
        let created_at = Utc::now();
        let result = (|| {
            let data = storage_path.join(DATA_DIR);
            fs::create_dir(&data).map_err(|e| SnapshotError::io(&data, e))?;
            let manifest = digest::scan_tree(&root, Some(&data))?;
            let pre_digest = WorkspaceDigest::of_entries(&manifest);
            let snap = Snapshot {
                id: id.clone(),
                source_root: root.clone(),
                storage_path: storage_path.clone(),
                created_at,
                manifest,
                pre_digest,
            };
            write_manifest(&snap)?;
            Ok(snap)
        })();
        if result.is_err() {
            let _ = force_remove_dir_all(&storage_path);
        }
        result
    }

    fn restore(&self, snap: &Snapshot) -> Result<RestoreReport, SnapshotError> {
        let data = snap.data_path();
        if !data.is_dir() || !snap.storage_path.join(META_FILE).is_file() {
            return Err(SnapshotError::SnapshotMissing {
                id: snap.id.clone(),
                path: snap.storage_path.clone(),
            });
        }
        let mut last_err = None;
        for attempt in 1..=RESTORE_ATTEMPTS {
            match restore_once(snap, &data) {
                Ok(digest) if digest.value == snap.pre_digest.value => {
                    return Ok(RestoreReport {
                        snapshot_id: snap.id.clone(),
                        restored_digest: digest,
                        verified: true,
                        attempts: attempt,
                    })
                }
                Ok(digest) => {
                    log::warn!(
                        "restore of {} attempt {attempt} produced digest {} (expected {})",
                        snap.id,
                        digest.value,
                        snap.pre_digest.value
                    );
                    last_err = Some(SnapshotError::RestoreVerifyFailed {
                        id: snap.id.clone(),
                        expected: snap.pre_digest.value.clone(),
                        actual: digest.value,
                        attempts: attempt,
                    });
                }
                Err(e) => {
                    log::warn!("restore of {} attempt {attempt} failed: {e}", snap.id);
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn discard(&self, snap: &Snapshot) -> Result<(), SnapshotError> {
        match fs::symlink_metadata(&snap.storage_path) {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(SnapshotError::io(&snap.storage_path, e)),
            Ok(_) => force_remove_dir_all(&snap.storage_path)
                .map_err(|e| SnapshotError::io(&snap.storage_path, e)),
        }
    }
}

fn write_manifest(snap: &Snapshot) -> Result<(), SnapshotError> {
    let path = snap.storage_path.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| SnapshotError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for entry in &snap.manifest {
        serde_json::to_writer(&mut w, entry).map_err(|e| SnapshotError::io(&path, e.into()))?;
        w.write_all(b"\n").map_err(|e| SnapshotError::io(&path, e))?;
    }
    w.flush().map_err(|e| SnapshotError::io(&path, e))?;

    let meta = snap.storage_path.join(META_FILE);
    let body = serde_json::to_vec_pretty(snap).map_err(|e| SnapshotError::io(&meta, e.into()))?;
    fs::write(&meta, body).map_err(|e| SnapshotError::io(&meta, e))
}

/// Clears the root and repopulates it from the snapshot data, then digests it.
fn restore_once(snap: &Snapshot, data: &Path) -> Result<WorkspaceDigest, SnapshotError> {
    let root = &snap.source_root;
    digest::ensure_dir(root)?;
    clear_dir(root)?;
    for entry in &snap.manifest {
        let src = data.join(&entry.rel_path);
        let dst = root.join(&entry.rel_path);
        match entry.kind {
            EntryKind::Dir => fs::create_dir(&dst).map_err(|e| SnapshotError::io(&dst, e))?,
            EntryKind::Symlink => {
                let target = entry.link_target.as_deref().unwrap_or_default();
                std::os::unix::fs::symlink(target, &dst).map_err(|e| SnapshotError::io(&dst, e))?
            }
            EntryKind::File => {
                fs::copy(&src, &dst).map_err(|e| SnapshotError::io(&src, e))?;
                fs::set_permissions(&dst, fs::Permissions::from_mode(entry.mode_bits))
                    .map_err(|e| SnapshotError::io(&dst, e))?;
            }
        }
    }
    for entry in snap.manifest.iter().rev().filter(|e| e.kind == EntryKind::Dir) {
        let dst = root.join(&entry.rel_path);
        fs::set_permissions(&dst, fs::Permissions::from_mode(entry.mode_bits))
            .map_err(|e| SnapshotError::io(&dst, e))?;
    }
    compute_digest(root)
}

/// Removes everything inside `dir`, leaving `dir` itself in place.
fn clear_dir(dir: &Path) -> Result<(), SnapshotError> {
    let entries = fs::read_dir(dir).map_err(|e| SnapshotError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| SnapshotError::io(dir, e))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(|e| SnapshotError::io(&path, e))?;
        if ft.is_dir() {
            force_remove_dir_all(&path).map_err(|e| SnapshotError::io(&path, e))?;
        } else {
            fs::remove_file(&path).map_err(|e| SnapshotError::io(&path, e))?;
        }
    }
    Ok(())
}

/// `remove_dir_all` that first grants the owner rwx on directories whose
/// mode would otherwise prevent deleting their contents.
pub(crate) fn force_remove_dir_all(path: &Path) -> std::io::Result<()> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() == std::io::ErrorKind::PermissionDenied => {
            make_dirs_writable(path)?;
            fs::remove_dir_all(path)
        }
        other => other,
    }
}

fn make_dirs_writable(path: &Path) -> std::io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if !meta.is_dir() {
        return Ok(());
    }
    let mode = meta.permissions().mode();
    if mode & 0o700 != 0o700 {
        fs::set_permissions(path, fs::Permissions::from_mode(mode | 0o700))?;
    }
    for entry in fs::read_dir(path)? {
        make_dirs_writable(&entry?.path())?;
    }
    Ok(())
}

/// Creates a restore point of `root` under `store_dir` with the copy backend.
/// `store_dir` must already exist and lie outside `root`.
pub fn take_snapshot(root: &Path, store_dir: &Path) -> Result<Snapshot, SnapshotError> {
    CopyBackend.take(root, store_dir)
}

/// Restores the snapshot's source root and verifies it by digest.
pub fn restore_snapshot(snap: &Snapshot) -> Result<RestoreReport, SnapshotError> {
    CopyBackend.restore(snap)
}

/// Deletes the snapshot's storage. Discarding twice is a no-op.
pub fn discard_snapshot(snap: &Snapshot) -> Result<(), SnapshotError> {
    CopyBackend.discard(snap)
}
