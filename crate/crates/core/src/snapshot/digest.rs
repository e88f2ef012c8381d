//! Workspace scanning and the canonical tree digest.
//!
//! The digest is SHA-256 over the concatenation of one record per entry
//! below the root (the root itself is excluded), sorted by the bytes of the
//! relative path:
//!
//! ```text
//! <kind> 0x00 <rel_path> 0x00 <mode> 0x00 <hash> 0x0A
//! ```
//!
//! * `kind` is one ASCII byte: `F` regular file, `D` directory, `L` symlink.
//! * `rel_path` uses `/` separators and has no leading `./`.
//! * `mode` is the permission bits (`st_mode & 0o7777`) as four octal digits.
//! * `hash` is lowercase hex SHA-256 of the file contents (`F`) or of the
//!   link target bytes (`L`), and empty for `D`.
//!
//! Timestamps, ownership and extended attributes are not part of the digest.
//! An empty tree therefore hashes to SHA-256 of the empty string.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SnapshotError;

/// SHA-256 of the empty string: the digest of an empty directory.
pub const EMPTY_TREE_DIGEST: &str =
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";

const COPY_BUF: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntryKind {
    File,
    Dir,
    Symlink,
}

impl EntryKind {
    fn tag(&self) -> u8 {
        match self {
            EntryKind::File => b'F',
            EntryKind::Dir => b'D',
            EntryKind::Symlink => b'L',
        }
    }
}

/// One entry of a snapshot manifest. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rel_path: String,
    pub kind: EntryKind,
    pub size_bytes: u64,
    /// Permission bits, `st_mode & 0o7777`.
    pub mode_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_target: Option<String>,
}

impl ManifestEntry {
    fn canonical_hash(&self) -> String {
        match self.kind {
            EntryKind::File => self.content_hash.clone().unwrap_or_default(),
            EntryKind::Symlink => {
                hex::encode(Sha256::digest(self.link_target.as_deref().unwrap_or("").as_bytes()))
            }
            EntryKind::Dir => String::new(),
        }
    }
}

/// Deterministic hash of a directory tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceDigest {
    pub value: String,
    /// Number of regular files.
    pub file_count: u64,
    /// Sum of regular file sizes.
    pub total_bytes: u64,
}

impl WorkspaceDigest {
    pub fn of_entries(entries: &[ManifestEntry]) -> Self {
        let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
        sorted.sort_by(|a, b| a.rel_path.as_bytes().cmp(b.rel_path.as_bytes()));
        let mut hasher = Sha256::new();
        let mut file_count = 0;
        let mut total_bytes = 0;
        for e in sorted {
            if e.kind == EntryKind::File {
                file_count += 1;
                total_bytes += e.size_bytes;
            }
            hasher.update([e.kind.tag(), 0]);
            hasher.update(e.rel_path.as_bytes());
            hasher.update([0]);
            hasher.update(format!("{:04o}", e.mode_bits & 0o7777).as_bytes());
            hasher.update([0]);
            hasher.update(e.canonical_hash().as_bytes());
            hasher.update([b'\n']);
        }
        WorkspaceDigest {
            value: hex::encode(hasher.finalize()),
            file_count,
            total_bytes,
        }
    }
}

/// Computes the digest of the tree under `root`.
pub fn compute_digest(root: &Path) -> Result<WorkspaceDigest, SnapshotError> {
    let entries = scan_tree(root, None)?;
    Ok(WorkspaceDigest::of_entries(&entries))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::io(path, source)
}

pub(crate) fn ensure_dir(root: &Path) -> Result<(), SnapshotError> {
    match fs::symlink_metadata(root) {
        Ok(m) if m.is_dir() => Ok(()),
        Ok(_) => Err(SnapshotError::RootNotFound(root.to_path_buf())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SnapshotError::RootNotFound(root.to_path_buf()))
        }
        Err(e) => Err(SnapshotError::io(root, e)),
    }
}

/// Walks `root`, hashing every file. When `copy_to` is set, the tree is
/// mirrored there in the same pass (files are read exactly once).
///
/// Returned entries are sorted by relative path, so parents precede children.
pub(crate) fn scan_tree(
    root: &Path,
    copy_to: Option<&Path>,
) -> Result<Vec<ManifestEntry>, SnapshotError> {
    ensure_dir(root)?;
    let mut entries = Vec::new();
    let mut stack: Vec<(PathBuf, String)> = vec![(root.to_path_buf(), String::new())];
    while let Some((dir, rel_dir)) = stack.pop() {
        let mut children: Vec<fs::DirEntry> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(&dir))?;
        children.sort_by_key(|c| c.file_name());
        for child in children {
            let path = child.path();
            let name = child.file_name();
            let name = name.to_str().ok_or_else(|| SnapshotError::UnsupportedEntry {
                path: path.clone(),
                reason: "file name is not valid UTF-8".into(),
            })?;
            let rel = if rel_dir.is_empty() {
                name.to_string()
            } else {
                format!("{rel_dir}/{name}")
            };
            let meta = fs::symlink_metadata(&path).map_err(io_err(&path))?;
            let mode_bits = meta.mode() & 0o7777;
            let ft = meta.file_type();
            let entry = if ft.is_dir() {
                if let Some(dest) = copy_to {
                    let target = dest.join(&rel);
                    fs::create_dir(&target).map_err(io_err(&target))?;
                }
                stack.push((path.clone(), rel.clone()));
                ManifestEntry {
                    rel_path: rel,
                    kind: EntryKind::Dir,
                    size_bytes: 0,
                    mode_bits,
                    content_hash: None,
                    link_target: None,
                }
            } else if ft.is_symlink() {
                let target = fs::read_link(&path).map_err(io_err(&path))?;
                let target = target
                    .to_str()
                    .ok_or_else(|| SnapshotError::UnsupportedEntry {
                        path: path.clone(),
                        reason: "symlink target is not valid UTF-8".into(),
                    })?
                    .to_string();
                if let Some(dest) = copy_to {
                    let link = dest.join(&rel);
                    std::os::unix::fs::symlink(&target, &link).map_err(io_err(&link))?;
                }
                ManifestEntry {
                    rel_path: rel,
                    kind: EntryKind::Symlink,
                    size_bytes: target.len() as u64,
                    mode_bits,
                    content_hash: None,
                    link_target: Some(target),
                }
            } else if ft.is_file() {
                let dest = copy_to.map(|d| d.join(&rel));
                let (hash, size) = hash_file(&path, dest.as_deref())?;
                if let Some(dest) = &dest {
                    fs::set_permissions(dest, fs::Permissions::from_mode(mode_bits))
                        .map_err(io_err(dest))?;
                }
                ManifestEntry {
                    rel_path: rel,
                    kind: EntryKind::File,
                    size_bytes: size,
                    mode_bits,
                    content_hash: Some(hash),
                    link_target: None,
                }
            } else {
                return Err(SnapshotError::UnsupportedEntry {
                    path,
                    reason: "special file (socket, FIFO or device)".into(),
                });
            };
            entries.push(entry);
        }
    }
    entries.sort_by(|a, b| a.rel_path.as_bytes().cmp(b.rel_path.as_bytes()));
    if let Some(dest) = copy_to {
        // Directory modes last, deepest first, so restrictive modes do not
        // block populating them.
        for e in entries.iter().rev().filter(|e| e.kind == EntryKind::Dir) {
            let p = dest.join(&e.rel_path);
            fs::set_permissions(&p, fs::Permissions::from_mode(e.mode_bits)).map_err(io_err(&p))?;
        }
    }
    Ok(entries)
}

fn hash_file(path: &Path, copy_to: Option<&Path>) -> Result<(String, u64), SnapshotError> {
    let mut src = File::open(path).map_err(io_err(path))?;
    let mut dst = match copy_to {
        Some(d) => Some(File::create(d).map_err(io_err(d))?),
        None => None,
    };
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; COPY_BUF];
    let mut size = 0u64;
    loop {
        let n = match src.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(SnapshotError::io(path, e)),
        };
        hasher.update(&buf[..n]);
        if let (Some(f), Some(d)) = (dst.as_mut(), copy_to) {
            f.write_all(&buf[..n]).map_err(io_err(d))?;
        }
        size += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), size))
}
