//! Helpers shared by integration tests: random trees and a digest oracle
//! written against the documented record format, independent of the crate's
//! scanner.

#![allow(dead_code)]

use std::fs;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the tree under `root`, built from a plain recursive walk.
pub fn oracle_digest(root: &Path) -> String {
    let mut records: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    walk(root, root, &mut records);
    records.sort();
    let mut all = Vec::new();
    for (_, r) in records {
        all.extend_from_slice(&r);
    }
    sha_hex(&all)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(Vec<u8>, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let rel = path.strip_prefix(root).unwrap().as_os_str().as_bytes().to_vec();
        let meta = fs::symlink_metadata(&path).unwrap();
        let (tag, hash) = if meta.file_type().is_symlink() {
            (b'L', sha_hex(fs::read_link(&path).unwrap().as_os_str().as_bytes()))
        } else if meta.is_dir() {
            walk(root, &path, out);
            (b'D', String::new())
        } else {
            (b'F', sha_hex(&fs::read(&path).unwrap()))
        };
        let mut rec = vec![tag, 0];
        rec.extend_from_slice(&rel);
        rec.push(0);
        rec.extend_from_slice(format!("{:04o}", meta.mode() & 0o7777).as_bytes());
        rec.push(0);
        rec.extend_from_slice(hash.as_bytes());
        rec.push(b'\n');
        out.push((rel, rec));
    }
}

const FILE_MODES: &[u32] = &[0o644, 0o644, 0o600, 0o755, 0o444, 0o700];
const DIR_MODES: &[u32] = &[0o755, 0o755, 0o700, 0o750];
const NAMES: &[&str] = &["a", "b", "src", "lib.rs", "data.bin", "x y", "UPPER", "dot.d", "é", "-dash"];

fn name(rng: &mut impl Rng, taken: &Path) -> PathBuf {
    loop {
        let base = NAMES.choose(rng).unwrap();
        let candidate = taken.join(format!("{base}{}", rng.gen_range(0..1000)));
        if fs::symlink_metadata(&candidate).is_err() {
            return candidate;
        }
    }
}

fn random_bytes(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let len = match rng.gen_range(0..10) {
        0 => 0,
        1..=7 => rng.gen_range(1..512),
        _ => rng.gen_range(512..=max.max(512)),
    };
    (0..len).map(|_| rng.gen()).collect()
}

/// Fills `root` (which must exist) with up to `entries` files, directories
/// and symlinks, some dangling, with assorted permission bits.
pub fn random_tree(root: &Path, rng: &mut impl Rng, entries: usize) {
    let mut dirs = vec![root.to_path_buf()];
    let mut files: Vec<PathBuf> = Vec::new();
    for _ in 0..entries {
        let parent = dirs.choose(rng).unwrap().clone();
        let path = name(rng, &parent);
        match rng.gen_range(0..10) {
            0..=5 => {
                fs::write(&path, random_bytes(rng, 64 * 1024)).unwrap();
                fs::set_permissions(&path, fs::Permissions::from_mode(*FILE_MODES.choose(rng).unwrap()))
                    .unwrap();
                files.push(path);
            }
            6..=7 => {
                fs::create_dir(&path).unwrap();
                dirs.push(path);
            }
            _ => {
                let target = match files.choose(rng) {
                    Some(f) if rng.gen_bool(0.7) => f.strip_prefix(root).unwrap().to_path_buf(),
                    _ => PathBuf::from(format!("missing-{}", rng.gen::<u16>())),
                };
                std::os::unix::fs::symlink(target, &path).unwrap();
            }
        }
    }
    for d in dirs.iter().skip(1) {
        fs::set_permissions(d, fs::Permissions::from_mode(*DIR_MODES.choose(rng).unwrap())).unwrap();
    }
}

fn entries_below(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let m = fs::symlink_metadata(&p).unwrap();
            if m.is_dir() {
                stack.push(p.clone());
            }
            out.push(p);
        }
    }
    out.sort();
    out
}

/// Applies `ops` random changes (edits, deletions, creations, chmods, type
/// swaps). Every change alters the digest.
pub fn mutate(root: &Path, rng: &mut impl Rng, ops: usize) {
    for _ in 0..ops {
        let existing = entries_below(root);
        let target = existing.choose(rng).cloned();
        let meta = target.as_ref().map(|t| fs::symlink_metadata(t).unwrap());
        match (rng.gen_range(0..6), target, meta) {
            (0, Some(t), Some(m)) if m.is_file() => {
                let mut bytes = fs::read(&t).unwrap();
                bytes.push(rng.gen());
                fs::write(&t, bytes).unwrap();
            }
            (1, Some(t), Some(m)) if !m.is_dir() => fs::remove_file(&t).unwrap(),
            (2, Some(t), Some(m)) if m.is_dir() => fs::remove_dir_all(&t).unwrap(),
            (3, Some(t), Some(m)) if !m.file_type().is_symlink() => {
                let mode = m.mode() & 0o7777;
                fs::set_permissions(&t, fs::Permissions::from_mode(mode ^ 0o010)).unwrap();
            }
            (4, Some(t), Some(m)) if m.is_file() => {
                fs::remove_file(&t).unwrap();
                std::os::unix::fs::symlink("replaced", &t).unwrap();
            }
            _ => {
                let dir = existing
                    .iter()
                    .filter(|p| fs::symlink_metadata(p).unwrap().is_dir())
                    .cloned()
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .cloned()
                    .unwrap_or_else(|| root.to_path_buf());
                let path = name(rng, &dir);
                if rng.gen_bool(0.5) {
                    fs::create_dir_all(path.join("nested")).unwrap();
                    fs::write(path.join("nested/new.txt"), b"new").unwrap();
                } else {
                    fs::write(&path, random_bytes(rng, 4096)).unwrap();
                }
            }
        }
    }
}
