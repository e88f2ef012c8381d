//! Deterministic synthetic project trees.

use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BenchError;

const DIR_NAMES: &[&str] = &[
    "src", "lib", "tests", "docs", "utils", "core", "models", "api", "data", "scripts", "vendor",
    "migrations",
];
const EXTENSIONS: &[&str] = &["py", "py", "py", "txt", "json", "md", "cfg", "pyi", "csv"];
const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz_ =()\n:.0123456789";

/// Writes `file_count` files totalling exactly `size_bytes` under `root`.
///
/// `root` must be missing or empty. Directory depth varies from zero to four
/// levels and file sizes follow a heavy-tailed spread. The same arguments
/// always produce the same tree, byte for byte.
pub fn generate_workspace(
    root: &Path,
    size_bytes: u64,
    file_count: usize,
    seed: u64,
) -> Result<PathBuf, BenchError> {
    if size_bytes == 0 || file_count == 0 {
        return Err(BenchError::InvalidArgument(
            "size_bytes and file_count must be positive".into(),
        ));
    }
    let io = |source| BenchError::Io {
        path: root.to_path_buf(),
        source,
    };
    if root.exists() && fs::read_dir(root).map_err(io)?.next().is_some() {
        return Err(BenchError::Fixture(format!("{} is not empty", root.display())));
    }
    fs::create_dir_all(root).map_err(io)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = plan_dirs(&mut rng, file_count);
    let sizes = plan_sizes(&mut rng, size_bytes, file_count);

    let mut buf = vec![0u8; 1 << 20];
    for (i, size) in sizes.into_iter().enumerate() {
        let dir = &dirs[rng.gen_range(0..dirs.len())];
        let ext = EXTENSIONS[rng.gen_range(0..EXTENSIONS.len())];
        let rel = dir.join(format!("module_{i:05}.{ext}"));
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
        let mut file = fs::File::create(&path).map_err(|source| BenchError::Io {
            path: path.clone(),
            source,
        })?;
        let mut left = size;
        while left > 0 {
            let n = left.min(buf.len() as u64) as usize;
            rng.fill_bytes(&mut buf[..n]);
            for b in &mut buf[..n] {
                *b = ALPHABET[*b as usize % ALPHABET.len()];
            }
            file.write_all(&buf[..n]).map_err(|source| BenchError::Io {
                path: path.clone(),
                source,
            })?;
            left -= n as u64;
        }
        let mode = if rng.gen_ratio(1, 10) { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io)?;
    }
    Ok(root.to_path_buf())
}

/// Relative directories files may land in, root included.
fn plan_dirs(rng: &mut ChaCha8Rng, file_count: usize) -> Vec<PathBuf> {
    let wanted = (file_count / 8).clamp(1, 400);
    let mut dirs = vec![PathBuf::new()];
    while dirs.len() < wanted + 1 {
        let parent = dirs[rng.gen_range(0..dirs.len())].clone();
        if parent.components().count() >= 4 {
            continue;
        }
        let name = DIR_NAMES[rng.gen_range(0..DIR_NAMES.len())];
        let child = parent.join(format!("{name}_{}", dirs.len()));
        dirs.push(child);
    }
    dirs
}

/// Heavy-tailed sizes that sum to exactly `total`.
fn plan_sizes(rng: &mut ChaCha8Rng, total: u64, count: usize) -> Vec<u64> {
    let weights: Vec<f64> = (0..count)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..1.0);
            (u * 5.0).exp()
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    let mut sizes: Vec<u64> = weights
        .iter()
        .map(|w| ((w / sum) * total as f64).floor() as u64)
        .collect();
    let assigned: u64 = sizes.iter().sum();
    let mut rest = total - assigned;
    let mut i = 0;
    while rest > 0 {
        sizes[i % count] += 1;
        rest -= 1;
        i += 1;
    }
    sizes
}
