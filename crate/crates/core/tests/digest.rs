mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::process::Command;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use txbox_core::snapshot::{compute_digest, EMPTY_TREE_DIGEST};

#[test]
fn empty_tree_known_answer() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(compute_digest(dir.path()).unwrap().value, EMPTY_TREE_DIGEST);
    assert_eq!(common::oracle_digest(dir.path()), EMPTY_TREE_DIGEST);
}

#[test]
fn single_file_known_answer() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a");
    fs::write(&f, "hi\n").unwrap();
    fs::set_permissions(&f, fs::Permissions::from_mode(0o644)).unwrap();
    // sha256("hi\n"), cross-checked with coreutils below.
    let content = "98ea6e4f216f2fb4b69fff9b3a44842c38686ca685f3f55dc48c5d3fb1107be4";
    let out = Command::new("sha256sum").arg(&f).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(content));
    let record = format!("F\0a\x000644\0{content}\n");
    let expected = hex::encode(Sha256::digest(record.as_bytes()));
    let d = compute_digest(dir.path()).unwrap();
    assert_eq!(d.value, expected);
    assert_eq!((d.file_count, d.total_bytes), (1, 3));
}

#[test]
fn content_hashes_agree_with_coreutils() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    common::random_tree(dir.path(), &mut rng, 30);
    let out = Command::new("sh")
        .arg("-c")
        .arg("find . -type f -print0 | sort -z | xargs -0 -r sha256sum")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let (hash, path) = line.split_once("  ").unwrap();
        let bytes = fs::read(dir.path().join(path)).unwrap();
        assert_eq!(hash, hex::encode(Sha256::digest(&bytes)), "{path}");
    }
}

#[test]
fn mtime_does_not_matter_but_mode_does() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    fs::write(&f, "x").unwrap();
    let before = compute_digest(dir.path()).unwrap();
    let t = std::time::SystemTime::UNIX_EPOCH + std::time::Duration::from_secs(1_000_000);
    fs::File::options().write(true).open(&f).unwrap().set_modified(t).unwrap();
    assert_eq!(compute_digest(dir.path()).unwrap(), before);
    fs::set_permissions(&f, fs::Permissions::from_mode(0o600)).unwrap();
    assert_ne!(compute_digest(dir.path()).unwrap(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn digest_matches_oracle(seed in any::<u64>(), entries in 0usize..40) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_tree(dir.path(), &mut rng, entries);
        prop_assert_eq!(compute_digest(dir.path()).unwrap().value, common::oracle_digest(dir.path()));
    }

    #[test]
    fn any_mutation_changes_the_digest(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_tree(dir.path(), &mut rng, 20);
        let before = compute_digest(dir.path()).unwrap();
        common::mutate(dir.path(), &mut rng, 1);
        let after = compute_digest(dir.path()).unwrap();
        prop_assert_eq!(&after.value, &common::oracle_digest(dir.path()));
        prop_assert_ne!(after, before);
    }
}
