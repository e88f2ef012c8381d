mod common;

use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use txbox_core::snapshot::{compute_digest, discard_snapshot, restore_snapshot, take_snapshot, Snapshot};

fn residue(store: &std::path::Path) -> usize {
    match fs::read_dir(store) {
        Ok(it) => it.count(),
        Err(_) => 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn restore_reproduces_the_tree(seed in any::<u64>(), entries in 0usize..40, ops in 1usize..6) {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ws");
        let store = tmp.path().join("store");
        fs::create_dir(&root).unwrap();
        fs::create_dir(&store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_tree(&root, &mut rng, entries);
        let before = common::oracle_digest(&root);

        let snap = take_snapshot(&root, &store).unwrap();
        prop_assert_eq!(&snap.pre_digest.value, &before);
        common::mutate(&root, &mut rng, ops);
        let report = restore_snapshot(&snap).unwrap();
        prop_assert!(report.verified);
        prop_assert_eq!(common::oracle_digest(&root), before.clone());
        prop_assert_eq!(&report.restored_digest.value, &before);

        // Restoring is repeatable from the same snapshot.
        common::mutate(&root, &mut rng, 1);
        restore_snapshot(&snap).unwrap();
        prop_assert_eq!(common::oracle_digest(&root), before);

        discard_snapshot(&snap).unwrap();
        prop_assert_eq!(residue(&store), 0);
    }
}

#[test]
fn snapshot_survives_reload_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    let store = tmp.path().join("store");
    fs::create_dir(&root).unwrap();
    fs::create_dir(&store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    common::random_tree(&root, &mut rng, 25);
    let before = compute_digest(&root).unwrap();
    let snap = take_snapshot(&root, &store).unwrap();
    let reloaded = Snapshot::load(&snap.storage_path).unwrap();
    assert_eq!(reloaded.manifest, snap.manifest);
    fs::remove_dir_all(&root).unwrap();
    fs::create_dir(&root).unwrap();
    restore_snapshot(&reloaded).unwrap();
    assert_eq!(compute_digest(&root).unwrap(), before);
}

#[test]
fn snapshot_store_is_never_inside_the_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    fs::create_dir(&root).unwrap();
    fs::write(root.join("f"), "x").unwrap();
    let store = tmp.path().join("store");
    fs::create_dir(&store).unwrap();
    let a = take_snapshot(&root, &store).unwrap();
    let b = take_snapshot(&root, &store).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(a.pre_digest, b.pre_digest);
    discard_snapshot(&a).unwrap();
    discard_snapshot(&a).unwrap();
    discard_snapshot(&b).unwrap();
    assert_eq!(residue(&store), 0);
}
