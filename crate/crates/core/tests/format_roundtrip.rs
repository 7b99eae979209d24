use std::fs;

use hybridq::fixtures::random_package;
use hybridq::package::{BLOB_FILE, MANIFEST_FILE};
use hybridq::ModelPackage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn save_load_save_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let pkg = random_package(&mut rng, 50);
        let (a, b) = (
            dir.path().join(format!("a{i}")),
            dir.path().join(format!("b{i}")),
        );
        pkg.save(&a).unwrap();
        let loaded = ModelPackage::load(&a).unwrap();
        assert_eq!(loaded, pkg);
        loaded.save(&b).unwrap();
        assert_eq!(
            fs::read(a.join(MANIFEST_FILE)).unwrap(),
            fs::read(b.join(MANIFEST_FILE)).unwrap()
        );
        assert_eq!(
            fs::read(a.join(BLOB_FILE)).unwrap(),
            fs::read(b.join(BLOB_FILE)).unwrap()
        );
    }
}

#[test]
fn fifty_node_tree_payloads_survive() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let pkg = loop {
        let p = random_package(&mut rng, 50);
        let tensors: usize = p.root().walk().iter().map(|(_, n)| n.tensors.len()).sum();
        if p.node_count() >= 30 && tensors >= 10 {
            break p;
        }
    };
    let dir = tempfile::tempdir().unwrap();
    pkg.save(dir.path()).unwrap();
    let back = ModelPackage::load(dir.path()).unwrap();
    for ((pa, na), (pb, nb)) in pkg.root().walk().iter().zip(back.root().walk().iter()) {
        assert_eq!(pa, pb);
        for (slot, ra) in &na.tensors {
            let rb = &nb.tensors[slot];
            let bytes = |p: &ModelPackage, r: &hybridq::TensorRecord| {
                p.blob()[r.offset as usize..(r.offset + r.nbytes) as usize].to_vec()
            };
            assert_eq!(bytes(&pkg, ra), bytes(&back, rb));
        }
    }
}

#[test]
fn loader_rejects_unknown_manifest_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pkg = random_package(&mut rng, 5);
    let dir = tempfile::tempdir().unwrap();
    pkg.save(dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    v["root"]["surprise"] = true.into();
    fs::write(&path, v.to_string()).unwrap();
    assert_eq!(
        ModelPackage::load(dir.path()).unwrap_err().code(),
        "malformed_json"
    );
}
