mod common;

use cadgmm::checkpoint::{Container, DatasetCache, ModelCheckpoint};
use cadgmm::eval::score_dataset;
use cadgmm::trainer::train;
use cadgmm::Error;
use common::{synthetic_dataset, tiny_train, write_synthetic};

fn trained_checkpoint() -> (ModelCheckpoint, DatasetCache) {
    let cache = DatasetCache::from_dataset(synthetic_dataset(150, 15, 1), 2).unwrap();
    let train_idx = cache.dataset.train_normal_indices().unwrap();
    let cfg = tiny_train(10);
    let t = train(&cache.rows(&train_idx), &cfg).unwrap();
    let ckpt = ModelCheckpoint {
        config: cfg,
        params: t.model.params.clone(),
        gmm: t.gmm,
        preprocessor: Some(cache.preprocessor.clone()),
        dataset_fingerprint: Some(cache.fingerprint()),
        iteration: 10,
    };
    (ckpt, cache)
}

#[test]
fn model_checkpoint_round_trip_preserves_energies() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, cache) = trained_checkpoint();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);

    let (x, _) = cache.test_set().unwrap();
    let a = score_dataset(&ckpt.model().unwrap(), &ckpt.gmm, &x, 32).unwrap();
    let b = score_dataset(&back.model().unwrap(), &back.gmm, &x, 32).unwrap();
    assert_eq!(a, b);

    // saving again writes identical bytes
    let again = dir.path().join("m2.ckpt");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn dataset_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = write_synthetic(dir.path(), 80, 8, 3);
    let cache = DatasetCache::prepare(&recipe, 5).unwrap();
    let path = dir.path().join("toy.cache");
    let fp = cache.save(&path).unwrap();
    let (back, fp2) = DatasetCache::load(&path).unwrap();
    assert_eq!(fp, fp2);
    assert_eq!(back, cache);
    assert_eq!(back.test_set().unwrap(), cache.test_set().unwrap());

    assert_eq!(DatasetCache::prepare(&recipe, 5).unwrap().fingerprint(), fp);
    assert_ne!(DatasetCache::prepare(&recipe, 6).unwrap().fingerprint(), fp);
}

#[test]
fn corruption_is_detected() {
    let (ckpt, _) = trained_checkpoint();
    let bytes = ckpt.to_container().to_bytes();
    for pos in [bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        match Container::from_bytes(&bad) {
            Err(Error::FingerprintMismatch { .. }) => {}
            other => panic!("byte {pos}: unexpected {other:?}"),
        }
    }
    assert!(Container::from_bytes(&bytes[..bytes.len() - 10]).is_err());
    assert!(Container::from_bytes(b"not a container").is_err());
}

#[test]
fn wrong_kind_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, cache) = trained_checkpoint();
    let path = dir.path().join("x");
    cache.save(&path).unwrap();
    assert!(ModelCheckpoint::load(&path).is_err());
    ckpt.save(&path).unwrap();
    assert!(DatasetCache::load(&path).is_err());
}

#[test]
fn container_entries_round_trip() {
    let mut c = Container::new("misc");
    c.put_text("name", "μ-text");
    c.put_u64("count", u64::MAX);
    c.put_matrix("m", cadgmm::Matrix::new(2, 1, vec![-0.0, 1e-300]).unwrap());
    let back = Container::from_bytes(&c.to_bytes()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.u64("count").unwrap(), u64::MAX);
    assert!(back.text("count").is_err());
    assert!(back.matrix("missing").is_err());
    assert_eq!(back.fingerprint(), c.fingerprint());
}
