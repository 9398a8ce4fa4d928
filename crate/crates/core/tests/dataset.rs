use fewt::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use fewt::dataset::{
    decode_episode, encode_episode, generate_toy_task, load_dataset, load_episode, save_dataset, save_episode, split_indices, Episode,
    ToyConfig, World, TIMESTEP,
};
use fewt::error::Error;
use fewt::policy::{Policy, PolicyConfig, Variant};
use fewt::tensor::Tensor;

fn toy(seed: u64, n: usize) -> Vec<Episode> {
    generate_toy_task(seed, n, &ToyConfig::default()).unwrap()
}

/// Top-view pixel maximizing `r − (g + b)/2`.
fn reddest(img: &Tensor, h: usize, w: usize) -> (usize, usize) {
    let d = img.data();
    let red: Vec<f64> = (0..h * w).map(|i| d[i] - 0.5 * (d[h * w + i] + d[2 * h * w + i])).collect();
    let i = Tensor::from_vec(red).argmax();
    (i / w, i % w)
}

#[test]
fn hundred_episode_files_round_trip_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, e) in toy(21, 100).iter().enumerate() {
        let path = dir.path().join(format!("{i}.fewt"));
        save_episode(e, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = load_episode(&path).unwrap();
        assert_eq!(&back, e);
        assert_eq!(encode_episode(&back).unwrap(), bytes);
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let eps = toy(3, 5);
    save_dataset(&eps, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), eps);
}

#[test]
fn header_claiming_more_records_is_truncated() {
    let cfg = ToyConfig { length: 10, k: 4, ..ToyConfig::default() };
    let mut e = generate_toy_task(0, 1, &cfg).unwrap().remove(0);
    let bytes = encode_episode(&e).unwrap();
    e.records.pop();
    let nine = encode_episode(&e).unwrap();
    let mut forged = nine.clone();
    forged[..14 + 4].copy_from_slice(&bytes[..14 + 4]);
    assert!(matches!(decode_episode(&forged), Err(Error::TruncatedPayload { .. })));
    assert_eq!(decode_episode(&nine).unwrap().len(), 9);
}

#[test]
fn corrupted_magic_is_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.fewt");
    save_episode(&toy(0, 1)[0], &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"FEWC");
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_episode(&path), Err(Error::BadMagic { .. })));
}

#[test]
fn generation_is_a_function_of_seed() {
    let (a, b, c) = (toy(5, 4), toy(5, 4), toy(6, 4));
    assert_eq!(a, b);
    assert_ne!(a, c);
    for e in &a {
        assert_eq!((e.len(), e.timestep), (64, TIMESTEP));
        assert!(e.len() >= e.k);
    }
}

#[test]
fn phases_change_at_thirds() {
    for e in toy(8, 10) {
        let mut w = World::new(e.height, e.width, e.scene);
        let mut attached_at = None;
        let mut moved_at = None;
        for (t, r) in e.records.iter().enumerate() {
            w.apply(r.action.data());
            if w.attached && attached_at.is_none() {
                attached_at = Some(t + 1);
            }
            if w.velocity != 0.0 && moved_at.is_none() {
                moved_at = Some(t + 1);
            }
        }
        let (a, m) = (attached_at.unwrap(), moved_at.unwrap());
        assert!(a > 64 / 3 && a <= 2 * 64 / 3, "grasp at {a}");
        assert_eq!(m, 2 * 64 / 3 + 1);
        assert!(w.delivered());
    }
}

#[test]
fn block_is_located_by_top_view_argmax() {
    for e in toy(13, 50) {
        let mut w = World::new(e.height, e.width, e.scene);
        for r in &e.records {
            let (row, col) = reddest(&r.obs.images[0], e.height, e.width);
            let (r0, c0, rh, cw) = w.block_box();
            assert!(row >= r0 && row < r0 + rh && col >= c0 && col < c0 + cw);
            w.apply(r.action.data());
        }
    }
}

#[test]
fn split_is_stable() {
    for n in 1..60 {
        assert_eq!(split_indices(n, 0.2), split_indices(n, 0.2));
        let (tr, va) = split_indices(n, 0.2);
        assert_eq!(tr.len() + va.len(), n);
        assert!(!tr.is_empty());
    }
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let dir = tempfile::tempdir().unwrap();
    let obs = toy(1, 1)[0].records[9].obs.clone();
    for v in Variant::ALL {
        let p = Policy::new(PolicyConfig::default().with_variant(v), 2).unwrap();
        let path = dir.path().join(format!("{v}.fewc"));
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert!(p.store.iter().zip(q.store.iter()).all(|(a, b)| a == b));
        assert_eq!(p.infer(&obs).unwrap(), q.infer(&obs).unwrap());
        save_checkpoint(&q, &dir.path().join("again.fewc")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.fewc")).unwrap());
    }
}

#[test]
fn checkpoint_rejects_other_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.fewc");
    save_checkpoint(&Policy::new(PolicyConfig::default(), 0).unwrap(), &path).unwrap();
    let other = PolicyConfig { d_model: 32, ..PolicyConfig::default() };
    assert!(matches!(load_checkpoint_for(&other, &path), Err(Error::IncompatibleArchitecture { .. })));
}
