use loopseg_core::io::{read_labels, rle, write_labels, split_dataset};
use loopseg_core::oracle::synthetic::{generate, SyntheticConfig};
use loopseg_core::oracle::SyntheticDataset;
use loopseg_core::types::{MaskInstance, Split};

fn small() -> SyntheticDataset {
    generate(&SyntheticConfig {
        n_images: 8,
        width: 48,
        height: 40,
        min_radius: 4.0,
        max_radius: 8.0,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn synthetic_dataset_survives_disk() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path(), true, 0).unwrap();
    assert!(dir.path().join("images/img0000.png").is_file());
    let back = SyntheticDataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    let again = std::fs::read(dir.path().join("manifest.json")).unwrap();
    ds.write(dir.path(), false, 0).unwrap();
    assert_eq!(std::fs::read(dir.path().join("manifest.json")).unwrap(), again);
}

#[test]
fn label_files_reproduce_truth_masks() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    for t in ds.truth.images.values() {
        let insts: Vec<MaskInstance> = t
            .instances
            .iter()
            .map(|h| MaskInstance::from_bitmap(t.record.id.clone(), h.class_id, h.mask.clone()))
            .collect();
        let path = dir.path().join(format!("{}.txt", t.record.id));
        write_labels(&path, &insts, &t.record).unwrap();
        let back = read_labels(&path, &t.record).unwrap();
        assert_eq!(back.len(), insts.len());
        for (b, h) in back.iter().zip(&t.instances) {
            assert_eq!(b.decode_for(&t.record).unwrap(), h.mask);
            let r = rle::encode(&h.mask);
            assert_eq!(rle::decode(&r).unwrap(), h.mask);
        }
    }
}

#[test]
fn resplitting_is_seeded() {
    let ds = small();
    let a = split_dataset(&ds.manifest, &[0.75, 0.25], 9).unwrap();
    let b = split_dataset(&ds.manifest, &[0.75, 0.25], 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.ids_in(Split::Train).len(), 6);
    assert_eq!(a.ids_in(Split::Val).len(), 2);
}
