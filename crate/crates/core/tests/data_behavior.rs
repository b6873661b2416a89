//! Synthetic dataset generation and on-disk format behavior.

use std::fs;

use neco_core::data::{
    generate_scene, read_dataset, write_dataset, DatasetManifest, Split, FORMAT_MAGIC,
};

#[test]
fn dataset_round_trips_bitwise_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::new(Split::Val, 10, 2024);
    let path = write_dataset(dir.path(), &manifest).unwrap();
    assert!(path.ends_with("val.bin"));

    let (read_manifest, scenes) = read_dataset(&path).unwrap();
    assert_eq!(read_manifest, manifest);
    assert_eq!(scenes.len(), 10);
    for (index, scene) in scenes.iter().enumerate() {
        let fresh = generate_scene(&manifest, index).unwrap();
        assert_eq!(scene.image, fresh.image, "scene {index} image drifted");
        assert_eq!(scene.mask, fresh.mask, "scene {index} mask drifted");
    }

    // Writing again produces identical bytes.
    let dir2 = tempfile::tempdir().unwrap();
    let path2 = write_dataset(dir2.path(), &manifest).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
}

#[test]
fn corrupted_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::new(Split::Train, 2, 5);
    let path = write_dataset(dir.path(), &manifest).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let needle = FORMAT_MAGIC.as_bytes();
    let pos = bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .unwrap();
    bytes[pos] = b'x';
    fs::write(&path, &bytes).unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("magic"), "got: {err}");
}

#[test]
fn truncated_body_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = DatasetManifest::new(Split::Train, 3, 6);
    let path = write_dataset(dir.path(), &manifest).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(read_dataset(&path).is_err());
}

#[test]
fn every_shape_class_appears_in_at_least_five_percent_of_scenes() {
    let manifest = DatasetManifest::new(Split::Train, 500, 31337);
    let mut present = [0usize; 4];
    for index in 0..manifest.num_scenes {
        let scene = generate_scene(&manifest, index).unwrap();
        let mut seen = [false; 4];
        for &l in &scene.mask {
            seen[l as usize] = true;
        }
        for (slot, hit) in present.iter_mut().zip(seen) {
            if hit {
                *slot += 1;
            }
        }
    }
    for class in 1..4 {
        let share = present[class] as f64 / manifest.num_scenes as f64;
        assert!(share >= 0.05, "class {class} appears in {share:.3} of scenes");
    }
}

#[test]
fn train_and_val_scenes_differ_under_the_same_master_seed() {
    let train = DatasetManifest::new(Split::Train, 4, 99);
    let val = DatasetManifest::new(Split::Val, 4, 99);
    for index in 0..4 {
        let a = generate_scene(&train, index).unwrap();
        let b = generate_scene(&val, index).unwrap();
        assert_ne!(a.image, b.image, "scene {index} identical across splits");
    }
}

/// Patch-level appearance must carry class identity: mean per-channel color
/// of foreground pixels should separate class 2 from the warm classes, and
/// the warm pair should stay close in color (texture tells them apart).
#[test]
fn class_appearance_is_locally_informative() {
    let manifest = DatasetManifest::new(Split::Train, 200, 7001);
    let mut sums = [[0.0f64; 3]; 4];
    let mut counts = [0usize; 4];
    for index in 0..manifest.num_scenes {
        let scene = generate_scene(&manifest, index).unwrap();
        let (_, h, w) = scene.image.dims();
        for y in 0..h {
            for x in 0..w {
                let l = scene.mask[y * w + x] as usize;
                for (c, slot) in sums[l].iter_mut().enumerate() {
                    *slot += scene.image.at(c, y, x);
                }
                counts[l] += 1;
            }
        }
    }
    let mean = |c: usize| -> [f64; 3] {
        let n = counts[c] as f64;
        [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n]
    };
    let dist = |a: [f64; 3], b: [f64; 3]| -> f64 {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (m1, m2, m3) = (mean(1), mean(2), mean(3));
    assert!(dist(m1, m2) > 0.3, "classes 1 and 2 too similar in color");
    assert!(dist(m3, m2) > 0.3, "classes 3 and 2 too similar in color");
    assert!(
        dist(m1, m3) < 0.15,
        "warm classes drifted apart in color: {}",
        dist(m1, m3)
    );
}
