use std::sync::Arc;

use proptest::prelude::*;
use rstca_core::data::{
    augment, batch_rng, bilinear_demosaic, list_images, load_dir, load_rgb, mosaic_rggb, quantize8, sample_patches,
    save_png, synthetic_image, AugmentationSpec, BatchStream, ImageSample, Rotation,
};
use rstca_core::Tensor;

fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn sample(h: usize, w: usize, seed: u64) -> ImageSample {
    ImageSample::from_rgb(synthetic_image(h, w, seed), format!("synthetic-{seed}")).unwrap()
}

/// R channel holds the row, G the column, B zero.
fn coordinate_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        match c {
            0 => y as f32,
            1 => x as f32,
            _ => 0.0,
        }
    })
}

#[test]
fn gray_image_gives_constant_mosaic() {
    let m = mosaic_rggb(&Tensor::full([3, 4, 6], 0.3)).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.3));
}

#[test]
fn red_image_samples_only_red_sites() {
    let rgb = Tensor::from_fn([3, 4, 4], |i| if i < 16 { 1.0 } else { 0.0 });
    let m = mosaic_rggb(&rgb).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let expect = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(m.data()[y * 4 + x], expect);
        }
    }
}

#[test]
fn two_by_two_mosaic() {
    let rgb = t(&[3, 2, 2], vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3]);
    assert_eq!(mosaic_rggb(&rgb).unwrap().data(), &[0.1, 0.2, 0.2, 0.3]);
    assert!(mosaic_rggb(&Tensor::zeros([3, 3, 4])).is_err());
}

#[test]
fn sample_crops_odd_images() {
    let s = ImageSample::from_rgb(synthetic_image(7, 9, 1), "odd").unwrap();
    assert_eq!((s.height(), s.width()), (6, 8));
    assert_eq!(s.mosaic, mosaic_rggb(&s.rgb).unwrap());
}

#[test]
fn augmentation_identities() {
    let s = sample(6, 8, 2);
    assert_eq!(augment(&s, AugmentationSpec::default()).unwrap(), s);
    let flip = AugmentationSpec { rotation: Rotation::R0, hflip: true };
    assert_eq!(augment(&augment(&s, flip).unwrap(), flip).unwrap(), s);
    let r90 = AugmentationSpec { rotation: Rotation::R90, hflip: false };
    let r270 = AugmentationSpec { rotation: Rotation::R270, hflip: false };
    let turned = augment(&s, r90).unwrap();
    assert_eq!((turned.height(), turned.width()), (8, 6));
    assert_eq!(augment(&turned, r270).unwrap(), s);
}

#[test]
fn augmentation_regenerates_mosaic() {
    let s = sample(6, 6, 3);
    for k in 0..4 {
        for hflip in [false, true] {
            let a = augment(&s, AugmentationSpec { rotation: Rotation::from_quarter_turns(k), hflip }).unwrap();
            assert_eq!(a.mosaic, mosaic_rggb(&a.rgb).unwrap());
        }
    }
}

#[test]
fn full_size_patch_is_whole_image() {
    let s = sample(16, 16, 4);
    let b = sample_patches(std::slice::from_ref(&s), 2, 16, false, &mut batch_rng(0, 0)).unwrap();
    assert_eq!(b.targets.shape(), [2, 3, 16, 16]);
    assert_eq!(&b.targets.data()[..3 * 256], s.rgb.data());
}

#[test]
fn patch_corners_are_even() {
    let s = ImageSample::from_rgb(coordinate_image(40, 50), "coords").unwrap();
    let b = sample_patches(&[s], 64, 8, false, &mut batch_rng(5, 0)).unwrap();
    let mut corners = std::collections::HashSet::new();
    for i in 0..64 {
        let base = i * 3 * 64;
        let (y, x) = (b.targets.data()[base] as usize, b.targets.data()[base + 64] as usize);
        assert_eq!((y % 2, x % 2), (0, 0));
        corners.insert((y, x));
    }
    assert!(corners.len() > 10);
}

#[test]
fn patches_are_deterministic() {
    let data = vec![sample(20, 24, 5), sample(32, 18, 6)];
    let a = sample_patches(&data, 4, 16, true, &mut batch_rng(9, 3)).unwrap();
    let b = sample_patches(&data, 4, 16, true, &mut batch_rng(9, 3)).unwrap();
    let c = sample_patches(&data, 4, 16, true, &mut batch_rng(9, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn small_images_are_skipped() {
    let data = vec![sample(8, 8, 7), sample(20, 20, 8)];
    let b = sample_patches(&data, 3, 16, false, &mut batch_rng(1, 0)).unwrap();
    assert_eq!(b.len(), 3);
    assert!(sample_patches(&data[..1], 3, 16, false, &mut batch_rng(1, 0)).is_err());
}

#[test]
fn bilinear_on_constant_mosaic() {
    let out = bilinear_demosaic(&Tensor::full([1, 6, 8], 0.4)).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
}

#[test]
fn bilinear_recovers_constant_red() {
    let rgb = Tensor::from_fn([3, 6, 6], |i| if i < 36 { 0.8 } else { 0.0 });
    let out = bilinear_demosaic(&mosaic_rggb(&rgb).unwrap()).unwrap();
    for y in (0..6).step_by(2) {
        for x in (0..6).step_by(2) {
            assert_eq!(out.data()[y * 6 + x], 0.8);
        }
    }
    assert!(out.data()[..36].iter().all(|&v| (v - 0.8).abs() < 1e-7));
}

#[test]
fn bilinear_green_exact_on_horizontal_ramp() {
    let (h, w) = (8, 10);
    let rgb = Tensor::from_fn([3, h, w], |i| 0.05 + 0.08 * (i % w) as f32);
    let out = bilinear_demosaic(&mosaic_rggb(&rgb).unwrap()).unwrap();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let g = out.data()[h * w + y * w + x];
            assert!((g - rgb.data()[h * w + y * w + x]).abs() < 1e-6, "({y},{x})");
        }
    }
}

#[test]
fn png_round_trip_and_listing() {
    let dir = tempfile::tempdir().unwrap();
    let img = synthetic_image(6, 10, 10);
    save_png(&dir.path().join("b.png"), &img).unwrap();
    save_png(&dir.path().join("a.png"), &img).unwrap();
    std::fs::write(dir.path().join("c.png"), b"not an image").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"x").unwrap();
    let back = load_rgb(&dir.path().join("b.png")).unwrap();
    assert_eq!(back, quantize8(&img));
    let names: Vec<_> = list_images(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    assert_eq!(load_dir(dir.path()).unwrap().len(), 2);
}

#[test]
fn prefetch_matches_direct_sampling() {
    let data = Arc::new(vec![sample(24, 24, 11), sample(30, 20, 12)]);
    let direct: Vec<_> = (0..6)
        .map(|i| sample_patches(&data, 2, 8, true, &mut batch_rng(3, i)).unwrap())
        .collect();
    for depth in [1, 4] {
        let streamed: Vec<_> = BatchStream::spawn(data.clone(), 2, 8, true, 3, 0..6, depth)
            .map(Result::unwrap)
            .collect();
        assert_eq!(streamed, direct);
    }
    // dropping a stream early must not hang
    let mut s = BatchStream::spawn(data, 2, 8, true, 3, 0..1000, 2);
    s.next().unwrap().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn four_quarter_turns_are_identity(h in 1usize..5, w in 1usize..5, seed: u64) {
        let s = sample(2 * h, 2 * w, seed);
        let mut a = s.clone();
        for _ in 0..4 {
            a = augment(&a, AugmentationSpec { rotation: Rotation::R90, hflip: false }).unwrap();
        }
        prop_assert_eq!(a, s);
    }

    #[test]
    fn augmentation_preserves_histogram(k in 0usize..4, hflip: bool, seed: u64) {
        let s = sample(6, 8, seed);
        let a = augment(&s, AugmentationSpec { rotation: Rotation::from_quarter_turns(k), hflip }).unwrap();
        for c in 0..3 {
            let sorted = |t: &Tensor| {
                let n = t.numel() / 3;
                let mut v = t.data()[c * n..(c + 1) * n].to_vec();
                v.sort_by(f32::total_cmp);
                v
            };
            prop_assert_eq!(sorted(&a.rgb), sorted(&s.rgb));
        }
    }

    #[test]
    fn batches_are_consistent_mosaics(seed: u64, augment_on: bool) {
        let data = vec![sample(20, 16, seed), sample(16, 22, seed ^ 1)];
        let b = sample_patches(&data, 3, 8, augment_on, &mut batch_rng(seed, 0)).unwrap();
        let p = 8 * 8;
        for i in 0..3 {
            let rgb = Tensor::new([3, 8, 8], b.targets.data()[i * 3 * p..(i + 1) * 3 * p].to_vec()).unwrap();
            let m = mosaic_rggb(&rgb).unwrap();
            prop_assert_eq!(m.data(), &b.mosaics.data()[i * p..(i + 1) * p]);
        }
    }

    #[test]
    fn bilinear_keeps_sampled_values(h in 1usize..6, w in 1usize..6, seed: u64) {
        let m = mosaic_rggb(&synthetic_image(2 * h, 2 * w, seed)).unwrap();
        let back = mosaic_rggb(&bilinear_demosaic(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
