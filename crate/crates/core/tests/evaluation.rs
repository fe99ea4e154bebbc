use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rstca_core::data::{save_png, synthetic_image, ImageSample};
use rstca_core::eval::{
    cpsnr, evaluate_dataset, evaluate_sample, parse_report_csv, ssim, EvalOptions, Method, CPSNR_CAP_DB,
};
use rstca_core::{ModelConfig, RstcaNet, Tensor};

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, h, w], |_| rng.random::<f32>())
}

#[test]
fn cpsnr_identical_is_capped() {
    let x = random_image(8, 8, 0);
    assert_eq!(cpsnr(&x, &x).unwrap(), CPSNR_CAP_DB);
}

#[test]
fn cpsnr_uniform_one_level() {
    let x = Tensor::full([3, 16, 16], 0.25);
    let y = x.map(|v| v + 1.0 / 255.0);
    assert!((cpsnr(&x, &y).unwrap() - 48.1308).abs() < 1e-3);
}

#[test]
fn cpsnr_half_pixels_two_levels() {
    // MSE = (2/255)^2 / 2
    let x = Tensor::full([3, 4, 4], 0.25);
    let y = Tensor::from_fn([3, 4, 4], |i| if i % 2 == 0 { 0.25 + 2.0 / 255.0 } else { 0.25 });
    assert!((cpsnr(&x, &y).unwrap() - 45.1205).abs() < 1e-3);
}

#[test]
fn cpsnr_rejects_mismatched_shapes() {
    assert!(cpsnr(&Tensor::zeros([3, 4, 4]), &Tensor::zeros([3, 4, 6])).is_err());
    assert!(cpsnr(&Tensor::zeros([1, 4, 4]), &Tensor::zeros([1, 4, 4])).is_err());
}

#[test]
fn cpsnr_decreases_with_noise() {
    let base = synthetic_image(32, 32, 3).map(|v| 0.1 + 0.8 * v);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let signs: Vec<f32> = (0..base.numel()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let scores: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|a| {
            let noisy = Tensor::from_fn([3, 32, 32], |i| base.data()[i] + signs[i] * a / 255.0);
            cpsnr(&base, &noisy).unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn ssim_checkerboard_against_inverse_is_negative() {
    let cb = Tensor::from_fn([3, 16, 16], |i| ((i / 16 + i % 16) % 2) as f32);
    let inv = cb.map(|v| 1.0 - v);
    let s = ssim(&cb, &inv).unwrap();
    assert!(s < 0.0, "{s}");
}

#[test]
fn ssim_rejects_small_images() {
    assert!(ssim(&Tensor::zeros([3, 10, 20]), &Tensor::zeros([3, 10, 20])).is_err());
}

/// Single 11x11 window evaluated with an explicit 2-D weighted sum.
fn one_window_ssim(a: &[f64], b: &[f64]) -> (f64, f64) {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let wt = |k: usize| g[k / 11] * g[k % 11] / (gs * gs);
    let e = |f: &dyn Fn(usize) -> f64| (0..121).map(|k| wt(k) * f(k)).sum::<f64>();
    let (ma, mb) = (e(&|k| a[k]), e(&|k| b[k]));
    let va = e(&|k| (a[k] - ma).powi(2));
    let vb = e(&|k| (b[k] - mb).powi(2));
    let cov = e(&|k| (a[k] - ma) * (b[k] - mb));
    let (c1, c2) = (1e-4, 9e-4);
    let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    let cs = (2.0 * cov + c2) / (va + vb + c2);
    (lum, cs)
}

fn gray(plane: &[f64]) -> Tensor {
    Tensor::from_fn([3, 11, 11], |i| plane[i % 121] as f32)
}

#[test]
fn ssim_single_window_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..121).map(|_| (rng.random::<f32>() * 0.6 + 0.2) as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| (v * 0.7 + 0.1 + rng.random::<f32>() as f64 * 0.1) as f32 as f64).collect();
    let (lum, cs) = one_window_ssim(&a, &b);
    let got = ssim(&gray(&a), &gray(&b)).unwrap();
    assert!((got - lum * cs).abs() < 1e-9, "{got} vs {}", lum * cs);

    // a common offset only moves the luminance term
    let shift = |p: &[f64]| p.iter().map(|v| ((v + 0.125) as f32) as f64).collect::<Vec<_>>();
    let (a2, b2) = (shift(&a), shift(&b));
    let (lum2, cs2) = one_window_ssim(&a2, &b2);
    assert!((cs2 - cs).abs() < 1e-6);
    let got2 = ssim(&gray(&a2), &gray(&b2)).unwrap();
    assert!((got2 / got - lum2 / lum).abs() < 1e-5);
}

#[test]
fn crop_and_quantize_options() {
    let s = ImageSample::from_rgb(synthetic_image(24, 24, 1), "x").unwrap();
    let plain = evaluate_sample(Method::Bilinear, &s, EvalOptions::default()).unwrap();
    let cropped = evaluate_sample(Method::Bilinear, &s, EvalOptions { crop: 2, quantize: false }).unwrap();
    assert_ne!(plain.cpsnr_db, cropped.cpsnr_db);
    let q = evaluate_sample(Method::Bilinear, &s, EvalOptions { crop: 0, quantize: true }).unwrap();
    assert!((q.cpsnr_db - plain.cpsnr_db).abs() < 0.5);
    assert!(evaluate_sample(Method::Bilinear, &s, EvalOptions { crop: 12, quantize: false }).is_err());
}

fn toy_dir(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..n {
        save_png(&dir.path().join(format!("img{i}.png")), &synthetic_image(18 + 2 * i, 22, i as u64)).unwrap();
    }
    dir
}

#[test]
fn dataset_self_test_and_skips() {
    let dir = toy_dir(2);
    std::fs::write(dir.path().join("broken.png"), b"no").unwrap();
    let r = evaluate_dataset(Method::GroundTruth, dir.path(), EvalOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].0, "broken.png");
    assert_eq!(r.mean_cpsnr(), CPSNR_CAP_DB);
    assert_eq!(r.mean_ssim(), 1.0);
}

#[test]
fn dataset_report_csv_round_trip() {
    let dir = toy_dir(3);
    let r = evaluate_dataset(Method::Bilinear, dir.path(), EvalOptions::default()).unwrap();
    let names: Vec<_> = r.rows.iter().map(|m| m.image.as_str()).collect();
    assert_eq!(names, ["img0.png", "img1.png", "img2.png"]);
    assert!(r.rows.iter().all(|m| m.cpsnr_db < CPSNR_CAP_DB && m.ssim < 1.0));
    let csv = r.to_csv().unwrap();
    assert!(csv.starts_with("image,cpsnr_db,ssim\n"));
    let rows = parse_report_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    let last = rows.last().unwrap();
    assert_eq!(last.image, "MEAN");
    let body = &rows[..3];
    let mean_c = body.iter().map(|m| m.cpsnr_db).sum::<f64>() / 3.0;
    let mean_s = body.iter().map(|m| m.ssim).sum::<f64>() / 3.0;
    assert_eq!(format!("{mean_c:.4}"), format!("{:.4}", last.cpsnr_db));
    assert_eq!(format!("{mean_s:.4}"), format!("{:.4}", last.ssim));
    let exact = r.rows.iter().map(|m| m.cpsnr_db).sum::<f64>() / 3.0;
    assert_eq!(r.mean_cpsnr(), exact);
    for line in csv.lines().skip(1) {
        for field in line.split(',').skip(1) {
            assert_eq!(field.split('.').nth(1).unwrap().len(), 4, "{line}");
        }
    }
}

#[test]
fn dataset_with_network_handles_odd_sizes() {
    let dir = tempfile::tempdir().unwrap();
    save_png(&dir.path().join("odd.png"), &synthetic_image(19, 21, 5)).unwrap();
    let net = RstcaNet::new(ModelConfig::tiny(), 0).unwrap();
    let r = evaluate_dataset(Method::Network(&net), dir.path(), EvalOptions::default()).unwrap();
    assert!(r.rows[0].cpsnr_db.is_finite() && r.rows[0].ssim.is_finite());
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(evaluate_dataset(Method::Bilinear, dir.path(), EvalOptions::default()).is_err());
    assert!(parse_report_csv("a,b\n1,2\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_identity_symmetry_and_range(seed: u64, h in 11usize..20, w in 11usize..20) {
        let a = random_image(h, w, seed);
        let b = random_image(h, w, seed ^ 0x5555);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn cpsnr_symmetric_and_positive(seed: u64) {
        let a = random_image(8, 8, seed);
        let b = random_image(8, 8, seed.wrapping_add(1));
        let c = cpsnr(&a, &b).unwrap();
        prop_assert_eq!(c, cpsnr(&b, &a).unwrap());
        prop_assert!(c > 0.0);
    }
}
