use std::sync::Arc;

use proptest::prelude::*;
use rstca_core::data::{batch_rng, sample_patches, synthetic_image, ImageSample, PatchBatch};
use rstca_core::train::{clip_grad_norm, loss_csv, AdamState, Checkpoint, LrSchedule, TrainConfig, Trainer};
use rstca_core::{Error, ModelConfig, ParamStore, RstcaNet, Tensor};

fn scalar_store(v: f32) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("theta", Tensor::scalar(v));
    s
}

fn run_adam(grads: &[f32], lr: f64) -> Vec<f32> {
    let mut store = scalar_store(0.0);
    let mut adam = AdamState::new(&store);
    grads
        .iter()
        .map(|&g| {
            adam.step(&mut store, &[Tensor::scalar(g)], lr).unwrap();
            store.iter().next().unwrap().1.data()[0]
        })
        .collect()
}

#[test]
fn adam_constant_unit_gradient() {
    let th = run_adam(&[1.0, 1.0], 0.1);
    assert!((th[0] as f64 + 0.099_999_999).abs() < 1e-7);
    assert!((th[1] as f64 + 0.199_999_998).abs() < 1e-7);
}

#[test]
fn adam_varying_gradient() {
    let th = run_adam(&[1.0, -0.5, 2.0], 0.1);
    let expect = [-0.099_999_999_000_000_09, -0.126_633_702_629_096_96, -0.192_444_862_157_196_92];
    for (a, e) in th.iter().zip(expect) {
        assert!((*a as f64 - e).abs() < 1e-7, "{a} vs {e}");
    }
}

#[test]
fn adam_first_step_is_signed_lr() {
    for g in [3.0f32, -0.01, 250.0] {
        let th = run_adam(&[g], 0.01);
        assert!((th[0] + 0.01 * g.signum()).abs() < 1e-7);
    }
}

#[test]
fn adam_rejects_nan_and_names_parameter() {
    let mut store = scalar_store(0.5);
    store.add("other", Tensor::zeros([2]));
    let mut adam = AdamState::new(&store);
    let grads = [Tensor::scalar(1.0), Tensor::new([2], vec![0.0, f32::NAN]).unwrap()];
    match adam.step(&mut store, &grads, 0.1) {
        Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "other"),
        r => panic!("expected a non-finite gradient error, got {r:?}"),
    }
    assert_eq!(store.iter().next().unwrap().1.data()[0], 0.5);
    assert_eq!(adam.t, 0);
}

#[test]
fn schedule_values() {
    let b = LrSchedule::for_variant("B").unwrap();
    assert_eq!(b.lr_at(0), 1e-4);
    assert_eq!(b.lr_at(39_999), 1e-4);
    assert_eq!(b.lr_at(40_000), 5e-5);
    assert_eq!(b.lr_at(50_000), 5e-5);
    assert_eq!(b.lr_at(80_000), 2.5e-5);
    assert_eq!(LrSchedule::for_variant("S").unwrap().lr_at(100_000), 5e-5);
    let l = LrSchedule::for_variant("L").unwrap();
    assert_eq!(l.lr_at(199_999), 1e-4);
    assert_eq!(l.lr_at(200_000), 5e-5);
    assert!(LrSchedule::for_variant("M").is_err());
}

#[test]
fn clipping_bounds_global_norm() {
    let mut g = vec![Tensor::new([2], vec![3.0, 0.0]).unwrap(), Tensor::scalar(4.0)];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[1].data()[0], 4.0);
    clip_grad_norm(&mut g, 1.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-7 && (g[1].data()[0] - 0.8).abs() < 1e-7);
}

fn dataset() -> Arc<Vec<ImageSample>> {
    Arc::new(
        (0..3)
            .map(|i| ImageSample::from_rgb(synthetic_image(24, 24, i), format!("s{i}")).unwrap())
            .collect(),
    )
}

fn small_cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 2,
        patch: 16,
        seed: 7,
        schedule: LrSchedule::new(1e-3, 40_000),
        ..TrainConfig::default()
    }
}

fn fixed_batch() -> PatchBatch {
    sample_patches(&dataset(), 2, 16, false, &mut batch_rng(1, 0)).unwrap()
}

fn run(t: &mut Trainer) -> Vec<(u64, f32)> {
    let mut log = Vec::new();
    t.run(dataset(), |i, l| log.push((i, l))).unwrap();
    log
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut t = Trainer::new(RstcaNet::new(ModelConfig::tiny(), 3).unwrap(), small_cfg(2));
    run(&mut t);
    let ckpt = t.checkpoint();
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!((back.iteration, back.seed), (2, 7));
    assert_eq!(back.adam, ckpt.adam);
    for ((na, a), (nb, b)) in back.params.iter().zip(ckpt.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let batch = fixed_batch();
    let net = back.to_net().unwrap();
    let out = net.infer(&batch.mosaics).unwrap();
    assert_eq!(out, t.net.infer(&batch.mosaics).unwrap());
    let resumed = Trainer::from_checkpoint(&back, small_cfg(2)).unwrap();
    assert_eq!(resumed.loss_on(&batch).unwrap().to_bits(), t.loss_on(&batch).unwrap().to_bits());
}

#[test]
fn checkpoint_file_layout() {
    let net = RstcaNet::new(ModelConfig::tiny(), 0).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_net(&net, None, 0, 0).write_to(&mut bytes).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    let header: Vec<&str> = text.split("end_header\n").next().unwrap().lines().collect();
    assert!(header.contains(&"channels=16"));
    assert!(header.contains(&"iteration=0"));
    assert!(header.contains(&"tensor param embed.weight 4x16"));
    let body = bytes.len() - text.find("end_header\n").unwrap() - "end_header\n".len();
    assert_eq!(body, 4 * net.param_count());
}

#[test]
fn checkpoint_errors() {
    let net = RstcaNet::new(ModelConfig::tiny(), 0).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_net(&net, None, 0, 0).write_to(&mut bytes).unwrap();
    let truncated = &bytes[..bytes.len() - 4];
    assert!(matches!(Checkpoint::read_from(&mut &truncated[..]), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::read_from(&mut &b"garbage\n"[..]), Err(Error::Checkpoint(_))));

    let ckpt = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let mut wider = RstcaNet::new(ModelConfig { channels: 32, ..ModelConfig::tiny() }, 0).unwrap();
    match ckpt.load_into(&mut wider) {
        Err(Error::ParamMismatch { name, .. }) => assert_eq!(name, "embed.weight"),
        r => panic!("expected a mismatch, got {r:?}"),
    }
    let mut deeper = RstcaNet::new(ModelConfig { blocks: 2, ..ModelConfig::tiny() }, 0).unwrap();
    assert!(matches!(ckpt.load_into(&mut deeper), Err(Error::ParamMismatch { .. })));
}

#[test]
fn zero_iterations_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.ckpt");
    let net = RstcaNet::new(ModelConfig::tiny(), 11).unwrap();
    let init = net.params().clone();
    let mut t = Trainer::new(net, TrainConfig { checkpoint_path: Some(path.clone()), ..small_cfg(0) });
    assert!(run(&mut t).is_empty());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.iteration, 0);
    for ((_, a), (_, b)) in back.params.iter().zip(init.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn fixed_seed_gives_identical_losses() {
    let a = run(&mut Trainer::new(RstcaNet::new(ModelConfig::tiny(), 5).unwrap(), small_cfg(4)));
    let b = run(&mut Trainer::new(RstcaNet::new(ModelConfig::tiny(), 5).unwrap(), small_cfg(4)));
    assert_eq!(loss_csv(&a), loss_csv(&b));
    assert_eq!(a.len(), 4);
}

#[test]
fn restart_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let straight = run(&mut Trainer::new(RstcaNet::new(ModelConfig::tiny(), 5).unwrap(), small_cfg(6)));

    let cfg = TrainConfig { checkpoint_path: Some(path.clone()), ..small_cfg(3) };
    let first = run(&mut Trainer::new(RstcaNet::new(ModelConfig::tiny(), 5).unwrap(), cfg));
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.iteration, 3);
    let second = run(&mut Trainer::from_checkpoint(&ckpt, small_cfg(6)).unwrap());
    let joined: Vec<_> = first.into_iter().chain(second).collect();
    assert_eq!(loss_csv(&joined), loss_csv(&straight));
}

#[test]
fn non_finite_loss_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let cfg = TrainConfig { checkpoint_path: Some(path.clone()), checkpoint_every: 2, ..small_cfg(4) };
    let mut t = Trainer::new(RstcaNet::new(ModelConfig::tiny(), 5).unwrap(), cfg);
    run(&mut t);
    t.cfg.iterations = 8;
    let bad = Tensor::full([3, 24, 24], f32::NAN);
    let poisoned = Arc::new(vec![ImageSample::from_rgb(bad, "nan").unwrap()]);
    match t.run(poisoned, |_, _| {}) {
        Err(Error::NonFiniteLoss { iteration, .. }) => assert_eq!(iteration, 4),
        r => panic!("expected a non-finite loss, got {r:?}"),
    }
    assert_eq!(Checkpoint::load(&path).unwrap().iteration, 4);
    assert_eq!(t.iteration, 4);
}

#[test]
fn tiny_overfit_loss_decreases() {
    let batch = fixed_batch();
    let mut t = Trainer::new(RstcaNet::new(ModelConfig::tiny(), 0).unwrap(), small_cfg(50));
    let losses: Vec<f32> = (0..50).map(|_| t.step(&batch).unwrap()).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 5, "{rises} non-monotone steps: {losses:?}");
    assert!(losses[49] < losses[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_gradient_is_identity(v in -5.0f32..5.0, steps in 1usize..20, lr in 1e-5f64..1.0) {
        let mut store = scalar_store(v);
        let mut adam = AdamState::new(&store);
        for _ in 0..steps {
            adam.step(&mut store, &[Tensor::scalar(0.0)], lr).unwrap();
        }
        prop_assert_eq!(store.iter().next().unwrap().1.data()[0], v);
        prop_assert_eq!(adam.t, steps as u64);
    }

    #[test]
    fn schedule_is_step_nonincreasing(period in 1u64..1000, i in 0u64..100_000) {
        let s = LrSchedule::new(1e-4, period);
        prop_assert!(s.lr_at(i + 1) <= s.lr_at(i));
        let jumps = s.lr_at(i + 1) != s.lr_at(i);
        prop_assert_eq!(jumps, (i + 1) % period == 0);
    }
}
