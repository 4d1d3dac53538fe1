use graformer::autodiff::{grad_check, Tensor};
use graformer::data::{generate_synthetic, SyntheticCamera};
use graformer::layers::ParamStore;
use graformer::training::{
    adam_step, eval_loss, lr_at, mpjpe, mse, mse_loss, per_sample_mpjpe, AdamState, LrSchedule,
    TrainConfig, Trainer,
};
use graformer::{Error, GraFormer, ModelConfig, SkeletonGraph};
use proptest::prelude::*;

fn pose(batch: usize, j: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![batch, j, 3], data).unwrap()
}

fn translate(t: &Tensor, offset: [f64; 3]) -> Tensor {
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + offset[i % 3])
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn mse_examples() {
    let a = pose(1, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);

    let mut shifted = a.clone();
    shifted.data_mut()[3] += 1.0;
    assert!((mse(&shifted, &a).unwrap() - 1.0).abs() < 1e-15);

    // per-sample squared norms 3 and 5
    let target = Tensor::zeros(&[2, 2, 3]);
    let pred = pose(
        2,
        2,
        vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    );
    assert!((mse(&pred, &target).unwrap() - 4.0).abs() < 1e-15);
}

#[test]
fn mse_rejects_shape_mismatch() {
    let err = mse(&Tensor::zeros(&[1, 2, 3]), &Tensor::zeros(&[1, 3, 3])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn mse_gradient_is_scaled_difference() {
    let target = pose(2, 2, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
    let pred = pose(2, 2, (0..12).map(|i| (i as f64 * 1.3).cos()).collect());

    let mut tape = graformer::autodiff::Tape::new();
    let p = tape.leaf(pred.clone(), true);
    let t = tape.constant(target.clone());
    let loss = mse_loss(&mut tape, p, t).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(p).unwrap();
    for ((g, a), b) in grad.iter().zip(pred.data()).zip(target.data()) {
        assert!(
            (g - (a - b)).abs() < 1e-14,
            "expected 2/2 * (pred - target)"
        );
    }

    let report = grad_check(
        |tape, x| {
            let t = tape.constant(target.clone());
            mse_loss(tape, x, t)
        },
        &pred,
        1e-7,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

fn scalar_store(value: f64) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("p", Tensor::new(vec![1], vec![value]).unwrap());
    store
}

fn set_grad(store: &mut ParamStore, g: f64) {
    store.iter_mut().next().unwrap().grad[0] = g;
}

fn value(store: &ParamStore) -> f64 {
    store.iter().next().unwrap().value.data()[0]
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = scalar_store(0.5);
    let mut state = AdamState::new(&store, 0.9, 0.999, 1e-8);
    adam_step(&mut store, &mut state, 0.001).unwrap();
    assert_eq!(value(&store), 0.5);
    assert_eq!(state.timestep(), 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = scalar_store(1.0);
    let mut state = AdamState::new(&store, 0.9, 0.999, 1e-8);
    set_grad(&mut store, 1.0);
    adam_step(&mut store, &mut state, 0.001).unwrap();
    let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
    assert!((value(&store) - expected).abs() < 1e-15);
}

#[test]
fn adam_minimizes_square() {
    let mut store = scalar_store(1.0);
    let mut state = AdamState::new(&store, 0.9, 0.999, 1e-8);
    for _ in 0..2000 {
        let p = value(&store);
        set_grad(&mut store, 2.0 * p);
        adam_step(&mut store, &mut state, 0.01).unwrap();
    }
    assert!(value(&store).abs() < 1e-3, "p = {}", value(&store));
}

#[test]
fn adam_rejects_mismatched_state() {
    let store = scalar_store(1.0);
    let mut state = AdamState::new(&store, 0.9, 0.999, 1e-8);
    let mut bigger = scalar_store(1.0);
    bigger.add("q", Tensor::zeros(&[3]));
    assert!(adam_step(&mut bigger, &mut state, 0.001).is_err());
}

#[test]
fn lr_schedule_examples() {
    let step = TrainConfig::default();
    assert_eq!(lr_at(&step, 0, 0), 0.001);
    assert!((lr_at(&step, 150_000, 0) - 0.00081).abs() < 1e-15);
    assert_eq!(lr_at(&step, 74_999, 9), 0.001);

    let epoch = TrainConfig {
        schedule: LrSchedule::epochs(),
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(&epoch, 10_000_000, 29), 0.001);
    assert!((lr_at(&epoch, 0, 30) - 0.0009).abs() < 1e-15);
}

#[test]
fn train_config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig {
            eval_every: 0,
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn mpjpe_examples() {
    let target = pose(1, 2, vec![0.0; 6]);
    assert_eq!(mpjpe(&target, &target, 0).unwrap(), 0.0);
    let mut pred = target.clone();
    pred.data_mut()[3] = 3.0;
    assert!((mpjpe(&pred, &target, 0).unwrap() - 1.5).abs() < 1e-15);
    assert_eq!(
        mpjpe(&translate(&target, [5.0, -2.0, 9.0]), &target, 0).unwrap(),
        0.0
    );
    assert!(mpjpe(&pred, &Tensor::zeros(&[1, 3, 3]), 0).is_err());
}

#[test]
fn per_sample_mpjpe_splits_batch() {
    let target = Tensor::zeros(&[2, 2, 3]);
    let mut pred = target.clone();
    pred.data_mut()[3] = 4.0;
    pred.data_mut()[9] = 0.0;
    pred.data_mut()[10] = 2.0;
    assert_eq!(per_sample_mpjpe(&pred, &target, 0).unwrap(), vec![2.0, 1.0]);
}

fn poses() -> impl Strategy<Value = (Tensor, Tensor, [f64; 3], usize)> {
    (1usize..4, 2usize..8).prop_flat_map(|(b, j)| {
        let n = b * j * 3;
        (
            prop::collection::vec(-2000.0..2000.0f64, n),
            prop::collection::vec(-2000.0..2000.0f64, n),
            prop::array::uniform3(-5000.0..5000.0f64),
            0..j,
        )
            .prop_map(move |(a, c, off, root)| (pose(b, j, a), pose(b, j, c), off, root))
    })
}

proptest! {
    #[test]
    fn mpjpe_translation_invariant((pred, target, off, root) in poses()) {
        let base = mpjpe(&pred, &target, root).unwrap();
        let moved_pred = mpjpe(&translate(&pred, off), &target, root).unwrap();
        let moved_target = mpjpe(&pred, &translate(&target, off), root).unwrap();
        prop_assert!((base - moved_pred).abs() <= 1e-9);
        prop_assert!((base - moved_target).abs() <= 1e-9);
    }

    #[test]
    fn mpjpe_symmetric((pred, target, _off, root) in poses()) {
        let ab = mpjpe(&pred, &target, root).unwrap();
        let ba = mpjpe(&target, &pred, root).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn mse_nonnegative_and_zero_only_on_equality((pred, target, _off, _root) in poses()) {
        prop_assert!(mse(&pred, &target).unwrap() >= 0.0);
        prop_assert_eq!(mse(&pred, &pred).unwrap(), 0.0);
        if pred != target {
            prop_assert!(mse(&pred, &target).unwrap() > 0.0);
        }
    }

    #[test]
    fn lr_never_increases(lr in 1e-6..1.0f64, every in 1usize..100, factor in 0.1..1.0f64,
                          by_epoch: bool, a in 0usize..10_000, b in 0usize..10_000) {
        let schedule = if by_epoch {
            LrSchedule::Epoch { every, factor }
        } else {
            LrSchedule::Step { every, factor }
        };
        let config = TrainConfig { learning_rate: lr, schedule, ..TrainConfig::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(&config, hi, hi) <= lr_at(&config, lo, lo));
    }

    #[test]
    fn adam_with_zero_lr_is_a_no_op(values in prop::collection::vec(-10.0..10.0f64, 1..6),
                                    grads in prop::collection::vec(-10.0..10.0f64, 6)) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        let before = store.clone();
        store.iter_mut().next().unwrap().grad.copy_from_slice(&grads[..values.len()]);
        let mut state = AdamState::new(&store, 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            adam_step(&mut store, &mut state, 0.0).unwrap();
        }
        let after = store.iter().next().unwrap().value.data();
        for (x, y) in after.iter().zip(before.iter().next().unwrap().value.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

fn small_model(seed: u64) -> GraFormer {
    let mut config = ModelConfig::small_preset(SkeletonGraph::human16());
    config.dropout = 0.0;
    GraFormer::new(config, seed).unwrap()
}

#[test]
fn one_epoch_on_one_sample_lowers_loss() {
    // At the default rate the first bias-corrected Adam step moves every
    // weight by about lr and overshoots this one-sample problem.
    let g = SkeletonGraph::human16();
    for seed in 0..3 {
        let data = generate_synthetic(&g, 1, seed, &SyntheticCamera::default()).unwrap();
        let model = GraFormer::new(ModelConfig::default_preset(g.clone()), seed).unwrap();
        let before = eval_loss(&model, &data).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-5,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, config).unwrap();
        trainer.run_epoch(&data, None).unwrap();
        let after = eval_loss(trainer.model(), &data).unwrap();
        assert!(after < before, "seed {seed}: {after} >= {before}");
    }
}

#[test]
fn same_seed_same_run() {
    let g = SkeletonGraph::human16();
    let data = generate_synthetic(&g, 24, 5, &SyntheticCamera::default()).unwrap();
    let run = |prefetch| {
        let mut config = ModelConfig::small_preset(g.clone());
        config.dropout = 0.25;
        let train = TrainConfig {
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(GraFormer::new(config, 5).unwrap(), train).unwrap();
        t.set_prefetch(prefetch);
        let logs: Vec<f64> = (0..2)
            .map(|_| t.run_epoch(&data, None).unwrap().train_loss)
            .collect();
        (logs, t.into_model().params().clone())
    };
    let (a, pa) = run(0);
    let (b, pb) = run(0);
    let (c, pc) = run(2);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(pa, pb);
    assert_eq!(pa, pc);
}

#[test]
fn diverging_loss_names_the_step() {
    let g = SkeletonGraph::human16();
    let data = generate_synthetic(&g, 8, 1, &SyntheticCamera::default()).unwrap();
    let train = TrainConfig {
        learning_rate: 1e300,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(small_model(1), train).unwrap();
    let err = (0..5)
        .find_map(|_| trainer.run_epoch(&data, None).err())
        .expect("diverges");
    match err {
        Error::NonFinite { step, .. } => assert!(err.to_string().contains(&step.to_string())),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn skipped_evaluations_leave_no_score() {
    let g = SkeletonGraph::human16();
    let data = generate_synthetic(&g, 4, 2, &SyntheticCamera::default()).unwrap();
    let mut trainer = Trainer::new(small_model(2), TrainConfig::default()).unwrap();
    assert!(trainer
        .run_epoch_with(&data, None, false)
        .unwrap()
        .eval_mpjpe_mm
        .is_none());
    assert!(trainer.best().is_none());
    let row = trainer.run_epoch(&data, None).unwrap();
    assert_eq!(row.epoch, 2);
    assert_eq!(trainer.best().unwrap().0, row.eval_mpjpe_mm.unwrap());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let g = SkeletonGraph::human16();
    let data = generate_synthetic(&g, 4, 8, &SyntheticCamera::default()).unwrap();
    let (x, y) = data.all();
    let report =
        graformer::training::grad_check_model(&small_model(8), &x, &y, 3, 8, 1e-4).unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.checked > 50);
}
