use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sstgnn::checkpoint::Checkpoint;
use sstgnn::data::{make_windows, window_at, DatasetSplit, NormMode, SplitPlan};
use sstgnn::graph::khop_neighborhoods;
use sstgnn::train::{AdamState, TrainData};
use sstgnn::{
    Batch, Branches, HopNeighborhoods, ModelConfig, Normalizer, SensorGraph, SpeedSeries, SstGnn,
    TrainConfig, Trainer, WindowSet, WindowSpec,
};

fn tiny_config(branches: Branches) -> ModelConfig {
    ModelConfig {
        t_len: 3,
        k_hops: 2,
        p_days: 2,
        d_h: 5,
        d_f: 6,
        d_head: 4,
        n_out: 2,
        branches,
        share_weights: false,
        hr_sample: 1,
        t0_offset: 0,
    }
}

fn spec(cfg: &ModelConfig) -> WindowSpec {
    WindowSpec {
        t_len: cfg.t_len,
        p_days: cfg.p_days,
        horizons: (1..=cfg.n_out).collect(),
        stride: 1,
    }
}

fn ring(n: usize, k: usize) -> HopNeighborhoods {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    khop_neighborhoods(&SensorGraph::from_edges(n, &edges).unwrap(), k).unwrap()
}

fn random_series(seed: u64, steps: usize, n: usize) -> SpeedSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..steps * n).map(|_| rng.gen_range(20.0..70.0)).collect();
    SpeedSeries::new(steps, n, 1, values).unwrap()
}

fn norm() -> Normalizer {
    Normalizer::new(vec![45.0], vec![14.0]).unwrap()
}

#[test]
fn predictions_ignore_rows_after_the_window_inputs() {
    let cfg = tiny_config(Branches::Both);
    let sp = spec(&cfg);
    let n = 5;
    let steps = sp.first_start(24) + sp.span() + 10;
    let series = random_series(1, steps, n);
    let model = SstGnn::new(cfg.clone(), 2).unwrap();
    let hops = ring(n, 2);
    let start = sp.first_start(24) + 4;
    let w = window_at(&series, &sp, start);
    let base = model.predict(&Batch::from_windows(&[w], &norm()).unwrap(), &hops).unwrap();

    // rows at or after the first target row are not inputs
    let mut altered = series.clone();
    for t in start + cfg.t_len..steps {
        for u in 0..n {
            altered.set(t, u, 99.0);
        }
    }
    let w2 = window_at(&altered, &sp, start);
    assert_ne!(w2.target, window_at(&series, &sp, start).target);
    let out = model.predict(&Batch::from_windows(&[w2], &norm()).unwrap(), &hops).unwrap();
    assert_eq!(out, base);

    let w = window_at(&series, &sp, start);
    let max_feature = *w.time_indices.last().unwrap();
    assert!((0..w.horizons.len()).all(|j| w.target_time(j) > max_feature));
}

#[test]
fn shifting_time_by_one_week_is_invisible() {
    let cfg = tiny_config(Branches::Both);
    let shifted = ModelConfig {
        t0_offset: 7 * 24,
        ..cfg.clone()
    };
    let n = 4;
    let sp = spec(&cfg);
    let series = random_series(3, sp.first_start(24) + sp.span() + 6, n);
    let batch = Batch::from_windows(&make_windows(&series, &sp).unwrap(), &norm()).unwrap();
    let hops = ring(n, 2);
    let a = SstGnn::new(cfg, 4).unwrap();
    let b = SstGnn::from_store(shifted, a.params().clone()).unwrap();
    let (pa, pb) = (a.predict(&batch, &hops).unwrap(), b.predict(&batch, &hops).unwrap());
    assert!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn every_enabled_parameter_receives_gradient() {
    for (branches, shared) in [
        (Branches::Both, false),
        (Branches::Both, true),
        (Branches::Current, false),
        (Branches::Historical, false),
    ] {
        let cfg = ModelConfig {
            share_weights: shared,
            ..tiny_config(branches)
        };
        let n = 6;
        let sp = spec(&cfg);
        let series = random_series(5, sp.first_start(24) + sp.span() + 3, n);
        let batch = Batch::from_windows(&make_windows(&series, &sp).unwrap(), &norm()).unwrap();
        let hops = ring(n, 2);
        let mut model = SstGnn::new(cfg, 6).unwrap();
        model.loss_and_grad(&batch, &hops).unwrap();
        let prefix_off = match branches {
            Branches::Current => Some("hist."),
            Branches::Historical => Some("cur."),
            Branches::Both => None,
        };
        for (_, p) in model.params().iter() {
            let disabled = prefix_off.is_some_and(|pre| p.name().starts_with(pre));
            let live = p.grad.data().iter().any(|g| g.abs() > 1e-12);
            assert_eq!(live, !disabled, "{branches} shared={shared}: {}", p.name());
        }
    }
}

#[test]
fn single_sample_is_memorized() {
    let cfg = ModelConfig {
        d_h: 8,
        d_f: 16,
        d_head: 16,
        ..tiny_config(Branches::Both)
    };
    let n = 4;
    let sp = spec(&cfg);
    let series = Arc::new(random_series(8, sp.first_start(24) + sp.span(), n));
    let train = WindowSet::new(series.clone(), sp.clone(), sp.starts(series.n_steps(), 24));
    assert_eq!(train.len(), 1);
    let hops = ring(n, 2);
    let norm = Normalizer::fit(&series, 0..series.n_steps(), NormMode::Global).unwrap();
    let tcfg = TrainConfig {
        lr0: 3e-3,
        decay_every: usize::MAX,
        epochs: 200,
        batch_size: 0,
        ..Default::default()
    };
    let data = TrainData {
        hops: &hops,
        normalizer: &norm,
        train: &train,
        val: None,
    };
    let mut trainer = Trainer::new(SstGnn::new(cfg, 9).unwrap(), tcfg).unwrap();
    trainer.run(&data).unwrap();
    let mse = sstgnn::train::evaluate_mse(&trainer.model, &train, &hops, &norm, 1).unwrap();
    assert!(mse < 1e-4, "training MSE {mse}");
}

#[test]
fn output_layer_only_training_never_increases_loss() {
    let cfg = tiny_config(Branches::Both);
    let n = 5;
    let sp = spec(&cfg);
    let series = random_series(10, sp.first_start(24) + sp.span() + 6, n);
    let batch = Batch::from_windows(&make_windows(&series, &sp).unwrap(), &norm()).unwrap();
    let hops = ring(n, 2);
    let mut model = SstGnn::new(cfg, 11).unwrap();
    let mut adam = AdamState::new(model.params(), 0.9, 0.999, 1e-8);
    let trainable = ["head.w2", "head.b2"];
    let mut prev = f64::INFINITY;
    for _ in 0..60 {
        let loss = model.loss_and_grad(&batch, &hops).unwrap();
        assert!(loss <= prev + 1e-15, "loss rose from {prev} to {loss}");
        prev = loss;
        for p in model.params_mut().iter_mut() {
            if !trainable.contains(&p.name()) {
                p.grad = sstgnn::numcore::Tensor::zeros(p.grad.shape());
            }
        }
        adam.step(model.params_mut(), 1e-4).unwrap();
    }
}

fn resume_setup() -> (Arc<SpeedSeries>, HopNeighborhoods, Normalizer, WindowSpec, ModelConfig) {
    let cfg = tiny_config(Branches::Both);
    let n = 5;
    let sp = spec(&cfg);
    let series = Arc::new(random_series(12, sp.first_start(24) + sp.span() + 40, n));
    let norm = Normalizer::fit(&series, 0..series.n_steps(), NormMode::Global).unwrap();
    (series, ring(n, 2), norm, sp, cfg)
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (series, hops, norm, sp, cfg) = resume_setup();
    let split = DatasetSplit::plan(&series, &sp, SplitPlan::Fractions { train: 0.8, val: 0.1 }).unwrap();
    let (train, val, _) = split.windows(&series, &sp);
    let data = TrainData {
        hops: &hops,
        normalizer: &norm,
        train: &train,
        val: Some(&val),
    };
    let tcfg = |epochs| TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        decay_every: 2,
        ..Default::default()
    };

    let mut straight = Trainer::new(SstGnn::new(cfg.clone(), 1).unwrap(), tcfg(5)).unwrap();
    let full = straight.run(&data).unwrap();

    let mut first = Trainer::new(SstGnn::new(cfg, 1).unwrap(), tcfg(3)).unwrap();
    first.run(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    Checkpoint::resumable(&first, norm.clone()).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().trainer(tcfg(5)).unwrap();
    let rest = resumed.run(&data).unwrap();

    assert_eq!(rest.history, full.history);
    assert_eq!(rest.selected, full.selected);
    assert_eq!(resumed.model.params(), straight.model.params());
}

#[test]
fn normalizer_ignores_validation_and_test_rows() {
    let (series, _, _, sp, _) = resume_setup();
    let split = DatasetSplit::plan(&series, &sp, SplitPlan::Fractions { train: 0.6, val: 0.2 }).unwrap();
    let fit = |s: &SpeedSeries| Normalizer::fit(s, split.train_rows.clone(), NormMode::Global).unwrap();
    let mut altered = (*series).clone();
    for t in split.train_rows.end..altered.n_steps() {
        altered.set(t, 0, 1000.0);
    }
    assert_eq!(fit(&series), fit(&altered));
    assert!(split.train.end <= split.val.start && split.val.end <= split.test.start);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_finite_and_batch_independent(seed in 0u64..1000, n in 2usize..7) {
        let cfg = tiny_config(Branches::Both);
        let sp = spec(&cfg);
        let series = random_series(seed, sp.first_start(24) + sp.span() + 2, n);
        let ws = make_windows(&series, &sp).unwrap();
        let hops = ring(n, 2);
        let model = SstGnn::new(cfg, seed).unwrap();
        let all = model.predict(&Batch::from_windows(&ws, &norm()).unwrap(), &hops).unwrap();
        prop_assert!(all.is_finite());
        // a window's prediction does not depend on which other windows share its batch
        for (b, w) in ws.iter().enumerate() {
            let one = model.predict(&Batch::from_windows(std::slice::from_ref(w), &norm()).unwrap(), &hops).unwrap();
            for u in 0..n {
                prop_assert_eq!(one.row(u), all.row(b * n + u));
            }
        }
    }

    #[test]
    fn normalize_roundtrip(mean in -50.0f64..50.0, std in 0.1f64..20.0, x in -200.0f64..200.0) {
        let nz = Normalizer::new(vec![mean], vec![std]).unwrap();
        prop_assert!((nz.denormalize(nz.normalize(x, 0), 0) - x).abs() <= 1e-12 * x.abs().max(1.0));
    }
}
