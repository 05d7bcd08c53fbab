use std::collections::BTreeSet;

use hails_core::forecaster::ModelParams;
use hails_core::hierarchy::{normalize_panel, SeriesPanel};
use hails_core::parallel::Execution;
use hails_core::pipeline::{fit, prepare};
use hails_core::sparsity::SparsityLabels;
use hails_core::synth::{build_tree, generate, SynthConfig};
use hails_core::training::{log_to_csv, pretrain, train, BaseUpdateMode, TrainConfig, WindowSet};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        hidden: 6,
        window_len: 12,
        horizon: 3,
        max_epochs: 8,
        pretrain_epochs: 3,
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn pretraining_learns_a_constant_level() {
    let h = build_tree(&[1]).unwrap();
    let raw = SeriesPanel::new(vec![vec![5.0; 60], vec![5.0; 60]]).unwrap();
    let norm = normalize_panel(&raw, &h).unwrap();
    let cfg = TrainConfig {
        hidden: 4,
        window_len: 8,
        horizon: 2,
        lr: 0.01,
        batch_size: 8,
        pretrain_epochs: 300,
        ..Default::default()
    };
    let data = WindowSet::new(&norm, cfg.window_len, cfg.horizon, cfg.val_fraction).unwrap();
    let labels = SparsityLabels::from_sparse_set(&h, BTreeSet::new(), 0.1);
    // start far from the answer so the bias initialization does not help
    let model = ModelParams::init(cfg.model_shape(1), &labels, &[0.0; 2], &[1.0; 2], 0).unwrap();
    let trained = pretrain(&model, &data, &cfg, Execution::Sequential).unwrap();
    let d = trained.forward_all(&data.inputs(data.val[0]), Execution::Sequential).unwrap();
    for node in &d {
        for step in node {
            assert!((step.mean() - 5.0).abs() < 0.25, "mean {}", step.mean());
        }
    }
}

#[test]
fn zero_pretraining_epochs_is_a_no_op_and_runs_repeat() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    let cfg = small_cfg();
    let (_, data, model) = prepare(&h, &raw, None, &cfg, Execution::Sequential).unwrap();
    let none = pretrain(&model, &data, &TrainConfig { pretrain_epochs: 0, ..cfg.clone() }, Execution::Sequential).unwrap();
    assert_eq!(none, model);
    let a = pretrain(&model, &data, &cfg, Execution::Sequential).unwrap();
    let b = pretrain(&model, &data, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, model);
}

#[test]
fn best_validation_loss_never_rises() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    let out = fit(&h, &raw, None, &small_cfg(), Execution::Sequential).unwrap();
    assert!(!out.log.is_empty());
    for w in out.log.windows(2) {
        assert!(w[1].best_val_total <= w[0].best_val_total);
        assert_eq!(w[1].epoch, w[0].epoch + 1);
    }
    let min = out.log.iter().map(|l| l.val_total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_total, min);
    assert_eq!(out.log.last().unwrap().best_val_total, min);
}

#[test]
fn update_counters_follow_the_period() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    for (k, mode) in [(1, BaseUpdateMode::Sampled), (3, BaseUpdateMode::Sampled), (3, BaseUpdateMode::Accumulated)] {
        let cfg = TrainConfig {
            base_update_period: k,
            base_update_mode: mode,
            patience: 100,
            ..small_cfg()
        };
        let (_, data, model) = prepare(&h, &raw, None, &cfg, Execution::Sequential).unwrap();
        let out = train(&model, &h, &data, &cfg, 0, Execution::Sequential).unwrap();
        let s = &out.stats;
        assert_eq!(s.epochs_run, cfg.max_epochs);
        assert_eq!(s.refinement_updates, s.batches);
        assert_eq!(s.base_updates, s.batches / k as u64);
    }
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    let cfg = small_cfg();
    let a = fit(&h, &raw, None, &cfg, Execution::Sequential).unwrap();
    let b = fit(&h, &raw, None, &cfg, Execution::Parallel).unwrap();
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    assert_eq!(a.model, b.model);
}

#[test]
fn resumed_epochs_continue_numbering() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 100,
        ..small_cfg()
    };
    let (_, data, model) = prepare(&h, &raw, None, &cfg, Execution::Sequential).unwrap();
    let out = train(&model, &h, &data, &cfg, 5, Execution::Sequential).unwrap();
    let epochs: Vec<usize> = out.log.iter().map(|l| l.epoch).collect();
    assert_eq!(epochs, vec![6, 7]);
}

#[test]
fn log_csv_has_fixed_header() {
    let (h, raw) = generate(&SynthConfig::default()).unwrap();
    let out = fit(&h, &raw, None, &TrainConfig { max_epochs: 2, ..small_cfg() }, Execution::Sequential).unwrap();
    let text = log_to_csv(&out.log);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,ll,dcrs,total,val_total,dce"));
    assert_eq!(lines.count(), out.log.len());
}
