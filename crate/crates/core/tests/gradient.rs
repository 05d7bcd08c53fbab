mod common;

use std::collections::BTreeSet;

use common::{all_slots, fixture, grad_at, max_relative_error, param_mut, STEP};
use hails_core::forecaster::{ModelParams, NodeKind};
use hails_core::hierarchy::{normalize_panel, SeriesPanel};
use hails_core::parallel::Execution;
use hails_core::sparsity::SparsityLabels;
use hails_core::synth::build_tree;
use hails_core::training::{batch_loss_grad, evaluate_windows, TrainConfig, WindowSet};
use hails_core::Error;

#[test]
fn fixture_covers_all_three_subtree_kinds() {
    let f = fixture(0);
    let kinds = &f.model.kinds;
    assert_eq!(kinds[0], NodeKind::Dense);
    assert_eq!(kinds[1], NodeKind::Dense);
    assert_eq!(kinds[2], NodeKind::Sparse);
    assert!(f.h.children(1).iter().all(|&c| kinds[c] == NodeKind::Dense));
    assert!(f.h.children(2).iter().all(|&c| kinds[c] == NodeKind::Sparse));
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for (seed, gamma) in [(0, 0.5), (1, 0.0), (2, 3.0)] {
        let err = max_relative_error(seed, gamma, 40);
        assert!(err < 1e-3, "seed {seed} gamma {gamma}: relative error {err}");
    }
}

#[test]
fn every_refinement_parameter_gradient_is_checked() {
    let f = fixture(3);
    let windows = vec![f.data.train[0]];
    let (_, g) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, 1.0, true, Execution::Sequential).unwrap();
    let n_nets = f.model.nets.len();
    for slot in all_slots(&f.model).into_iter().filter(|s| s.0 >= n_nets) {
        let loss = |delta: f64| {
            let mut m = f.model.clone();
            *param_mut(&mut m, slot) += delta;
            evaluate_windows(&m, &f.h, &f.data, &windows, 1.0, Execution::Sequential).unwrap().total
        };
        let numeric = (loss(STEP) - loss(-STEP)) / (2.0 * STEP);
        let analytic = grad_at(&g, n_nets, slot);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(err < 1e-3, "slot {slot:?}: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn head_only_pass_leaves_base_gradients_zero() {
    let f = fixture(4);
    let windows: Vec<usize> = f.data.train.iter().copied().take(2).collect();
    let (la, _) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, 0.5, true, Execution::Sequential).unwrap();
    let (lb, g) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, 0.5, false, Execution::Sequential).unwrap();
    assert_eq!(la, lb);
    assert!(g.nets.iter().flatten().all(|&v| v == 0.0));
    assert!(g.refinement.groups().iter().any(|gr| gr.iter().any(|&v| v != 0.0)));
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let f = fixture(5);
    let windows: Vec<usize> = f.data.train.iter().copied().take(4).collect();
    let (la, ga) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, 0.5, true, Execution::Sequential).unwrap();
    let (lb, gb) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, 0.5, true, Execution::Parallel).unwrap();
    assert_eq!(la.total, lb.total);
    assert_eq!(ga, gb);
}

#[test]
fn non_finite_loss_names_the_node() {
    let h = build_tree(&[2]).unwrap();
    let raw = SeriesPanel::new(vec![vec![4.0; 20], vec![2.0; 20], vec![2.0; 20]]).unwrap();
    let norm = normalize_panel(&raw, &h).unwrap();
    let data = WindowSet::new(&norm, 4, 1, 0.2).unwrap();
    let labels = SparsityLabels::from_sparse_set(&h, BTreeSet::new(), 0.1);
    let shape = TrainConfig {
        hidden: 3,
        window_len: 4,
        horizon: 1,
        ..Default::default()
    }
    .model_shape(1);
    let mut model = ModelParams::init(shape, &labels, &[2.0; 3], &[1.0; 3], 0).unwrap();
    model.nets[2].params.iter_mut().for_each(|p| *p = f64::NAN);
    let err = batch_loss_grad(&model, &h, &data, &data.train, 0.5, true, Execution::Sequential).unwrap_err();
    match err {
        Error::Numerical(m) => assert!(m.contains("node 3"), "{m}"),
        other => panic!("unexpected error {other}"),
    }
}
