//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hails_core::forecaster::{ModelGrads, ModelParams};
use hails_core::hierarchy::{denormalize_forecasts, normalize_panel, Hierarchy};
use hails_core::loss::dce_metric;
use hails_core::metrics::evaluate;
use hails_core::pipeline::{fit, forecast_at};
use hails_core::training::TrainStats;
use hails_core::parallel::Execution;
use hails_core::sparsity::SparsityLabels;
use hails_core::synth::{generate, reference_forecast, SynthConfig};
use hails_core::training::{batch_loss_grad, evaluate_windows, node_statistics, TrainConfig, WindowSet};

pub const STEP: f64 = 1e-5;

pub struct Fixture {
    pub h: Hierarchy,
    pub data: WindowSet,
    pub model: ModelParams,
}

/// 1+2+4 tree with node 3 and its leaves forced sparse: the root subtree is
/// mixed, node 2 is all Gaussian and node 3 all Poisson.
pub fn fixture(seed: u64) -> Fixture {
    let (h, raw) = generate(&SynthConfig {
        branching: vec![2, 2],
        length: 24,
        period: 6,
        seed,
        ..Default::default()
    })
    .unwrap();
    let labels = SparsityLabels::from_sparse_set(&h, BTreeSet::from([2, 5, 6]), 0.1);
    let cfg = TrainConfig {
        hidden: 4,
        window_len: 8,
        horizon: 2,
        seed,
        ..Default::default()
    };
    let norm = normalize_panel(&raw, &h).unwrap();
    let data = WindowSet::new(&norm, cfg.window_len, cfg.horizon, cfg.val_fraction).unwrap();
    let (means, scales) = node_statistics(&data);
    let mut model = ModelParams::init(cfg.model_shape(data.input_dim()), &labels, &means, &scales, seed).unwrap();
    // move the refinement away from its symmetric starting point
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let rp = &mut model.refinement;
    rp.w_hat.iter_mut().for_each(|v| *v = rng.random_range(-1.0..2.0));
    rp.w.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.5));
    rp.v1.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    rp.v2.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    rp.b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    Fixture { h, data, model }
}

pub fn param_mut(model: &mut ModelParams, slot: (usize, usize)) -> &mut f64 {
    let (group, j) = slot;
    if group < model.nets.len() {
        &mut model.nets[group].params[j]
    } else {
        &mut model.refinement.groups_mut()[group - model.nets.len()][j]
    }
}

pub fn grad_at(g: &ModelGrads, n_nets: usize, slot: (usize, usize)) -> f64 {
    let (group, j) = slot;
    if group < n_nets {
        g.nets[group][j]
    } else {
        g.refinement.groups()[group - n_nets][j]
    }
}

pub fn all_slots(model: &ModelParams) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, n) in model.nets.iter().enumerate() {
        out.extend((0..n.params.len()).map(|j| (i, j)));
    }
    for (k, g) in model.refinement.groups().iter().enumerate() {
        out.extend((0..g.len()).map(|j| (model.nets.len() + k, j)));
    }
    out
}

/// Worst relative error between analytic and central-difference gradients
/// over `count` random parameters.
pub fn max_relative_error(seed: u64, gamma: f64, count: usize) -> f64 {
    let f = fixture(seed);
    let windows: Vec<usize> = f.data.train.iter().copied().take(3).collect();
    let (_, g) = batch_loss_grad(&f.model, &f.h, &f.data, &windows, gamma, true, Execution::Sequential).unwrap();
    let slots = all_slots(&f.model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let slot = slots[rng.random_range(0..slots.len())];
        let loss = |delta: f64| {
            let mut m = f.model.clone();
            *param_mut(&mut m, slot) += delta;
            evaluate_windows(&m, &f.h, &f.data, &windows, gamma, Execution::Sequential)
                .unwrap()
                .total
        };
        let numeric = (loss(STEP) - loss(-STEP)) / (2.0 * STEP);
        let analytic = grad_at(&g, f.model.nets.len(), slot);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

/// Held-out steps of the synthetic benchmark.
pub const BENCH_HOLDOUT: usize = 6;

/// Training settings for the 1+3+9 benchmark: library defaults with a
/// narrower encoder, which suits 120 time steps.
pub fn bench_config(seed: u64, gamma: f64) -> TrainConfig {
    TrainConfig {
        gamma,
        seed,
        hidden: 16,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub wrmsse: f64,
    pub baseline_wrmsse: f64,
    /// Consistency error of the held-out forecasts.
    pub dce: f64,
    pub best_val_total: f64,
    pub stats: TrainStats,
}

/// Fits on all but the last six steps of the default synthetic panel and
/// scores the forecasts of those six steps.
pub fn bench_run(seed: u64, cfg: &TrainConfig) -> BenchRun {
    let (h, panel) = generate(&SynthConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let origin = panel.len_t() - BENCH_HOLDOUT;
    let train = panel.slice_time(0, origin).unwrap();
    let truth: Vec<Vec<f64>> = (0..h.len()).map(|i| panel.row(i)[origin..].to_vec()).collect();
    let baseline = evaluate(&h, &train, &truth, &reference_forecast(&train, BENCH_HOLDOUT).unwrap(), None, None)
        .unwrap()
        .total
        .wrmsse
        .unwrap();
    let h = h.with_phi(cfg.phi_mode);
    let out = fit(&h, &train, None, cfg, Execution::Parallel).unwrap();
    let norm = forecast_at(&out.model, &h, &train, origin, Execution::Parallel).unwrap();
    let dce = dce_metric(&norm, &h).unwrap();
    let raw = denormalize_forecasts(&norm, &h);
    let means: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|d| d.mean()).collect()).collect();
    let report = evaluate(&h, &train, &truth, &means, Some(&raw), Some(dce)).unwrap();
    BenchRun {
        wrmsse: report.total.wrmsse.unwrap(),
        baseline_wrmsse: baseline,
        dce,
        best_val_total: out.best_val_total,
        stats: out.stats,
    }
}
