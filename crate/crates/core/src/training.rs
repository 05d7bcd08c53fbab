//! Loss assembly, pretraining and the main training loop.
//!
//! The refinement layer is updated on every batch. Base encoder/head
//! parameters are updated once every `base_update_period` batches; how the
//! batches in between are used is set by [`BaseUpdateMode`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::ForecastDist;
use crate::error::{Error, Result};
use crate::forecaster::{ForwardTrace, ModelGrads, ModelParams, ModelShape, NodeKind};
use crate::hierarchy::{Hierarchy, PhiMode, SeriesPanel};
use crate::loss::{dcrs_breakdown, dcrs_total_grad, likelihood_loss_grad};
use crate::parallel::{map_indexed, Execution};

/// How base parameters learn between their periodic updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseUpdateMode {
    /// Base gradients are only computed on the batch that applies the
    /// update; the other batches backpropagate into the refinement layer
    /// alone.
    #[default]
    Sampled,
    /// Base gradients from every batch are summed and applied (averaged)
    /// every period.
    Accumulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the consistency loss.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    /// Base parameters update every this many batches.
    pub base_update_period: usize,
    pub base_update_mode: BaseUpdateMode,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub hidden: usize,
    pub window_len: usize,
    pub horizon: usize,
    /// Upper scale constant of the sigma refinement.
    pub refinement_c: f64,
    /// Dispersion-test threshold.
    pub alpha: f64,
    pub phi_mode: PhiMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            lr: 0.001,
            batch_size: 32,
            max_epochs: 200,
            pretrain_epochs: 50,
            base_update_period: 5,
            base_update_mode: BaseUpdateMode::Sampled,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            hidden: 60,
            window_len: 24,
            horizon: 6,
            refinement_c: 2.0,
            alpha: 0.1,
            phi_mode: PhiMode::LeafProportional,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be a finite nonnegative number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 || self.base_update_period == 0 || self.patience == 0 {
            return fail("batch_size, base_update_period and patience must be positive");
        }
        if self.hidden == 0 || self.window_len == 0 || self.horizon == 0 {
            return fail("hidden, window_len and horizon must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        if !(self.refinement_c > 0.0) {
            return fail("refinement_c must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn model_shape(&self, input_dim: usize) -> ModelShape {
        ModelShape {
            hidden: self.hidden,
            horizon: self.horizon,
            window_len: self.window_len,
            input_dim,
            c: self.refinement_c,
        }
    }
}

/// Sliding windows over a normalized panel. A window at `t` reads inputs
/// `[t - L, t)` and targets `[t, t + horizon)`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    panel: SeriesPanel,
    window_len: usize,
    horizon: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// First time step of the validation region.
    pub split: usize,
}

impl WindowSet {
    /// Temporal split: targets of training windows end before the last
    /// `val_fraction` of the series; validation windows forecast into it.
    pub fn new(panel: &SeriesPanel, window_len: usize, horizon: usize, val_fraction: f64) -> Result<Self> {
        if !panel.is_normalized() {
            return Err(Error::invalid("training windows need a normalized panel"));
        }
        let t_len = panel.len_t();
        let split = ((1.0 - val_fraction) * t_len as f64).floor() as usize;
        let train: Vec<usize> = (window_len..=split.saturating_sub(horizon)).collect();
        let val: Vec<usize> = (split.max(window_len)..=t_len.saturating_sub(horizon)).collect();
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(format!(
                "series of length {t_len} is too short for window {window_len}, horizon {horizon} \
                 and validation fraction {val_fraction}"
            )));
        }
        Ok(WindowSet {
            panel: panel.clone(),
            window_len,
            horizon,
            train,
            val,
            split,
        })
    }

    pub fn panel(&self) -> &SeriesPanel {
        &self.panel
    }

    pub fn input_dim(&self) -> usize {
        1 + self.panel.covariate_count()
    }

    /// Row-major `(L, input_dim)` inputs for every node.
    pub fn inputs(&self, t: usize) -> Vec<Vec<f64>> {
        window_inputs(&self.panel, t, self.window_len)
    }

    /// Targets `[node][step]`.
    pub fn targets(&self, t: usize) -> Vec<Vec<f64>> {
        (0..self.panel.nodes())
            .map(|i| self.panel.row(i)[t..t + self.horizon].to_vec())
            .collect()
    }
}

/// Inputs of the window ending just before `t`, one row-major block per node.
pub fn window_inputs(panel: &SeriesPanel, t: usize, window_len: usize) -> Vec<Vec<f64>> {
    let f = panel.covariate_count();
    (0..panel.nodes())
        .map(|i| {
            let mut w = Vec::with_capacity(window_len * (1 + f));
            for step in t - window_len..t {
                w.push(panel.row(i)[step]);
                if let Some(c) = panel.covariates() {
                    w.extend_from_slice(&c.data[i][step * f..(step + 1) * f]);
                }
            }
            w
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Negative log-likelihood, summed over nodes and steps, averaged over windows.
    pub ll: f64,
    pub dcrs: f64,
    /// `ll + gamma * dcrs`.
    pub total: f64,
    /// Consistency loss per internal node id.
    pub per_subtree: BTreeMap<u32, f64>,
}

/// Blames the first node whose base output is non-finite, since the
/// refinement spreads a bad value to every node.
fn non_finite_error(
    model: &ModelParams,
    h: &Hierarchy,
    trace: &ForwardTrace,
    nll: &[f64],
    dists: &[Vec<ForecastDist>],
) -> Error {
    let node = (0..model.node_count())
        .find(|&i| trace.outputs[i].iter().any(|v| !v.is_finite()))
        .or_else(|| {
            (0..model.node_count()).find(|&i| {
                !nll[i].is_finite()
                    || dists[i].iter().any(|d| !d.mean().is_finite() || !d.variance().is_finite())
            })
        })
        .map(|i| h.id(i));
    match node {
        Some(id) => Error::Numerical(format!("non-finite loss at node {id}")),
        None => Error::Numerical("non-finite consistency loss".into()),
    }
}

/// Loss and gradient of a batch of windows. Gradients are averaged over the
/// batch; `base_grads` controls whether encoder/head gradients are computed.
pub fn batch_loss_grad(
    model: &ModelParams,
    h: &Hierarchy,
    data: &WindowSet,
    windows: &[usize],
    gamma: f64,
    base_grads: bool,
    exec: Execution,
) -> Result<(LossBreakdown, ModelGrads)> {
    let mut grads = ModelGrads::zeros(model);
    let mut out = LossBreakdown::default();
    let inv_b = 1.0 / windows.len() as f64;
    let dense = model.dense_nodes();
    let tau = model.horizon;
    for &t in windows {
        let trace = model.forward_trace(&data.inputs(t), base_grads, exec)?;
        let dists = model.distributions(&trace);
        let (nll, g_ll) = likelihood_loss_grad(&dists, &data.targets(t))?;
        let (dcrs, g_dc) = dcrs_total_grad(&dists, h)?;
        let ll: f64 = nll.iter().sum();
        if !ll.is_finite() || !dcrs.is_finite() {
            return Err(non_finite_error(model, h, &trace, &nll, &dists));
        }
        out.ll += ll * inv_b;
        out.dcrs += dcrs * inv_b;
        let (_, per) = dcrs_breakdown(&dists, h)?;
        for (i, v) in per {
            *out.per_subtree.entry(h.id(i)).or_default() += v * inv_b;
        }

        let mut d_mu = vec![vec![0.0; model.node_count()]; tau];
        let mut d_sigma = vec![vec![0.0; dense.len()]; tau];
        for s in 0..tau {
            for i in 0..model.node_count() {
                d_mu[s][i] = (g_ll[i][s].d_loc + gamma * g_dc[i][s].d_loc) * inv_b;
            }
            for (k, &i) in dense.iter().enumerate() {
                d_sigma[s][k] = (g_ll[i][s].d_scale + gamma * g_dc[i][s].d_scale) * inv_b;
            }
        }
        model.backward(&trace, &d_mu, &d_sigma, base_grads, &mut grads, exec);
    }
    out.total = out.ll + gamma * out.dcrs;
    Ok((out, grads))
}

/// Loss over a set of windows without gradients.
pub fn evaluate_windows(
    model: &ModelParams,
    h: &Hierarchy,
    data: &WindowSet,
    windows: &[usize],
    gamma: f64,
    exec: Execution,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    let inv = 1.0 / windows.len() as f64;
    for &t in windows {
        let trace = model.forward_trace(&data.inputs(t), false, exec)?;
        let dists = model.distributions(&trace);
        let (nll, _) = likelihood_loss_grad(&dists, &data.targets(t))?;
        let ll: f64 = nll.iter().sum();
        let (dcrs, per) = dcrs_breakdown(&dists, h)?;
        if !ll.is_finite() || !dcrs.is_finite() {
            return Err(non_finite_error(model, h, &trace, &nll, &dists));
        }
        out.ll += ll * inv;
        out.dcrs += dcrs * inv;
        for (i, v) in per {
            *out.per_subtree.entry(h.id(i)).or_default() += v * inv;
        }
    }
    out.total = out.ll + gamma * out.dcrs;
    Ok(out)
}

/// First and second moment estimates of Adam for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

struct Optimizer {
    nets: Vec<AdamState>,
    refinement: [AdamState; 5],
}

impl Optimizer {
    fn new(model: &ModelParams) -> Self {
        let g = model.refinement.groups();
        Optimizer {
            nets: model.nets.iter().map(|n| AdamState::new(n.params.len())).collect(),
            refinement: g.map(|v| AdamState::new(v.len())),
        }
    }

    fn step_refinement(&mut self, model: &mut ModelParams, grads: &ModelGrads, lr: f64) {
        let gs = grads.refinement.groups();
        for ((p, g), st) in model
            .refinement
            .groups_mut()
            .into_iter()
            .zip(gs)
            .zip(self.refinement.iter_mut())
        {
            adam_step(p, g, st, lr);
        }
    }

    fn step_nets(&mut self, model: &mut ModelParams, grads: &ModelGrads, lr: f64, exec: Execution) {
        let mut pairs: Vec<(&mut Vec<f64>, &mut AdamState)> = model
            .nets
            .iter_mut()
            .map(|n| &mut n.params)
            .zip(self.nets.iter_mut())
            .collect();
        crate::parallel::for_each_mut(exec, &mut pairs, |i, (p, st)| {
            adam_step(p, &grads.nets[i], st, lr);
        });
    }
}

/// Trains every node's encoder and head independently on squared error of
/// the base mean against the targets. The refinement layer is untouched.
pub fn pretrain(model: &ModelParams, data: &WindowSet, cfg: &TrainConfig, exec: Execution) -> Result<ModelParams> {
    let mut out = model.clone();
    if cfg.pretrain_epochs == 0 {
        return Ok(out);
    }
    let tau = model.horizon;
    let inputs: Vec<Vec<Vec<f64>>> = data.train.iter().map(|&t| data.inputs(t)).collect();
    let targets: Vec<Vec<Vec<f64>>> = data.train.iter().map(|&t| data.targets(t)).collect();
    let trained = map_indexed(exec, model.node_count(), |i| -> Result<Vec<f64>> {
        let mut net = model.nets[i].clone();
        let kind = model.kinds[i];
        let mut state = AdamState::new(net.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + i as u64);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut grad = vec![0.0; net.params.len()];
        for _ in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / (batch.len() * tau) as f64;
                for &w in batch {
                    let (o, cache) = net.forward_cached(&inputs[w][i])?;
                    let base = crate::forecaster::base_forecast(&o, kind, tau);
                    let d_mean: Vec<f64> = (0..tau)
                        .map(|s| 2.0 * (base.mean(s) - targets[w][i][s]) * scale)
                        .collect();
                    if d_mean.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "non-finite pretraining loss at node index {i}"
                        )));
                    }
                    let d_out =
                        crate::forecaster::base_backward(&o, kind, tau, &d_mean, &vec![0.0; tau]);
                    net.backward(&cache, &d_out, &mut grad, false);
                }
                adam_step(&mut net.params, &grad, &mut state, cfg.lr);
            }
        }
        Ok(net.params)
    });
    for (net, params) in out.nets.iter_mut().zip(trained) {
        net.params = params.map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(m),
            other => other,
        })?;
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ll: f64,
    pub dcrs: f64,
    pub total: f64,
    pub val_total: f64,
    /// Consistency error of the validation forecasts.
    pub dce: f64,
    /// Lowest `val_total` seen so far.
    pub best_val_total: f64,
}

/// Counters collected while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub batches: u64,
    pub base_updates: u64,
    pub refinement_updates: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub epoch_seconds: Vec<f64>,
}

impl TrainStats {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            return 0.0;
        }
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
    pub best_val_total: f64,
}

/// Main training loop with early stopping on validation total loss.
/// `start_epoch` offsets the epoch numbers in the log when resuming.
pub fn train(
    model: &ModelParams,
    h: &Hierarchy,
    data: &WindowSet,
    cfg: &TrainConfig,
    start_epoch: usize,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut opt = Optimizer::new(&current);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.train.clone();
    let mut stats = TrainStats::default();
    let mut log = Vec::new();
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut wait = 0;
    let mut pending = ModelGrads::zeros(&current);
    let mut pending_batches = 0u64;
    let k = cfg.base_update_period as u64;

    for e in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            stats.batches += 1;
            let update_base = stats.batches % k == 0;
            let need_base = match cfg.base_update_mode {
                BaseUpdateMode::Sampled => update_base,
                BaseUpdateMode::Accumulated => true,
            };
            let (loss, grads) = batch_loss_grad(&current, h, data, batch, cfg.gamma, need_base, exec)
                .map_err(|err| match err {
                    Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {})", start_epoch + e + 1)),
                    other => other,
                })?;
            opt.step_refinement(&mut current, &grads, cfg.lr);
            stats.refinement_updates += 1;
            if need_base {
                pending.add(&grads);
                pending_batches += 1;
            }
            if update_base {
                if pending_batches > 1 {
                    pending.scale(1.0 / pending_batches as f64);
                }
                opt.step_nets(&mut current, &pending, cfg.lr, exec);
                stats.base_updates += 1;
                pending.clear_nets();
                pending_batches = 0;
            }
            let w = batch.len() as f64 / order.len() as f64;
            epoch_loss.ll += loss.ll * w;
            epoch_loss.dcrs += loss.dcrs * w;
            epoch_loss.total += loss.total * w;
        }
        let val = evaluate_windows(&current, h, data, &data.val, cfg.gamma, exec)?;
        stats.epoch_seconds.push(started.elapsed().as_secs_f64());
        stats.epochs_run += 1;
        let epoch = start_epoch + e + 1;
        if val.total < best_val {
            best_val = val.total;
            best = current.clone();
            stats.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
        }
        log.push(EpochLog {
            epoch,
            ll: epoch_loss.ll,
            dcrs: epoch_loss.dcrs,
            total: epoch_loss.total,
            val_total: val.total,
            dce: val.dcrs,
            best_val_total: best_val,
        });
        log::debug!(
            "epoch {epoch}: train {:.5} (ll {:.5}, dcrs {:.5}) val {:.5}",
            epoch_loss.total,
            epoch_loss.ll,
            epoch_loss.dcrs,
            val.total
        );
        if wait >= cfg.patience {
            break;
        }
    }
    if stats.epochs_run == 0 {
        best_val = evaluate_windows(&current, h, data, &data.val, cfg.gamma, exec)?.total;
    }
    Ok(TrainOutcome {
        model: best,
        log,
        stats,
        best_val_total: best_val,
    })
}

/// Training log as CSV with header `epoch,ll,dcrs,total,val_total,dce`.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,ll,dcrs,total,val_total,dce\n");
    for r in log {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.ll, r.dcrs, r.total, r.val_total, r.dce
        ));
    }
    s
}

/// Per-node mean and standard deviation of the training region, used to
/// seed head biases.
pub fn node_statistics(data: &WindowSet) -> (Vec<f64>, Vec<f64>) {
    let p = data.panel();
    (0..p.nodes())
        .map(|i| {
            let xs = &p.row(i)[..data.split];
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            (m, v.sqrt())
        })
        .unzip()
}

/// Kind of every node, for reporting.
pub fn kinds_of(model: &ModelParams) -> Vec<NodeKind> {
    model.kinds.clone()
}
