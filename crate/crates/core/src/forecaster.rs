//! Per-node recurrent base forecasters and the global refinement layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{ForecastDist, GaussianParams, PoissonParams};
use crate::error::{Error, Result};
use crate::gru::{NetCache, NetShape, NodeNet};
use crate::parallel::{map_indexed, Execution};
use crate::sparsity::SparsityLabels;

/// Floor applied to Poisson rates produced by the model.
pub const RATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Dense,
    Sparse,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Dense => "dense",
            NodeKind::Sparse => "sparse",
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Base distribution parameters of one node over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseParams {
    Dense { mu: Vec<f64>, sigma: Vec<f64> },
    Sparse { lambda: Vec<f64> },
}

impl BaseParams {
    pub fn mean(&self, step: usize) -> f64 {
        match self {
            BaseParams::Dense { mu, .. } => mu[step],
            BaseParams::Sparse { lambda } => lambda[step],
        }
    }
}

/// Maps raw head outputs to base parameters: `(mu, exp(s))` for dense
/// nodes, `softplus(l) + 1e-6` for sparse nodes.
pub fn base_forecast(outputs: &[f64], kind: NodeKind, horizon: usize) -> BaseParams {
    match kind {
        NodeKind::Dense => BaseParams::Dense {
            mu: outputs[..horizon].to_vec(),
            sigma: outputs[horizon..2 * horizon].iter().map(|s| s.exp()).collect(),
        },
        NodeKind::Sparse => BaseParams::Sparse {
            lambda: outputs[..horizon]
                .iter()
                .map(|&l| softplus(l) + RATE_FLOOR)
                .collect(),
        },
    }
}

/// Gradient w.r.t. head outputs given gradients w.r.t. base means (`d_mean`)
/// and, for dense nodes, base sigmas (`d_sigma`).
pub fn base_backward(
    outputs: &[f64],
    kind: NodeKind,
    horizon: usize,
    d_mean: &[f64],
    d_sigma: &[f64],
) -> Vec<f64> {
    match kind {
        NodeKind::Dense => {
            let mut d = d_mean.to_vec();
            d.extend((0..horizon).map(|s| d_sigma[s] * outputs[horizon + s].exp()));
            d
        }
        NodeKind::Sparse => (0..horizon)
            .map(|s| d_mean[s] * sigmoid(outputs[s]))
            .collect(),
    }
}

/// Global refinement parameters. Matrices are row-major with one row per
/// node; `v2` has one column per dense node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementParams {
    pub n: usize,
    pub d: usize,
    pub w_hat: Vec<f64>,
    pub w: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl RefinementParams {
    /// Start near the base forecasts: `w_hat = 2`, rows of `W` uniform
    /// `1/N`, `V1 = V2 = b = 0`.
    pub fn init(n: usize, d: usize, c: f64) -> Self {
        RefinementParams {
            n,
            d,
            w_hat: vec![2.0; n],
            w: vec![1.0 / n as f64; n * n],
            v1: vec![0.0; n * n],
            v2: vec![0.0; n * d],
            b: vec![0.0; n],
            c,
        }
    }

    pub fn zeros_like(&self) -> Self {
        RefinementParams {
            n: self.n,
            d: self.d,
            w_hat: vec![0.0; self.n],
            w: vec![0.0; self.n * self.n],
            v1: vec![0.0; self.n * self.n],
            v2: vec![0.0; self.n * self.d],
            b: vec![0.0; self.n],
            c: self.c,
        }
    }

    pub fn groups(&self) -> [&Vec<f64>; 5] {
        [&self.w_hat, &self.w, &self.v1, &self.v2, &self.b]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w_hat,
            &mut self.w,
            &mut self.v1,
            &mut self.v2,
            &mut self.b,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.c > 0.0
            && self.w_hat.len() == self.n
            && self.w.len() == self.n * self.n
            && self.v1.len() == self.n * self.n
            && self.v2.len() == self.n * self.d
            && self.b.len() == self.n;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("refinement parameter shapes are inconsistent"))
        }
    }
}

/// `mu_hat_i = g_i mu_i + (1 - g_i) w_i . mu` with `g_i = sigmoid(w_hat_i)`;
/// entries flagged in `sparse` are floored at [`RATE_FLOOR`].
pub fn refine_means(mu: &[f64], rp: &RefinementParams, sparse: &[bool]) -> Vec<f64> {
    (0..rp.n)
        .map(|i| {
            let g = sigmoid(rp.w_hat[i]);
            let row = &rp.w[i * rp.n..(i + 1) * rp.n];
            let mix: f64 = row.iter().zip(mu).map(|(a, b)| a * b).sum();
            let v = g * mu[i] + (1.0 - g) * mix;
            if sparse[i] {
                v.max(RATE_FLOOR)
            } else {
                v
            }
        })
        .collect()
}

fn sigma_gate_input(mu: &[f64], sigma: &[f64], rp: &RefinementParams, i: usize) -> f64 {
    let v1 = &rp.v1[i * rp.n..(i + 1) * rp.n];
    let v2 = &rp.v2[i * rp.d..(i + 1) * rp.d];
    v1.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()
        + v2.iter().zip(sigma).map(|(a, b)| a * b).sum::<f64>()
        + rp.b[i]
}

/// `sigma_hat_k = c sigma_k sigmoid(v1_i . mu + v2_i . sigma + b_i)` for the
/// k-th dense node `dense[k] = i`. `mu` holds base means of all nodes.
pub fn refine_sigmas(mu: &[f64], sigma: &[f64], rp: &RefinementParams, dense: &[usize]) -> Vec<f64> {
    dense
        .iter()
        .enumerate()
        .map(|(k, &i)| rp.c * sigma[k] * sigmoid(sigma_gate_input(mu, sigma, rp, i)))
        .collect()
}

/// Backward pass through [`refine_means`] and [`refine_sigmas`] for one
/// horizon step. Accumulates parameter gradients into `grad` and returns
/// gradients w.r.t. the base means and base sigmas.
pub fn refine_backward(
    mu: &[f64],
    sigma: &[f64],
    d_mu_hat: &[f64],
    d_sigma_hat: &[f64],
    rp: &RefinementParams,
    sparse: &[bool],
    dense: &[usize],
    grad: &mut RefinementParams,
) -> (Vec<f64>, Vec<f64>) {
    let n = rp.n;
    let mut d_mu = vec![0.0; n];
    let mut d_sigma = vec![0.0; dense.len()];
    for i in 0..n {
        let g = sigmoid(rp.w_hat[i]);
        let row = &rp.w[i * n..(i + 1) * n];
        let mix: f64 = row.iter().zip(mu).map(|(a, b)| a * b).sum();
        let mut dv = d_mu_hat[i];
        if sparse[i] && g * mu[i] + (1.0 - g) * mix < RATE_FLOOR {
            dv = 0.0;
        }
        if dv == 0.0 {
            continue;
        }
        grad.w_hat[i] += dv * g * (1.0 - g) * (mu[i] - mix);
        d_mu[i] += dv * g;
        let gw = &mut grad.w[i * n..(i + 1) * n];
        for j in 0..n {
            gw[j] += dv * (1.0 - g) * mu[j];
            d_mu[j] += dv * (1.0 - g) * row[j];
        }
    }
    for (k, &i) in dense.iter().enumerate() {
        let s = sigmoid(sigma_gate_input(mu, sigma, rp, i));
        let ds = d_sigma_hat[k];
        d_sigma[k] += ds * rp.c * s;
        let da = ds * rp.c * sigma[k] * s * (1.0 - s);
        if da == 0.0 {
            continue;
        }
        grad.b[i] += da;
        for j in 0..n {
            grad.v1[i * n + j] += da * mu[j];
            d_mu[j] += da * rp.v1[i * n + j];
        }
        for l in 0..rp.d {
            grad.v2[i * rp.d + l] += da * sigma[l];
            d_sigma[l] += da * rp.v2[i * rp.d + l];
        }
    }
    (d_mu, d_sigma)
}

/// All trainable parameters of the model plus the frozen node kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub nets: Vec<NodeNet>,
    pub refinement: RefinementParams,
    pub kinds: Vec<NodeKind>,
    pub horizon: usize,
    pub window_len: usize,
    pub input_dim: usize,
}

/// Gradient container mirroring [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub nets: Vec<Vec<f64>>,
    pub refinement: RefinementParams,
}

impl ModelGrads {
    pub fn zeros(model: &ModelParams) -> Self {
        ModelGrads {
            nets: model.nets.iter().map(|n| vec![0.0; n.params.len()]).collect(),
            refinement: model.refinement.zeros_like(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.nets.iter_mut().flatten().for_each(|g| *g *= k);
        for g in self.refinement.groups_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let src = other.refinement.groups();
        for (a, b) in self.refinement.groups_mut().into_iter().zip(src) {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn clear_nets(&mut self) {
        self.nets.iter_mut().flatten().for_each(|g| *g = 0.0);
    }
}

/// Model architecture settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden: usize,
    pub horizon: usize,
    pub window_len: usize,
    pub input_dim: usize,
    pub c: f64,
}

/// Output of a forward pass over one window, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub outputs: Vec<Vec<f64>>,
    pub caches: Vec<Option<NetCache>>,
    /// Base means per step, `[step][node]`.
    pub base_mu: Vec<Vec<f64>>,
    /// Base sigmas per step, `[step][dense k]`.
    pub base_sigma: Vec<Vec<f64>>,
    /// Refined means per step, `[step][node]`.
    pub mu_hat: Vec<Vec<f64>>,
    /// Refined sigmas per step, `[step][dense k]`.
    pub sigma_hat: Vec<Vec<f64>>,
}

impl ModelParams {
    /// Seeded initialization. Head biases start at `initial_means` (and
    /// `initial_scales` for dense sigmas) so the untrained model forecasts
    /// the training level of each node.
    pub fn init(
        shape: ModelShape,
        labels: &SparsityLabels,
        initial_means: &[f64],
        initial_scales: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let n = labels.len();
        if initial_means.len() != n || initial_scales.len() != n {
            return Err(Error::invalid("initial statistics do not match node count"));
        }
        if shape.hidden == 0 || shape.horizon == 0 || shape.window_len == 0 || shape.input_dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(shape.c > 0.0) {
            return Err(Error::Config("refinement constant c must be positive".into()));
        }
        let kinds: Vec<NodeKind> = (0..n)
            .map(|i| {
                if labels.is_sparse(i) {
                    NodeKind::Sparse
                } else {
                    NodeKind::Dense
                }
            })
            .collect();
        let tau = shape.horizon;
        let nets = (0..n)
            .map(|i| {
                let outputs = match kinds[i] {
                    NodeKind::Dense => 2 * tau,
                    NodeKind::Sparse => tau,
                };
                let net_shape = NetShape {
                    input: shape.input_dim,
                    hidden: shape.hidden,
                    outputs,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let mut net = NodeNet::init(net_shape, &mut rng);
                let bias = net_shape.head_bias_range();
                let head_bias = &mut net.params[bias];
                match kinds[i] {
                    NodeKind::Dense => {
                        let scale = initial_scales[i].max(1e-3);
                        head_bias[..tau].iter_mut().for_each(|b| *b = initial_means[i]);
                        head_bias[tau..].iter_mut().for_each(|b| *b = scale.ln());
                    }
                    NodeKind::Sparse => {
                        let rate = initial_means[i].max(1e-3);
                        head_bias.iter_mut().for_each(|b| *b = inverse_softplus(rate));
                    }
                }
                net
            })
            .collect();
        let d = kinds.iter().filter(|k| **k == NodeKind::Dense).count();
        Ok(ModelParams {
            nets,
            refinement: RefinementParams::init(n, d, shape.c),
            kinds,
            horizon: tau,
            window_len: shape.window_len,
            input_dim: shape.input_dim,
        })
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn sparse_mask(&self) -> Vec<bool> {
        self.kinds.iter().map(|k| *k == NodeKind::Sparse).collect()
    }

    /// Hierarchy indices of dense nodes in order.
    pub fn dense_nodes(&self) -> Vec<usize> {
        (0..self.kinds.len())
            .filter(|&i| self.kinds[i] == NodeKind::Dense)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.params.len()).sum::<usize>()
            + self.refinement.groups().iter().map(|g| g.len()).sum::<usize>()
    }

    /// Full forward pass over one window per node (each `window_len *
    /// input_dim` values). `keep_caches` retains activations for backprop.
    pub fn forward_trace(
        &self,
        windows: &[Vec<f64>],
        keep_caches: bool,
        exec: Execution,
    ) -> Result<ForwardTrace> {
        let n = self.node_count();
        if windows.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} node windows, got {}",
                windows.len()
            )));
        }
        let runs = map_indexed(exec, n, |i| -> Result<(Vec<f64>, Option<NetCache>)> {
            if keep_caches {
                let (o, c) = self.nets[i].forward_cached(&windows[i])?;
                Ok((o, Some(c)))
            } else {
                let enc = self.nets[i].encode(&windows[i])?;
                Ok((self.nets[i].head(&enc), None))
            }
        });
        let mut outputs = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for r in runs {
            let (o, c) = r?;
            outputs.push(o);
            caches.push(c);
        }
        let tau = self.horizon;
        let base: Vec<BaseParams> = (0..n)
            .map(|i| base_forecast(&outputs[i], self.kinds[i], tau))
            .collect();
        let dense = self.dense_nodes();
        let sparse = self.sparse_mask();
        let mut trace = ForwardTrace {
            outputs,
            caches,
            base_mu: Vec::with_capacity(tau),
            base_sigma: Vec::with_capacity(tau),
            mu_hat: Vec::with_capacity(tau),
            sigma_hat: Vec::with_capacity(tau),
        };
        for s in 0..tau {
            let mu: Vec<f64> = base.iter().map(|b| b.mean(s)).collect();
            let sigma: Vec<f64> = dense
                .iter()
                .map(|&i| match &base[i] {
                    BaseParams::Dense { sigma, .. } => sigma[s],
                    BaseParams::Sparse { .. } => unreachable!("dense list holds only dense nodes"),
                })
                .collect();
            trace.mu_hat.push(refine_means(&mu, &self.refinement, &sparse));
            trace
                .sigma_hat
                .push(refine_sigmas(&mu, &sigma, &self.refinement, &dense));
            trace.base_mu.push(mu);
            trace.base_sigma.push(sigma);
        }
        Ok(trace)
    }

    /// Refined forecast distributions `[node][step]` from a trace.
    pub fn distributions(&self, trace: &ForwardTrace) -> Vec<Vec<ForecastDist>> {
        let dense = self.dense_nodes();
        let mut dense_pos = vec![usize::MAX; self.node_count()];
        for (k, &i) in dense.iter().enumerate() {
            dense_pos[i] = k;
        }
        (0..self.node_count())
            .map(|i| {
                (0..self.horizon)
                    .map(|s| match self.kinds[i] {
                        NodeKind::Dense => ForecastDist::Gaussian(GaussianParams {
                            mu: trace.mu_hat[s][i],
                            sigma: trace.sigma_hat[s][dense_pos[i]],
                        }),
                        NodeKind::Sparse => ForecastDist::Poisson(PoissonParams {
                            lambda: trace.mu_hat[s][i],
                        }),
                    })
                    .collect()
            })
            .collect()
    }

    /// Encode, apply heads, refine every horizon step; returns `[node][step]`.
    pub fn forward_all(&self, windows: &[Vec<f64>], exec: Execution) -> Result<Vec<Vec<ForecastDist>>> {
        let trace = self.forward_trace(windows, false, exec)?;
        Ok(self.distributions(&trace))
    }

    /// Backpropagates gradients w.r.t. refined parameters (`d_mu_hat[step][node]`,
    /// `d_sigma_hat[step][dense k]`) into `grad`. When `base` is false only
    /// the refinement parameters receive gradient.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_mu_hat: &[Vec<f64>],
        d_sigma_hat: &[Vec<f64>],
        base: bool,
        grad: &mut ModelGrads,
        exec: Execution,
    ) {
        let n = self.node_count();
        let tau = self.horizon;
        let dense = self.dense_nodes();
        let sparse = self.sparse_mask();
        let mut d_base_mu = vec![vec![0.0; tau]; n];
        let mut d_base_sigma = vec![vec![0.0; tau]; n];
        for s in 0..tau {
            let (dm, ds) = refine_backward(
                &trace.base_mu[s],
                &trace.base_sigma[s],
                &d_mu_hat[s],
                &d_sigma_hat[s],
                &self.refinement,
                &sparse,
                &dense,
                &mut grad.refinement,
            );
            for i in 0..n {
                d_base_mu[i][s] = dm[i];
            }
            for (k, &i) in dense.iter().enumerate() {
                d_base_sigma[i][s] = ds[k];
            }
        }
        if !base {
            return;
        }
        crate::parallel::for_each_mut(exec, &mut grad.nets, |i, g| {
            let d_out = base_backward(
                &trace.outputs[i],
                self.kinds[i],
                tau,
                &d_base_mu[i],
                &d_base_sigma[i],
            );
            let cache = trace.caches[i]
                .as_ref()
                .expect("forward_trace must keep caches for backward");
            self.nets[i].backward(cache, &d_out, g, false);
        });
    }
}
