//! End-to-end fitting and forecasting on raw panels.

use serde::{Deserialize, Serialize};

use crate::distributions::{forecast_quantile, ForecastDist, GaussianParams, PoissonParams, ScaledPoisson};
use crate::error::{Error, Result};
use crate::forecaster::{ModelParams, NodeKind};
use crate::hierarchy::{denormalize_forecasts, normalize_panel, Hierarchy, SeriesPanel};
use crate::io::{ForecastRow, QUANTILE_LEVELS};
use crate::parallel::Execution;
use crate::sparsity::{classify_nodes_with, SparsityLabels};
use crate::training::{node_statistics, pretrain, train, EpochLog, TrainConfig, TrainStats, WindowSet};

/// Versioned model file: parameters, frozen labels, tree and config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub edges: Vec<(u32, u32)>,
    pub labels: SparsityLabels,
    pub config: TrainConfig,
    pub model: ModelParams,
    pub epochs_completed: usize,
    pub best_val_total: Option<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Ok(Hierarchy::from_edges(&self.edges)?.with_phi(self.config.phi_mode))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.model.refinement.validate()?;
        if ck.model.node_count() != ck.labels.len() {
            return Err(Error::invalid("checkpoint labels do not match the model"));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub labels: SparsityLabels,
    pub model: ModelParams,
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
    pub best_val_total: f64,
}

/// Labels (computed on the raw panel unless given), normalized windows and
/// an initialized model.
pub fn prepare(
    h: &Hierarchy,
    raw: &SeriesPanel,
    labels: Option<SparsityLabels>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(SparsityLabels, WindowSet, ModelParams)> {
    cfg.validate()?;
    let labels = match labels {
        Some(l) => l,
        None => classify_nodes_with(raw, h, cfg.alpha, exec)?,
    };
    let norm = normalize_panel(raw, h)?;
    let data = WindowSet::new(&norm, cfg.window_len, cfg.horizon, cfg.val_fraction)?;
    let (means, scales) = node_statistics(&data);
    let model = ModelParams::init(cfg.model_shape(data.input_dim()), &labels, &means, &scales, cfg.seed)?;
    Ok((labels, data, model))
}

/// Classify, pretrain and train on a raw panel. `h` should already carry
/// the configured aggregation weights.
pub fn fit(
    h: &Hierarchy,
    raw: &SeriesPanel,
    labels: Option<SparsityLabels>,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<FitOutcome> {
    let (labels, data, model) = prepare(h, raw, labels, cfg, exec)?;
    let model = pretrain(&model, &data, cfg, exec)?;
    let out = train(&model, h, &data, cfg, 0, exec)?;
    Ok(FitOutcome {
        labels,
        model: out.model,
        log: out.log,
        stats: out.stats,
        best_val_total: out.best_val_total,
    })
}

/// Normalized-scale forecasts `[node][step]` from the window of raw values
/// ending just before `origin`.
pub fn forecast_at(
    model: &ModelParams,
    h: &Hierarchy,
    raw: &SeriesPanel,
    origin: usize,
    exec: Execution,
) -> Result<Vec<Vec<ForecastDist>>> {
    if origin < model.window_len || origin > raw.len_t() {
        return Err(Error::invalid(format!(
            "forecast origin {origin} needs {} values of history within a series of length {}",
            model.window_len,
            raw.len_t()
        )));
    }
    if raw.covariate_count() + 1 != model.input_dim {
        return Err(Error::invalid("panel covariates do not match the model"));
    }
    let hist = raw.slice_time(origin - model.window_len, origin)?;
    let norm = normalize_panel(&hist, h)?;
    let windows = crate::training::window_inputs(&norm, model.window_len, model.window_len);
    model.forward_all(&windows, exec)
}

/// Forecast file rows in raw units. `normalized` is `[node][step]` from
/// [`forecast_at`]; `origin` is the first forecast time index.
pub fn forecast_rows(h: &Hierarchy, normalized: &[Vec<ForecastDist>], origin: usize) -> Result<Vec<ForecastRow>> {
    let raw = denormalize_forecasts(normalized, h);
    let mut rows = Vec::new();
    for i in 0..h.len() {
        for (s, d) in raw[i].iter().enumerate() {
            let q: Vec<f64> = QUANTILE_LEVELS
                .iter()
                .map(|&l| forecast_quantile(d, l))
                .collect::<Result<_>>()?;
            let (tag, sl) = match normalized[i][s] {
                ForecastDist::Gaussian(_) => (NodeKind::Dense, d.to_gaussian().sigma),
                ForecastDist::Poisson(p) => (NodeKind::Sparse, p.lambda),
                ForecastDist::ScaledPoisson(_) => {
                    return Err(Error::invalid("forecasts must be on the normalized scale"))
                }
            };
            rows.push(ForecastRow {
                node: h.id(i),
                t: (origin + s) as u64,
                step: s + 1,
                tag: tag.as_str().to_string(),
                mean: d.mean(),
                sigma_or_lambda: sl,
                q05: q[0],
                q25: q[1],
                q50: q[2],
                q75: q[3],
                q95: q[4],
            });
        }
    }
    Ok(rows)
}

/// Rows for point forecasts `[node][step]` in raw units.
pub fn point_rows(h: &Hierarchy, means: &[Vec<f64>], origin: usize) -> Vec<ForecastRow> {
    let mut rows = Vec::new();
    for (i, row) in means.iter().enumerate() {
        for (s, &m) in row.iter().enumerate() {
            rows.push(ForecastRow {
                node: h.id(i),
                t: (origin + s) as u64,
                step: s + 1,
                tag: "point".into(),
                mean: m,
                sigma_or_lambda: 0.0,
                q05: m,
                q25: m,
                q50: m,
                q75: m,
                q95: m,
            });
        }
    }
    rows
}

/// Forecasts read back from file, arranged by the hierarchy.
#[derive(Debug, Clone)]
pub struct ForecastTable {
    pub origin: usize,
    pub horizon: usize,
    /// Raw means `[node][step]`.
    pub means: Vec<Vec<f64>>,
    /// Raw-unit distributions; point forecasts become zero-width Gaussians.
    pub raw: Vec<Vec<ForecastDist>>,
    /// Normalized-scale distributions, absent for point forecasts.
    pub normalized: Option<Vec<Vec<ForecastDist>>>,
}

pub fn forecast_table(h: &Hierarchy, rows: &[ForecastRow]) -> Result<ForecastTable> {
    if rows.is_empty() {
        return Err(Error::invalid("forecast file is empty"));
    }
    let origin = rows
        .iter()
        .map(|r| (r.t as usize + 1).checked_sub(r.step))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::invalid("forecast step exceeds its time index"))?
        .into_iter()
        .min()
        .unwrap_or(0);
    let horizon = rows.iter().map(|r| r.step).max().unwrap_or(0);
    if rows.len() != h.len() * horizon {
        return Err(Error::invalid(format!(
            "expected {} forecast rows for {} nodes and horizon {horizon}, found {}",
            h.len() * horizon,
            h.len(),
            rows.len()
        )));
    }
    let mut slots: Vec<Vec<Option<&ForecastRow>>> = vec![vec![None; horizon]; h.len()];
    for r in rows {
        let i = h
            .index_of(r.node)
            .ok_or_else(|| Error::invalid(format!("forecast node {} is not in the hierarchy", r.node)))?;
        if r.step == 0 || r.t as usize + 1 != origin + r.step {
            return Err(Error::invalid(format!("misaligned forecast row for node {}", r.node)));
        }
        if slots[i][r.step - 1].replace(r).is_some() {
            return Err(Error::invalid(format!("duplicate forecast for node {} step {}", r.node, r.step)));
        }
    }
    let mut means = vec![vec![0.0; horizon]; h.len()];
    let mut raw = vec![Vec::with_capacity(horizon); h.len()];
    let mut norm = vec![Vec::with_capacity(horizon); h.len()];
    let mut all_dist = true;
    for i in 0..h.len() {
        let k = h.leaf_count(i) as f64;
        for s in 0..horizon {
            let r = slots[i][s].ok_or_else(|| Error::invalid("missing forecast row"))?;
            means[i][s] = r.mean;
            let (n, w) = match r.tag.as_str() {
                "dense" => {
                    let n = ForecastDist::Gaussian(GaussianParams::new(r.mean / k, r.sigma_or_lambda / k)?);
                    (Some(n), ForecastDist::Gaussian(GaussianParams::new(r.mean, r.sigma_or_lambda)?))
                }
                "sparse" => {
                    let n = ForecastDist::Poisson(PoissonParams::new(r.sigma_or_lambda)?);
                    let w = if k == 1.0 {
                        n
                    } else {
                        ForecastDist::ScaledPoisson(ScaledPoisson {
                            lambda: r.sigma_or_lambda,
                            scale: k,
                        })
                    };
                    (Some(n), w)
                }
                "point" => (None, ForecastDist::Gaussian(GaussianParams { mu: r.mean, sigma: 0.0 })),
                other => return Err(Error::invalid(format!("unknown forecast tag `{other}`"))),
            };
            raw[i].push(w);
            match n {
                Some(d) => norm[i].push(d),
                None => all_dist = false,
            }
        }
    }
    Ok(ForecastTable {
        origin,
        horizon,
        means,
        raw,
        normalized: all_dist.then_some(norm),
    })
}
