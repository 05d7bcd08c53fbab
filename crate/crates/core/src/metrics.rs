//! Point and probabilistic accuracy metrics, per node, per level and total.

use serde::{Deserialize, Serialize};

use crate::distributions::{crps_gaussian, ForecastDist};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SeriesPanel};

/// Root mean squared scaled error against the one-step naive forecast of
/// the training history.
pub fn rmsse(train: &[f64], truth: &[f64], pred: &[f64]) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::invalid("rmsse needs at least two training values"));
    }
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid("truth and prediction lengths differ"));
    }
    let denom = train.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (train.len() - 1) as f64;
    if !(denom > 0.0) {
        return Err(Error::Degenerate("flat training history".into()));
    }
    let mse = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok((mse / denom).sqrt())
}

/// Weighted mean of per-node RMSSE with weights proportional to training means.
pub fn wrmsse(rmsse: &[f64], train_means: &[f64]) -> Result<f64> {
    if rmsse.len() != train_means.len() || rmsse.is_empty() {
        return Err(Error::invalid("wrmsse inputs must be nonempty and aligned"));
    }
    let total: f64 = train_means.iter().sum();
    if !(total > 0.0) || train_means.iter().any(|w| *w < 0.0) {
        return Err(Error::Degenerate("wrmsse weights are all zero".into()));
    }
    Ok(rmsse.iter().zip(train_means).map(|(r, w)| r * w / total).sum())
}

fn crps(y: f64, d: &ForecastDist) -> f64 {
    let g = d.to_gaussian();
    if g.sigma == 0.0 {
        (y - g.mu).abs()
    } else {
        crps_gaussian(y, &g)
    }
}

/// Mean Gaussian CRPS over the horizon divided by the training mean.
/// Count forecasts go through their normal approximation.
pub fn normalized_crps(truth: &[f64], dists: &[ForecastDist], train_mean: f64) -> Result<f64> {
    if truth.len() != dists.len() || truth.is_empty() {
        return Err(Error::invalid("truth and forecast lengths differ"));
    }
    if !(train_mean > 0.0) {
        return Err(Error::Degenerate(format!("training mean {train_mean} is not positive")));
    }
    let mean = truth.iter().zip(dists).map(|(y, d)| crps(*y, d)).sum::<f64>() / truth.len() as f64;
    Ok(mean / train_mean)
}

/// Root mean squared error across nodes at each horizon step. Inputs are
/// `[node][step]`.
pub fn rmse_per_step(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Vec<f64>> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::invalid("truth and prediction node counts differ"));
    }
    let tau = truth[0].len();
    if truth.iter().chain(pred).any(|r| r.len() != tau) {
        return Err(Error::invalid("ragged horizon"));
    }
    Ok((0..tau)
        .map(|s| {
            let se: f64 = truth.iter().zip(pred).map(|(y, p)| (y[s] - p[s]).powi(2)).sum();
            (se / truth.len() as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: u32,
    pub level: usize,
    pub train_mean: f64,
    /// `None` when the training history is flat.
    pub rmsse: Option<f64>,
    /// `None` without distributional forecasts or with a zero training mean.
    pub ncrps: Option<f64>,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub nodes: usize,
    pub wrmsse: Option<f64>,
    pub ncrps: Option<f64>,
    pub rmse: Vec<f64>,
    pub excluded_rmsse: usize,
    pub excluded_ncrps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalMetrics {
    pub wrmsse: Option<f64>,
    pub ncrps: Option<f64>,
    pub dce: Option<f64>,
    pub rmse: Vec<f64>,
    pub excluded_rmsse: usize,
    pub excluded_ncrps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_node: Vec<NodeMetrics>,
    pub per_level: Vec<LevelMetrics>,
    pub total: TotalMetrics,
}

/// `(wrmsse, mean ncrps, rmse per step, nodes without rmsse, nodes without ncrps)`.
type Summary = (Option<f64>, Option<f64>, Vec<f64>, usize, usize);

fn summarize(nodes: &[&NodeMetrics], truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Summary> {
    let rated: Vec<&&NodeMetrics> = nodes.iter().filter(|m| m.rmsse.is_some()).collect();
    let w = if rated.is_empty() {
        None
    } else {
        let r: Vec<f64> = rated.iter().map(|m| m.rmsse.unwrap()).collect();
        let means: Vec<f64> = rated.iter().map(|m| m.train_mean).collect();
        match wrmsse(&r, &means) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    };
    let scored: Vec<f64> = nodes.iter().filter_map(|m| m.ncrps).collect();
    let c = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    };
    let rmse = rmse_per_step(truth, pred)?;
    Ok((w, c, rmse, nodes.len() - rated.len(), nodes.len() - scored.len()))
}

/// Full report on raw units. `train` is the raw history used for scaling,
/// `truth` and `means` are `[node][step]`. `dists` adds CRPS and `dce` is
/// passed through to the totals.
pub fn evaluate(
    h: &Hierarchy,
    train: &SeriesPanel,
    truth: &[Vec<f64>],
    means: &[Vec<f64>],
    dists: Option<&[Vec<ForecastDist>]>,
    dce: Option<f64>,
) -> Result<EvalReport> {
    let n = h.len();
    if train.nodes() != n || truth.len() != n || means.len() != n || dists.is_some_and(|d| d.len() != n) {
        return Err(Error::invalid("evaluation inputs do not match the hierarchy"));
    }
    let mut per_node = Vec::with_capacity(n);
    for i in 0..n {
        let hist = train.row(i);
        let train_mean = hist.iter().sum::<f64>() / hist.len() as f64;
        let r = match rmsse(hist, &truth[i], &means[i]) {
            Ok(v) => Some(v),
            Err(Error::Degenerate(_)) => {
                log::warn!("node {}: flat training history, excluded from rmsse", h.id(i));
                None
            }
            Err(e) => return Err(e),
        };
        let c = match dists {
            Some(d) => match normalized_crps(&truth[i], &d[i], train_mean) {
                Ok(v) => Some(v),
                Err(Error::Degenerate(_)) => {
                    log::warn!("node {}: zero training mean, excluded from crps", h.id(i));
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let rmse = truth[i].iter().zip(&means[i]).map(|(y, p)| (y - p).abs()).collect();
        per_node.push(NodeMetrics {
            node: h.id(i),
            level: h.level(i),
            train_mean,
            rmsse: r,
            ncrps: c,
            rmse,
        });
    }
    let mut per_level = Vec::new();
    for level in 0..=h.depth() {
        let idx = h.nodes_at_level(level);
        if idx.is_empty() {
            continue;
        }
        let nodes: Vec<&NodeMetrics> = idx.iter().map(|&i| &per_node[i]).collect();
        let t: Vec<Vec<f64>> = idx.iter().map(|&i| truth[i].clone()).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| means[i].clone()).collect();
        let (w, c, rmse, er, ec) = summarize(&nodes, &t, &p)?;
        per_level.push(LevelMetrics {
            level,
            nodes: idx.len(),
            wrmsse: w,
            ncrps: c,
            rmse,
            excluded_rmsse: er,
            excluded_ncrps: ec,
        });
    }
    let all: Vec<&NodeMetrics> = per_node.iter().collect();
    let (w, c, rmse, er, ec) = summarize(&all, truth, means)?;
    Ok(EvalReport {
        per_node,
        per_level,
        total: TotalMetrics {
            wrmsse: w,
            ncrps: c,
            dce,
            rmse,
            excluded_rmsse: er,
            excluded_ncrps: ec,
        },
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat `level,metric,value` rows; missing metrics are omitted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,metric,value\n");
        let mut row = |level: &str, metric: &str, v: Option<f64>| {
            if let Some(v) = v {
                s.push_str(&format!("{level},{metric},{v}\n"));
            }
        };
        let block = |row: &mut dyn FnMut(&str, &str, Option<f64>), level: &str, w, c, rmse: &[f64]| {
            row(level, "wrmsse", w);
            row(level, "ncrps", c);
            for (k, v) in rmse.iter().enumerate() {
                row(level, &format!("rmse_step{}", k + 1), Some(*v));
            }
        };
        for l in &self.per_level {
            block(&mut row, &l.level.to_string(), l.wrmsse, l.ncrps, &l.rmse);
        }
        block(&mut row, "total", self.total.wrmsse, self.total.ncrps, &self.total.rmse);
        row("total", "dce", self.total.dce);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{GaussianParams, PoissonParams};

    fn g(mu: f64, sigma: f64) -> ForecastDist {
        ForecastDist::Gaussian(GaussianParams { mu, sigma })
    }

    #[test]
    fn rmsse_examples() {
        assert_eq!(rmsse(&[1.0, 2.0, 4.0], &[3.0, 1.0], &[3.0, 1.0]).unwrap(), 0.0);
        let v = rmsse(&[1.0, 2.0, 3.0], &[5.0, 5.0], &[4.0, 5.0]).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
        let k = 13.0;
        let w = rmsse(&[k, 2.0 * k, 3.0 * k], &[5.0 * k, 5.0 * k], &[4.0 * k, 5.0 * k]).unwrap();
        assert!((w - v).abs() < 1e-12);
        assert!(matches!(rmsse(&[2.0, 2.0, 2.0], &[1.0], &[1.0]), Err(Error::Degenerate(_))));
        assert!(rmsse(&[2.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn wrmsse_examples() {
        assert!((wrmsse(&[0.4, 0.8], &[10.0, 30.0]).unwrap() - 0.7).abs() < 1e-12);
        assert!((wrmsse(&[0.4, 0.8], &[5.0, 5.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(wrmsse(&[0.3], &[2.0]).unwrap(), 0.3);
        assert!(wrmsse(&[0.3], &[0.0]).is_err());
    }

    #[test]
    fn ncrps_examples() {
        let v = normalized_crps(&[2.0], &[g(2.0, 1.0)], 4.0).unwrap();
        assert!((v - 0.233695 / 4.0).abs() < 1e-6);
        assert_eq!(normalized_crps(&[2.0], &[g(2.0, 0.0)], 4.0).unwrap(), 0.0);
        let a = normalized_crps(&[2.0, 3.0], &[g(1.0, 1.0), g(2.5, 0.3)], 2.0).unwrap();
        let b = normalized_crps(&[2.0, 3.0], &[g(1.0, 1.0), g(2.5, 0.3)], 4.0).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-12);
        let p = ForecastDist::Poisson(PoissonParams { lambda: 4.0 });
        let via = normalized_crps(&[3.0], &[p], 1.0).unwrap();
        assert!((via - crps_gaussian(3.0, &GaussianParams { mu: 4.0, sigma: 2.0 })).abs() < 1e-12);
        assert!(normalized_crps(&[2.0], &[g(2.0, 1.0)], 0.0).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_per_step(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(rmse_per_step(&[vec![3.0, 4.0]], &[vec![0.0, 0.0]]).unwrap(), vec![3.0, 4.0]);
        let v = rmse_per_step(&[vec![3.0], vec![4.0]], &[vec![0.0], vec![0.0]]).unwrap();
        assert!((v[0] - 5.0 / 2f64.sqrt()).abs() < 1e-12);
    }
}
