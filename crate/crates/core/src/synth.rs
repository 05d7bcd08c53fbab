//! Seeded synthetic hierarchical count data and the 6-average baseline.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SeriesPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Children per node at each level; `[3, 3]` gives 1 + 3 + 9 nodes.
    pub branching: Vec<usize>,
    pub length: usize,
    pub base_rate: f64,
    pub seasonal_amp: f64,
    pub period: usize,
    /// Multiplier on the leaf rate.
    pub sparsity_scale: f64,
    /// Standard deviation of a shared log-normal shock on leaf rates per
    /// time step; makes aggregates overdispersed.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            branching: vec![3, 3],
            length: 120,
            base_rate: 4.0,
            seasonal_amp: 0.5,
            period: 12,
            sparsity_scale: 0.3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.branching.is_empty() || self.branching.contains(&0) {
            return fail("branching must be a nonempty list of positive counts");
        }
        if self.period == 0 || self.length < 2 * self.period {
            return fail("length must be at least twice the period");
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return fail("base_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.seasonal_amp) {
            return fail("seasonal_amp must lie in [0, 1)");
        }
        if !(self.sparsity_scale > 0.0 && self.sparsity_scale.is_finite()) {
            return fail("sparsity_scale must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be nonnegative");
        }
        Ok(())
    }

    /// Leaf Poisson rate at time `t` before the shared shock.
    pub fn leaf_rate(&self, t: usize) -> f64 {
        let phase = 2.0 * PI * t as f64 / self.period as f64;
        self.sparsity_scale * self.base_rate * (1.0 + self.seasonal_amp * phase.sin())
    }
}

/// Tree with ids assigned breadth first from the root (id 1).
pub fn build_tree(branching: &[usize]) -> Result<Hierarchy> {
    let mut edges = Vec::new();
    let mut frontier = vec![1u32];
    let mut next = 2u32;
    for &b in branching {
        let mut level = Vec::with_capacity(frontier.len() * b);
        for &p in &frontier {
            for _ in 0..b {
                edges.push((p, next));
                level.push(next);
                next += 1;
            }
        }
        frontier = level;
    }
    Hierarchy::from_edges(&edges)
}

/// Draws leaf counts and sums them up the tree.
pub fn generate(cfg: &SynthConfig) -> Result<(Hierarchy, SeriesPanel)> {
    cfg.validate()?;
    let h = build_tree(&cfg.branching)?;
    let n = h.len();
    let t_len = cfg.length;

    let mut shock_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shock_rng.set_stream(0);
    let shocks: Vec<f64> = (0..t_len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut shock_rng);
            (cfg.noise * e - 0.5 * cfg.noise * cfg.noise).exp()
        })
        .collect();

    let mut values = vec![vec![0.0; t_len]; n];
    for i in (0..n).filter(|&i| h.is_leaf(i)) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(h.id(i) as u64);
        for t in 0..t_len {
            let rate = cfg.leaf_rate(t) * shocks[t];
            let pois = Poisson::new(rate).map_err(|e| Error::Numerical(e.to_string()))?;
            values[i][t] = pois.sample(&mut rng);
        }
    }
    // children have larger ids, hence larger indices
    for i in (0..n).rev() {
        if !h.is_leaf(i) {
            for t in 0..t_len {
                values[i][t] = h.children(i).iter().map(|&c| values[c][t]).sum();
            }
        }
    }
    Ok((h, SeriesPanel::new(values)?))
}

pub const REFERENCE_WINDOW: usize = 6;

/// Mean of the last six values of each node, repeated over the horizon.
/// Returns `[node][step]`.
pub fn reference_forecast(panel: &SeriesPanel, horizon: usize) -> Result<Vec<Vec<f64>>> {
    if panel.len_t() < REFERENCE_WINDOW {
        return Err(Error::invalid("six-average needs at least six values"));
    }
    Ok((0..panel.nodes())
        .map(|i| {
            let row = panel.row(i);
            let m = row[row.len() - REFERENCE_WINDOW..].iter().sum::<f64>() / REFERENCE_WINDOW as f64;
            vec![m; horizon]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_shape() {
        let h = build_tree(&[3, 3]).unwrap();
        assert_eq!(h.len(), 13);
        assert_eq!(h.children(0).len(), 3);
        assert_eq!(h.depth(), 3);
        assert_eq!(h.leaf_count(0), 9);
        let h = build_tree(&[2, 1, 2]).unwrap();
        assert_eq!(h.len(), 1 + 2 + 2 + 4);
    }

    #[test]
    fn six_average_examples() {
        let p = SeriesPanel::new(vec![vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![5.0; 7]]).unwrap();
        let f = reference_forecast(&p, 3).unwrap();
        assert_eq!(f[0], vec![3.5; 3]);
        assert_eq!(f[1], vec![5.0; 3]);
        let short = SeriesPanel::new(vec![vec![1.0; 5]]).unwrap();
        assert!(reference_forecast(&short, 1).is_err());
    }

    #[test]
    fn validation() {
        let bad = SynthConfig {
            length: 20,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            branching: vec![],
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            seasonal_amp: 1.0,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
    }
}
