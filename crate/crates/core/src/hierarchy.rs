//! Tree structure, aggregation weights and panel normalization.
//!
//! Nodes carry external positive integer ids. Internally they are indexed
//! `0..N` in ascending id order, so the root (id 1) is always index 0 and
//! children lists are sorted by id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::distributions::{ForecastDist, GaussianParams, ScaledPoisson};
use crate::error::{Error, Result};

/// How the per-edge aggregation weights are derived from the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    /// `phi_ij = 1 / |C_i|`.
    Uniform,
    /// `phi_ij = leaves(j) / leaves(i)`; keeps normalized panels exactly coherent.
    #[default]
    LeafProportional,
}

impl std::str::FromStr for PhiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PhiMode::Uniform),
            "leaf-proportional" | "leaf_proportional" => Ok(PhiMode::LeafProportional),
            other => Err(Error::Config(format!("unknown phi mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    ids: Vec<u32>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    phi: Vec<Vec<f64>>,
    levels: Vec<usize>,
    leaf_counts: Vec<usize>,
    phi_mode: PhiMode,
}

impl Hierarchy {
    /// Builds and validates a tree from `(parent, child)` id pairs.
    ///
    /// The result uses [`PhiMode::LeafProportional`] weights; call
    /// [`Hierarchy::with_phi`] for the uniform variant.
    pub fn from_edges(edges: &[(u32, u32)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::EmptyHierarchy);
        }
        let mut parent_of: BTreeMap<u32, u32> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for &(p, c) in edges {
            for id in [p, c] {
                if id == 0 {
                    return Err(Error::InvalidNodeId(id));
                }
                ids.insert(id);
            }
            if p == c {
                return Err(Error::Cycle(p));
            }
            if let Some(&first) = parent_of.get(&c) {
                return Err(Error::DuplicateParent {
                    child: c,
                    first,
                    second: p,
                });
            }
            parent_of.insert(c, p);
        }

        let ids: Vec<u32> = ids.into_iter().collect();
        let index: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let roots: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|id| !parent_of.contains_key(id))
            .collect();
        match roots.len() {
            0 => return Err(Error::Cycle(ids[0])),
            1 => {}
            _ => return Err(Error::MultipleRoots(roots)),
        }
        if roots[0] != 1 {
            return Err(Error::RootNotOne(roots[0]));
        }

        let n = ids.len();
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for (&c, &p) in &parent_of {
            let (ci, pi) = (index[&c], index[&p]);
            parent[ci] = Some(pi);
            children[pi].push(ci);
        }
        for ch in &mut children {
            ch.sort_unstable();
        }

        // Breadth-first walk from the root; anything unreached sits on a cycle.
        let mut levels = vec![0usize; n];
        let mut order = Vec::with_capacity(n);
        levels[0] = 1;
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let i = order[head];
            head += 1;
            for &c in &children[i] {
                levels[c] = levels[i] + 1;
                order.push(c);
            }
        }
        if order.len() != n {
            let reached: BTreeSet<usize> = order.iter().copied().collect();
            let bad = (0..n).find(|i| !reached.contains(i)).unwrap();
            return Err(Error::Cycle(ids[bad]));
        }

        let mut leaf_counts = vec![0usize; n];
        for &i in order.iter().rev() {
            leaf_counts[i] = if children[i].is_empty() {
                1
            } else {
                children[i].iter().map(|&c| leaf_counts[c]).sum()
            };
        }

        let mut h = Hierarchy {
            ids,
            parent,
            children,
            phi: Vec::new(),
            levels,
            leaf_counts,
            phi_mode: PhiMode::LeafProportional,
        };
        h.fill_phi(PhiMode::LeafProportional);
        Ok(h)
    }

    /// Returns a copy with aggregation weights recomputed under `mode`.
    pub fn with_phi(&self, mode: PhiMode) -> Self {
        let mut h = self.clone();
        h.fill_phi(mode);
        h
    }

    fn fill_phi(&mut self, mode: PhiMode) {
        self.phi_mode = mode;
        self.phi = (0..self.len())
            .map(|i| {
                let ch = &self.children[i];
                ch.iter()
                    .map(|&j| match mode {
                        PhiMode::Uniform => 1.0 / ch.len() as f64,
                        PhiMode::LeafProportional => {
                            self.leaf_counts[j] as f64 / self.leaf_counts[i] as f64
                        }
                    })
                    .collect()
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> u32 {
        self.ids[i]
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Weights aligned with [`Hierarchy::children`].
    pub fn phi(&self, i: usize) -> &[f64] {
        &self.phi[i]
    }

    pub fn phi_mode(&self) -> PhiMode {
        self.phi_mode
    }

    /// Depth of node `i`; the root has level 1.
    pub fn level(&self, i: usize) -> usize {
        self.levels[i]
    }

    pub fn depth(&self) -> usize {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    pub fn leaf_count(&self, i: usize) -> usize {
        self.leaf_counts[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.is_leaf(i))
    }

    pub fn nodes_at_level(&self, level: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.levels[i] == level).collect()
    }

    /// Ancestors of `i`, nearest first.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent[i];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[p];
        }
        out
    }

    /// `(parent_id, child_id)` pairs in index order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        (0..self.len())
            .flat_map(|i| self.children[i].iter().map(move |&c| (self.ids[i], self.ids[c])))
            .collect()
    }
}

/// Aligned node-by-time matrix of observations, rows in hierarchy index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPanel {
    values: Vec<Vec<f64>>,
    time_index: Vec<i64>,
    covariates: Option<Covariates>,
    normalized: bool,
}

/// Optional exogenous channels, `features` values per node per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub features: usize,
    /// Indexed `[node][t * features + f]`.
    pub data: Vec<Vec<f64>>,
}

impl SeriesPanel {
    /// Raw panel with time labels `0..T`.
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let t = values.first().map_or(0, Vec::len);
        Self::with_time_index(values, (0..t as i64).collect())
    }

    pub fn with_time_index(values: Vec<Vec<f64>>, time_index: Vec<i64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("panel has no rows"));
        }
        let t = time_index.len();
        if t == 0 {
            return Err(Error::invalid("panel has no time steps"));
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != t {
                return Err(Error::invalid(format!(
                    "row {i} has {} values, expected {t}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::invalid(format!(
                    "row {i} contains a non-finite or negative value {v}"
                )));
            }
        }
        Ok(SeriesPanel {
            values,
            time_index,
            covariates: None,
            normalized: false,
        })
    }

    pub fn with_covariates(mut self, cov: Covariates) -> Result<Self> {
        if cov.data.len() != self.values.len()
            || cov
                .data
                .iter()
                .any(|row| row.len() != self.len_t() * cov.features)
        {
            return Err(Error::invalid("covariate tensor shape does not match panel"));
        }
        if cov.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariates must be finite"));
        }
        self.covariates = Some(cov);
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.values.len()
    }

    pub fn len_t(&self) -> usize {
        self.time_index.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.as_ref().map_or(0, |c| c.features)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Time steps `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len_t() {
            return Err(Error::invalid(format!(
                "time slice {start}..{end} out of range for length {}",
                self.len_t()
            )));
        }
        let covariates = self.covariates.as_ref().map(|c| Covariates {
            features: c.features,
            data: c
                .data
                .iter()
                .map(|row| row[start * c.features..end * c.features].to_vec())
                .collect(),
        });
        Ok(SeriesPanel {
            values: self.values.iter().map(|r| r[start..end].to_vec()).collect(),
            time_index: self.time_index[start..end].to_vec(),
            covariates,
            normalized: self.normalized,
        })
    }

    fn check_aligned(&self, h: &Hierarchy) -> Result<()> {
        if self.nodes() != h.len() {
            return Err(Error::invalid(format!(
                "panel has {} rows but the hierarchy has {} nodes",
                self.nodes(),
                h.len()
            )));
        }
        Ok(())
    }
}

/// Divides every node's series by its subtree leaf count.
///
/// Raw incoherence (a parent differing from the sum of its children) is
/// logged as a warning; use [`aggregate_check`] for the full diagnostic.
pub fn normalize_panel(panel: &SeriesPanel, h: &Hierarchy) -> Result<SeriesPanel> {
    if panel.normalized {
        return Err(Error::invalid("panel is already normalized"));
    }
    panel.check_aligned(h)?;
    let mut incoherent = 0usize;
    for i in h.internal_nodes() {
        for t in 0..panel.len_t() {
            let sum: f64 = h.children(i).iter().map(|&c| panel.values[c][t]).sum();
            let y = panel.values[i][t];
            if (y - sum).abs() > 1e-6 * (1.0 + y.abs()) {
                incoherent += 1;
            }
        }
    }
    if incoherent > 0 {
        log::warn!("{incoherent} raw cells differ from the sum of their children");
    }
    let mut out = panel.clone();
    for (i, row) in out.values.iter_mut().enumerate() {
        let scale = h.leaf_count(i) as f64;
        row.iter_mut().for_each(|v| *v /= scale);
    }
    out.normalized = true;
    Ok(out)
}

/// Inverse of [`normalize_panel`].
pub fn denormalize_panel(panel: &SeriesPanel, h: &Hierarchy) -> Result<SeriesPanel> {
    if !panel.normalized {
        return Err(Error::invalid("panel is not normalized"));
    }
    panel.check_aligned(h)?;
    let mut out = panel.clone();
    for (i, row) in out.values.iter_mut().enumerate() {
        let scale = h.leaf_count(i) as f64;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    out.normalized = false;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub node: u32,
    pub t: usize,
    /// `y_i - sum_j phi_ij y_j`.
    pub residual: f64,
}

/// Every `(node, t)` where the parent deviates from the weighted sum of its
/// children by more than `tol`.
pub fn aggregate_check(panel: &SeriesPanel, h: &Hierarchy, tol: f64) -> Result<Vec<Residual>> {
    panel.check_aligned(h)?;
    let mut out = Vec::new();
    for i in h.internal_nodes() {
        for t in 0..panel.len_t() {
            let agg: f64 = h
                .children(i)
                .iter()
                .zip(h.phi(i))
                .map(|(&c, &w)| w * panel.values[c][t])
                .sum();
            let residual = panel.values[i][t] - agg;
            if residual.abs() > tol {
                out.push(Residual {
                    node: h.id(i),
                    t,
                    residual,
                });
            }
        }
    }
    Ok(out)
}

/// Maps normalized-scale forecasts back to raw units by the leaf count of
/// each node. `dists` is indexed `[node][step]`.
pub fn denormalize_forecasts(dists: &[Vec<ForecastDist>], h: &Hierarchy) -> Vec<Vec<ForecastDist>> {
    dists
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let scale = h.leaf_count(i) as f64;
            row.iter().map(|d| scale_dist(d, scale)).collect()
        })
        .collect()
}

fn scale_dist(d: &ForecastDist, scale: f64) -> ForecastDist {
    if scale == 1.0 {
        return *d;
    }
    match *d {
        ForecastDist::Gaussian(g) => ForecastDist::Gaussian(GaussianParams {
            mu: g.mu * scale,
            sigma: g.sigma * scale,
        }),
        ForecastDist::Poisson(p) => ForecastDist::ScaledPoisson(ScaledPoisson {
            lambda: p.lambda,
            scale,
        }),
        ForecastDist::ScaledPoisson(p) => ForecastDist::ScaledPoisson(ScaledPoisson {
            lambda: p.lambda,
            scale: p.scale * scale,
        }),
    }
}
