//! Sparse/dense node classification by the Poisson dispersion test.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::checked_gamma_ur;

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SeriesPanel};
use crate::parallel::{map_indexed, Execution};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispersion {
    /// `(n - 1) s^2 / mean`.
    pub statistic: f64,
    pub dof: u64,
    pub all_zero: bool,
}

/// Index of dispersion statistic; chi-square with `n - 1` degrees of
/// freedom under a Poisson null.
pub fn dispersion_statistic(series: &[f64]) -> Result<Dispersion> {
    let n = series.len();
    if n < 2 {
        return Err(Error::invalid("dispersion test needs at least two samples"));
    }
    if series.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("dispersion test needs finite nonnegative samples"));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let dof = (n - 1) as u64;
    if mean == 0.0 {
        return Ok(Dispersion {
            statistic: 0.0,
            dof,
            all_zero: true,
        });
    }
    let ss: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum();
    // (n - 1) * s^2 == sum of squares
    Ok(Dispersion {
        statistic: ss / mean,
        dof,
        all_zero: false,
    })
}

/// Survival function `P(chi2_dof >= x)`.
pub fn chi_square_sf(x: f64, dof: u64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::invalid("chi-square needs dof >= 1"));
    }
    if !x.is_finite() {
        return Err(Error::invalid(format!("chi-square argument {x} is not finite")));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    checked_gamma_ur(dof as f64 / 2.0, x / 2.0)
        .map_err(|e| Error::Numerical(format!("incomplete gamma: {e}")))
}

/// Two-sided dispersion-test p-value of a series.
pub fn dispersion_p_value(series: &[f64]) -> Result<(f64, bool)> {
    let d = dispersion_statistic(series)?;
    if d.all_zero {
        return Ok((1.0, true));
    }
    let sf = chi_square_sf(d.statistic, d.dof)?;
    Ok(((2.0 * sf.min(1.0 - sf)).clamp(0.0, 1.0), false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityLabels {
    /// Hierarchy indices of sparse nodes.
    pub sparse: BTreeSet<usize>,
    /// Per-node p-values, indexed like the hierarchy.
    pub p_values: Vec<f64>,
    pub alpha: f64,
}

impl SparsityLabels {
    pub fn is_sparse(&self, i: usize) -> bool {
        self.sparse.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.p_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_values.is_empty()
    }

    /// Labels from an explicit sparse set, then closed under the dense-parent rule.
    pub fn from_sparse_set(h: &Hierarchy, sparse: BTreeSet<usize>, alpha: f64) -> Self {
        let mut labels = SparsityLabels {
            sparse,
            p_values: vec![f64::NAN; h.len()],
            alpha,
        };
        labels.propagate_dense(h);
        labels
    }

    /// Forces every ancestor of a dense node to be dense.
    pub fn propagate_dense(&mut self, h: &Hierarchy) {
        for i in 0..h.len() {
            if !self.sparse.contains(&i) {
                for a in h.ancestors(i) {
                    self.sparse.remove(&a);
                }
            }
        }
    }

    /// True when no dense node has a sparse ancestor.
    pub fn is_closed(&self, h: &Hierarchy) -> bool {
        (0..h.len())
            .filter(|i| !self.sparse.contains(i))
            .all(|i| h.ancestors(i).iter().all(|a| !self.sparse.contains(a)))
    }

    pub fn dense_count(&self) -> usize {
        self.p_values.len() - self.sparse.len()
    }
}

/// Labels each node sparse when its dispersion test fails to reject the
/// Poisson null (`p >= alpha`) or its series is all zero, then makes every
/// ancestor of a dense node dense.
pub fn classify_nodes(panel: &SeriesPanel, h: &Hierarchy, alpha: f64) -> Result<SparsityLabels> {
    classify_nodes_with(panel, h, alpha, Execution::default())
}

pub fn classify_nodes_with(
    panel: &SeriesPanel,
    h: &Hierarchy,
    alpha: f64,
    exec: Execution,
) -> Result<SparsityLabels> {
    if panel.nodes() != h.len() {
        return Err(Error::invalid("panel and hierarchy sizes differ"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let tests = map_indexed(exec, h.len(), |i| dispersion_p_value(panel.row(i)));
    let mut p_values = Vec::with_capacity(h.len());
    let mut sparse = BTreeSet::new();
    for (i, t) in tests.into_iter().enumerate() {
        let (p, all_zero) = t?;
        if all_zero || p >= alpha {
            sparse.insert(i);
        }
        p_values.push(p);
    }
    let mut labels = SparsityLabels {
        sparse,
        p_values,
        alpha,
    };
    labels.propagate_dense(h);
    Ok(labels)
}
