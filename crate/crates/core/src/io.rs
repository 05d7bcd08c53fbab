//! CSV readers and writers for edges, panels, labels and forecasts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SeriesPanel};
use crate::sparsity::SparsityLabels;

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    parent: u32,
    child: u32,
}

pub fn read_edges_from<R: Read>(r: R) -> Result<Vec<(u32, u32)>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["parent", "child"])?;
    rdr.deserialize::<EdgeRow>()
        .map(|row| row.map(|e| (e.parent, e.child)).map_err(Error::from))
        .collect()
}

pub fn read_edges(path: &Path) -> Result<Vec<(u32, u32)>> {
    read_edges_from(std::fs::File::open(path)?)
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy> {
    Hierarchy::from_edges(&read_edges(path)?)
}

pub fn write_edges_to<W: Write>(w: W, edges: &[(u32, u32)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for &(parent, child) in edges {
        wtr.serialize(EdgeRow { parent, child })?;
    }
    if edges.is_empty() {
        wtr.write_record(["parent", "child"])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_edges(path: &Path, edges: &[(u32, u32)]) -> Result<()> {
    write_edges_to(std::fs::File::create(path)?, edges)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let got = rdr.headers()?;
    if got.iter().collect::<Vec<_>>() != want {
        return Err(Error::invalid(format!(
            "expected header `{}`, found `{}`",
            want.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    node: u32,
    t: u64,
    value: f64,
}

/// Long-format `node,t,value` panel, rows ordered by the hierarchy. Every
/// node must have a value at every `t` in `0..T`.
pub fn read_panel_from<R: Read>(r: R, h: &Hierarchy) -> Result<SeriesPanel> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["node", "t", "value"])?;
    let mut cells: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    let mut max_t = 0;
    for row in rdr.deserialize::<PanelRow>() {
        let row = row?;
        let i = h
            .index_of(row.node)
            .ok_or_else(|| Error::invalid(format!("panel node {} is not in the hierarchy", row.node)))?;
        if cells.insert((i, row.t), row.value).is_some() {
            return Err(Error::invalid(format!("duplicate cell node {} t {}", row.node, row.t)));
        }
        max_t = max_t.max(row.t);
    }
    if cells.is_empty() {
        return Err(Error::invalid("panel is empty"));
    }
    let t_len = max_t as usize + 1;
    let mut values = vec![vec![0.0; t_len]; h.len()];
    for (i, row) in values.iter_mut().enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            *v = *cells.get(&(i, t as u64)).ok_or_else(|| {
                Error::invalid(format!("panel is missing node {} at t {t}", h.id(i)))
            })?;
        }
    }
    SeriesPanel::new(values)
}

pub fn read_panel(path: &Path, h: &Hierarchy) -> Result<SeriesPanel> {
    read_panel_from(std::fs::File::open(path)?, h)
}

pub fn write_panel_to<W: Write>(w: W, panel: &SeriesPanel, h: &Hierarchy) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["node", "t", "value"])?;
    for i in 0..panel.nodes() {
        for (t, v) in panel.row(i).iter().enumerate() {
            wtr.write_record([h.id(i).to_string(), t.to_string(), v.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_panel(path: &Path, panel: &SeriesPanel, h: &Hierarchy) -> Result<()> {
    write_panel_to(std::fs::File::create(path)?, panel, h)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    node: u32,
    p_value: f64,
    label: String,
}

pub fn write_labels_to<W: Write>(w: W, labels: &SparsityLabels, h: &Hierarchy) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["node", "p_value", "label"])?;
    for i in 0..h.len() {
        let label = if labels.is_sparse(i) { "sparse" } else { "dense" };
        wtr.write_record([h.id(i).to_string(), labels.p_values[i].to_string(), label.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &SparsityLabels, h: &Hierarchy) -> Result<()> {
    write_labels_to(std::fs::File::create(path)?, labels, h)
}

/// Reads a label file; the dense-parent rule is re-applied so a hand-edited
/// file cannot put a dense node under a sparse parent.
pub fn read_labels_from<R: Read>(r: R, h: &Hierarchy, alpha: f64) -> Result<SparsityLabels> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(&mut rdr, &["node", "p_value", "label"])?;
    let mut p_values = vec![None; h.len()];
    let mut sparse = BTreeSet::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row?;
        let i = h
            .index_of(row.node)
            .ok_or_else(|| Error::invalid(format!("label node {} is not in the hierarchy", row.node)))?;
        match row.label.as_str() {
            "sparse" => {
                sparse.insert(i);
            }
            "dense" => {}
            other => return Err(Error::invalid(format!("unknown label `{other}`"))),
        }
        p_values[i] = Some(row.p_value);
    }
    let p_values = p_values
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::invalid(format!("no label for node {}", h.id(i)))))
        .collect::<Result<Vec<f64>>>()?;
    let mut labels = SparsityLabels {
        sparse,
        p_values,
        alpha,
    };
    labels.propagate_dense(h);
    Ok(labels)
}

pub fn read_labels(path: &Path, h: &Hierarchy, alpha: f64) -> Result<SparsityLabels> {
    read_labels_from(std::fs::File::open(path)?, h, alpha)
}

/// One forecast per node and horizon step, in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub node: u32,
    /// Absolute time index being forecast.
    pub t: u64,
    /// 1-based horizon step.
    pub step: usize,
    /// `dense`, `sparse` or `point`.
    pub tag: String,
    pub mean: f64,
    /// Raw-unit sigma for dense rows; normalized-scale rate for sparse rows;
    /// zero for point forecasts.
    pub sigma_or_lambda: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn write_forecasts_to<W: Write>(w: W, rows: &[ForecastRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_forecasts(path: &Path, rows: &[ForecastRow]) -> Result<()> {
    write_forecasts_to(std::fs::File::create(path)?, rows)
}

pub fn read_forecasts_from<R: Read>(r: R) -> Result<Vec<ForecastRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRow>> {
    read_forecasts_from(std::fs::File::open(path)?)
}
