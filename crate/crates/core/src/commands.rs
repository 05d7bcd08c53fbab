//! File-to-file operations behind the command-line subcommands. Each one
//! writes its artifacts plus a `<command>.manifest.json` into the output
//! directory.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, SeriesPanel};
use crate::io;
use crate::loss::dce_metric;
use crate::metrics::{evaluate, EvalReport};
use crate::parallel::Execution;
use crate::pipeline::{
    forecast_at, forecast_rows, forecast_table, point_rows, prepare, Checkpoint, CHECKPOINT_VERSION,
};
use crate::sparsity::{classify_nodes_with, SparsityLabels};
use crate::synth::{generate, reference_forecast, SynthConfig};
use crate::training::{log_to_csv, pretrain, train, TrainConfig};

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub data_paths: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 over the contents of every input file, in order.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Hex SHA-256 of the concatenated file contents, each prefixed by its length.
pub fn content_hash(paths: &[&Path]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Shared settings of a run.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub out: PathBuf,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub exec: Execution,
}

struct Recorder<'a> {
    ctx: &'a RunContext,
    command: &'static str,
    inputs: Vec<PathBuf>,
    started: u64,
}

impl<'a> Recorder<'a> {
    fn start(ctx: &'a RunContext, command: &'static str, inputs: &[&Path]) -> Result<Self> {
        std::fs::create_dir_all(&ctx.out)?;
        let mut all: Vec<PathBuf> = inputs.iter().map(|p| p.to_path_buf()).collect();
        if let Some(c) = &ctx.config_path {
            all.push(c.clone());
        }
        Ok(Recorder {
            ctx,
            command,
            inputs: all,
            started: unix_now(),
        })
    }

    fn finish(self, outputs: &[&Path]) -> Result<PathBuf> {
        let refs: Vec<&Path> = self.inputs.iter().map(PathBuf::as_path).collect();
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_path: self.ctx.config_path.as_ref().map(|p| p.display().to_string()),
            data_paths: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            seed: self.ctx.seed,
            input_hash: content_hash(&refs)?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let path = self.ctx.out.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}

fn load_inputs(edges: &Path, panel: &Path, cfg: Option<&TrainConfig>) -> Result<(Hierarchy, SeriesPanel)> {
    let mut h = io::read_hierarchy(edges)?;
    if let Some(c) = cfg {
        h = h.with_phi(c.phi_mode);
    }
    let p = io::read_panel(panel, &h)?;
    Ok((h, p))
}

fn training_slice(panel: &SeriesPanel, holdout: usize) -> Result<SeriesPanel> {
    if holdout >= panel.len_t() {
        return Err(Error::invalid(format!(
            "holdout {holdout} leaves no training data in a series of length {}",
            panel.len_t()
        )));
    }
    panel.slice_time(0, panel.len_t() - holdout)
}

/// Writes `labels.csv` with `node,p_value,label`.
pub fn cmd_classify(edges: &Path, panel: &Path, alpha: f64, holdout: usize, ctx: &RunContext) -> Result<PathBuf> {
    let rec = Recorder::start(ctx, "classify", &[edges, panel])?;
    let (h, p) = load_inputs(edges, panel, None)?;
    let p = training_slice(&p, holdout)?;
    let labels = classify_nodes_with(&p, &h, alpha, ctx.exec)?;
    let out = ctx.out.join("labels.csv");
    io::write_labels(&out, &labels, &h)?;
    log::info!(
        "{} of {} nodes sparse at alpha {alpha}",
        labels.sparse.len(),
        h.len()
    );
    rec.finish(&[&out])?;
    Ok(out)
}

fn read_or_classify(
    labels: Option<&Path>,
    h: &Hierarchy,
    p: &SeriesPanel,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<SparsityLabels> {
    match labels {
        Some(path) => io::read_labels(path, h, cfg.alpha),
        None => classify_nodes_with(p, h, cfg.alpha, exec),
    }
}

fn checkpoint(h: &Hierarchy, labels: SparsityLabels, cfg: &TrainConfig, model: crate::forecaster::ModelParams, epochs: usize, best: f64) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        edges: h.edges(),
        labels,
        config: cfg.clone(),
        model,
        epochs_completed: epochs,
        best_val_total: best.is_finite().then_some(best),
    }
}

/// Per-node point-forecast pretraining; writes `pretrained.json`.
pub fn cmd_pretrain(
    edges: &Path,
    panel: &Path,
    labels: Option<&Path>,
    cfg: &TrainConfig,
    holdout: usize,
    ctx: &RunContext,
) -> Result<PathBuf> {
    let mut inputs = vec![edges, panel];
    inputs.extend(labels);
    let rec = Recorder::start(ctx, "pretrain", &inputs)?;
    let (h, p) = load_inputs(edges, panel, Some(cfg))?;
    let p = training_slice(&p, holdout)?;
    let l = read_or_classify(labels, &h, &p, cfg, ctx.exec)?;
    let (l, data, model) = prepare(&h, &p, Some(l), cfg, ctx.exec)?;
    let model = pretrain(&model, &data, cfg, ctx.exec)?;
    let out = ctx.out.join("pretrained.json");
    checkpoint(&h, l, cfg, model, 0, f64::INFINITY).save(&out)?;
    rec.finish(&[&out])?;
    Ok(out)
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
}

/// Trains and writes `checkpoint.json` and `train_log.csv`. With `resume`
/// the model, labels and epoch counter come from that checkpoint and
/// pretraining is skipped.
pub fn cmd_train(
    edges: &Path,
    panel: &Path,
    labels: Option<&Path>,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    holdout: usize,
    ctx: &RunContext,
) -> Result<TrainArtifacts> {
    let mut inputs = vec![edges, panel];
    inputs.extend(labels);
    inputs.extend(resume);
    let rec = Recorder::start(ctx, "train", &inputs)?;
    let (h, p) = load_inputs(edges, panel, Some(cfg))?;
    let p = training_slice(&p, holdout)?;
    let (l, data, model, start) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.edges != h.edges() {
                return Err(Error::invalid("checkpoint hierarchy differs from the edges file"));
            }
            if ck.model.horizon != cfg.horizon || ck.model.window_len != cfg.window_len {
                return Err(Error::Config("horizon and window length must match the checkpoint".into()));
            }
            let (_, data, _) = prepare(&h, &p, Some(ck.labels.clone()), cfg, ctx.exec)?;
            (ck.labels, data, ck.model, ck.epochs_completed)
        }
        None => {
            let l = read_or_classify(labels, &h, &p, cfg, ctx.exec)?;
            let (l, data, model) = prepare(&h, &p, Some(l), cfg, ctx.exec)?;
            let model = pretrain(&model, &data, cfg, ctx.exec)?;
            (l, data, model, 0)
        }
    };
    let outcome = train(&model, &h, &data, cfg, start, ctx.exec)?;
    let epochs = start + outcome.stats.epochs_run;
    let ck_path = ctx.out.join("checkpoint.json");
    checkpoint(&h, l, cfg, outcome.model, epochs, outcome.best_val_total).save(&ck_path)?;
    let log_path = ctx.out.join("train_log.csv");
    std::fs::write(&log_path, log_to_csv(&outcome.log))?;
    log::info!(
        "trained {} epochs ({} base updates), best validation loss {}",
        outcome.stats.epochs_run,
        outcome.stats.base_updates,
        outcome.best_val_total
    );
    let manifest = rec.finish(&[&ck_path, &log_path])?;
    Ok(TrainArtifacts {
        checkpoint: ck_path,
        log: log_path,
        manifest,
    })
}

/// Forecasts `horizon` steps from `origin` (default: end of the panel) and
/// writes `forecasts.csv`.
pub fn cmd_forecast(
    checkpoint: &Path,
    panel: &Path,
    horizon: Option<usize>,
    origin: Option<usize>,
    ctx: &RunContext,
) -> Result<PathBuf> {
    let rec = Recorder::start(ctx, "forecast", &[checkpoint, panel])?;
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(tau) = horizon {
        if tau != ck.model.horizon {
            return Err(Error::Config(format!(
                "requested horizon {tau} but the checkpoint forecasts {} steps",
                ck.model.horizon
            )));
        }
    }
    let h = ck.hierarchy()?;
    let p = io::read_panel(panel, &h)?;
    let origin = origin.unwrap_or(p.len_t());
    let dists = forecast_at(&ck.model, &h, &p, origin, ctx.exec)?;
    let rows = forecast_rows(&h, &dists, origin)?;
    let out = ctx.out.join("forecasts.csv");
    io::write_forecasts(&out, &rows)?;
    rec.finish(&[&out])?;
    Ok(out)
}

/// Six-average point forecasts in the same file format.
pub fn cmd_baseline(edges: &Path, panel: &Path, horizon: usize, origin: Option<usize>, ctx: &RunContext) -> Result<PathBuf> {
    let rec = Recorder::start(ctx, "baseline", &[edges, panel])?;
    let (h, p) = load_inputs(edges, panel, None)?;
    let origin = origin.unwrap_or(p.len_t());
    if origin == 0 || origin > p.len_t() {
        return Err(Error::invalid(format!("origin {origin} outside the panel")));
    }
    let means = reference_forecast(&p.slice_time(0, origin)?, horizon)?;
    let out = ctx.out.join("forecasts.csv");
    io::write_forecasts(&out, &point_rows(&h, &means, origin))?;
    rec.finish(&[&out])?;
    Ok(out)
}

/// Scores forecasts against the panel; history before the forecast origin
/// provides the scaling. Writes `report.json` and `report.csv`.
pub fn cmd_evaluate(forecasts: &Path, panel: &Path, edges: &Path, ctx: &RunContext) -> Result<EvalReport> {
    let rec = Recorder::start(ctx, "evaluate", &[forecasts, panel, edges])?;
    let h = io::read_hierarchy(edges)?;
    let p = io::read_panel(panel, &h)?;
    let table = forecast_table(&h, &io::read_forecasts(forecasts)?)?;
    if table.origin < 2 || table.origin + table.horizon > p.len_t() {
        return Err(Error::invalid(format!(
            "forecasts for t {}..{} are not covered by a panel of length {}",
            table.origin,
            table.origin + table.horizon,
            p.len_t()
        )));
    }
    let train = p.slice_time(0, table.origin)?;
    let truth: Vec<Vec<f64>> = (0..h.len())
        .map(|i| p.row(i)[table.origin..table.origin + table.horizon].to_vec())
        .collect();
    let dce = match &table.normalized {
        Some(n) => Some(dce_metric(n, &h)?),
        None => None,
    };
    let report = evaluate(&h, &train, &truth, &table.means, Some(&table.raw), dce)?;
    let json = ctx.out.join("report.json");
    let csv = ctx.out.join("report.csv");
    std::fs::write(&json, report.to_json())?;
    std::fs::write(&csv, report.to_csv())?;
    rec.finish(&[&json, &csv])?;
    Ok(report)
}

/// Writes `edges.csv` and `panel.csv`.
pub fn cmd_synth_gen(cfg: &SynthConfig, ctx: &RunContext) -> Result<(PathBuf, PathBuf)> {
    let rec = Recorder::start(ctx, "synth-gen", &[])?;
    let (h, p) = generate(cfg)?;
    let e = ctx.out.join("edges.csv");
    let f = ctx.out.join("panel.csv");
    io::write_edges(&e, &h.edges())?;
    io::write_panel(&f, &p, &h)?;
    rec.finish(&[&e, &f])?;
    Ok((e, f))
}
