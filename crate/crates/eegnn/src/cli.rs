//! JSON experiment configuration and the run / sweep / synth / extract
//! commands behind the binary.
//!
//! A config document looks like:
//!
//! ```json
//! {
//!   "dataset": { "synth": { "n_subjects": 8, "samples_per_subject": 50,
//!                            "n_nodes": 30, "n_features": 5, "n_classes": 2,
//!                            "class_separation": 3.0, "subject_shift": 0.0,
//!                            "noise_std": 0.5, "seed": 1 } },
//!   "task": { "split": "cross" },
//!   "model": { "kind": "dgcnn" },
//!   "protocol": { "kind": "ncv" },
//!   "train": { "learning_rate": 0.001 }
//! }
//! ```
//!
//! Omitted knobs take the benchmark defaults: `K = 10`, `K' = 3`,
//! `dropout = 0.5`, two GNN layers, batch size 256, at most 100 epochs, a
//! hidden-dimension grid of `{20, 40, 80}` and a learning-rate grid of
//! `{1e-4, 1e-3, 1e-2}`. The L1/L2 weights default per task:
//! `0.001` for intra-2, `0.003` for cross-2 and intra-9, `0.005` for cross-9.
//!
//! `run` writes three artifacts into the output directory: `results.json`
//! (the protocol result, timestamp-free so reruns are byte-identical),
//! `acc_matrix.csv` (one row per fold; for NCV one row per inner curve), and
//! `run_meta.json` (fully resolved config, seed and wall time — everything
//! needed to replay the run).

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    load_dataset, parse_synth_spec, save_dataset, synth_generate, validate_dataset, write_atomic,
    Dataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::features::{default_bands, extract_de, lds_smooth_default, load_recording, BandDef};
use crate::graph::{init_adjacency, load_positions, GraphSpec};
use crate::models::{
    HetOptions, Model, ModelConfig, ModelKind, OptimizerKind, RgnnOptions, SparseOptions,
    TrainConfig,
};
use crate::protocols::{ncv_run, run_cv, GridPoint, NcvSettings, ProtocolKind, ProtocolResult};
use crate::splitting::SplitMode;

// --- raw document (everything optional, unknown keys rejected) -------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum DatasetSourceDoc {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    split: Option<SplitMode>,
    n_classes: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    positions: Option<PathBuf>,
    delta: Option<f64>,
    global_pairs: Option<Vec<(usize, usize)>>,
    global_weight: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    kind: ModelKind,
    hidden_dim: Option<usize>,
    n_layers: Option<usize>,
    rgnn: Option<RgnnOptions>,
    sparse: Option<SparseOptions>,
    het: Option<HetOptions>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    learning_rate: Option<Vec<f64>>,
    hidden_dim: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProtocolDoc {
    kind: Option<ProtocolKind>,
    k: Option<usize>,
    k_inner: Option<usize>,
    grid: Option<GridDoc>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDoc {
    learning_rate: Option<f64>,
    dropout: Option<f64>,
    l1_coef: Option<f64>,
    l2_coef: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    optimizer: Option<OptimizerKind>,
    seed: Option<u64>,
    device: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    dataset: Option<DatasetSourceDoc>,
    task: TaskDoc,
    graph: Option<GraphDoc>,
    model: ModelDoc,
    protocol: Option<ProtocolDoc>,
    train: Option<TrainDoc>,
}

// --- resolved configuration --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphConfig {
    pub positions: Option<PathBuf>,
    pub delta: f64,
    pub global_pairs: Vec<(usize, usize)>,
    pub global_weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedModel {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub rgnn: RgnnOptions,
    pub sparse: SparseOptions,
    pub het: HetOptions,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedProtocol {
    pub kind: ProtocolKind,
    pub k: usize,
    pub k_inner: usize,
    pub grid_learning_rate: Vec<f64>,
    pub grid_hidden_dim: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub learning_rate: f64,
    pub dropout: f64,
    /// `None` until the task is known; filled from the per-task table at run.
    pub l1_coef: Option<f64>,
    pub l2_coef: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub device: String,
}

/// A parsed and validated experiment configuration with defaults filled.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetSource>,
    pub split: SplitMode,
    pub n_classes: Option<usize>,
    pub graph: Option<GraphConfig>,
    pub model: ResolvedModel,
    pub protocol: ResolvedProtocol,
    pub train: ResolvedTrain,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Parse a config document, fill defaults and collect non-fatal warnings.
pub fn parse_config_bytes(bytes: &[u8]) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let doc: ConfigDoc = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        config_err(
            if path == "." { "<root>" } else { &path },
            e.inner().to_string(),
        )
    })?;
    let mut warnings = Vec::new();

    let split = doc
        .task
        .split
        .ok_or_else(|| config_err("task.split", "required: \"intra\" or \"cross\""))?;

    let train = doc.train.unwrap_or_default();
    let dropout = train.dropout.unwrap_or(0.5);
    if !(0.0..1.0).contains(&dropout) {
        return Err(config_err(
            "train.dropout",
            format!("must lie in [0, 1), got {dropout}"),
        ));
    }
    let learning_rate = train.learning_rate.unwrap_or(1e-3);
    if learning_rate < 0.0 {
        return Err(config_err("train.learning_rate", "must be >= 0"));
    }
    for (name, v) in [("train.l1_coef", train.l1_coef), ("train.l2_coef", train.l2_coef)] {
        if let Some(v) = v {
            if v < 0.0 {
                return Err(config_err(name, "must be >= 0"));
            }
        }
    }
    let batch_size = train.batch_size.unwrap_or(256);
    let max_epochs = train.max_epochs.unwrap_or(100);
    if batch_size == 0 {
        return Err(config_err("train.batch_size", "must be positive"));
    }
    if max_epochs == 0 {
        return Err(config_err("train.max_epochs", "must be positive"));
    }

    let protocol = doc.protocol.unwrap_or_default();
    let kind = protocol.kind.unwrap_or(ProtocolKind::Cv);
    let k = protocol.k.unwrap_or(10);
    if k < 2 {
        return Err(config_err("protocol.k", "must be at least 2"));
    }
    let k_inner = protocol.k_inner.unwrap_or(3);
    if k_inner < 2 {
        return Err(config_err("protocol.k_inner", "must be at least 2"));
    }
    if kind != ProtocolKind::Ncv {
        if protocol.k_inner.is_some() {
            warnings.push("protocol.k_inner is only used by ncv; ignored".into());
        }
        if protocol.grid.is_some() {
            warnings.push("protocol.grid is only honored by ncv; ignored".into());
        }
    }
    let grid = protocol.grid.unwrap_or_default();
    let grid_lr = grid
        .learning_rate
        .unwrap_or_else(|| vec![1e-4, 1e-3, 1e-2]);
    let grid_hidden = grid.hidden_dim.unwrap_or_else(|| vec![20, 40, 80]);
    if grid_lr.is_empty() {
        return Err(config_err("protocol.grid.learning_rate", "must be non-empty"));
    }
    if grid_hidden.is_empty() {
        return Err(config_err("protocol.grid.hidden_dim", "must be non-empty"));
    }
    if grid_lr.iter().any(|&v| v < 0.0) {
        return Err(config_err("protocol.grid.learning_rate", "entries must be >= 0"));
    }
    if grid_hidden.iter().any(|&v| v == 0) {
        return Err(config_err("protocol.grid.hidden_dim", "entries must be positive"));
    }

    let hidden_dim = doc.model.hidden_dim.unwrap_or(40);
    let n_layers = doc.model.n_layers.unwrap_or(2);
    if hidden_dim == 0 {
        return Err(config_err("model.hidden_dim", "must be positive"));
    }
    if n_layers == 0 {
        return Err(config_err("model.n_layers", "must be positive"));
    }
    let rgnn = doc.model.rgnn.unwrap_or_default();
    if !(0.0..1.0).contains(&rgnn.emotion_dl_eps) {
        return Err(config_err("model.rgnn.emotion_dl_eps", "must lie in [0, 1)"));
    }
    let sparse = doc.model.sparse.unwrap_or_default();
    if sparse.adj_l1 < 0.0 {
        return Err(config_err("model.sparse.adj_l1", "must be >= 0"));
    }
    if doc.model.kind != ModelKind::Rgnn && (rgnn.node_dat || rgnn.emotion_dl_eps > 0.0) {
        warnings.push("model.rgnn options are only used by the rgnn kind; ignored".into());
    }
    if doc.model.kind != ModelKind::SparseDgcnn && sparse.adj_l1 > 0.0 {
        warnings.push("model.sparse.adj_l1 is only used by sparse_dgcnn; ignored".into());
    }

    let graph = match doc.graph {
        Some(g) => {
            let delta = g.delta.unwrap_or(1.0);
            if !(delta > 0.0) {
                return Err(config_err("graph.delta", "must be positive"));
            }
            let pairs = g.global_pairs.unwrap_or_default();
            let weight = g.global_weight.unwrap_or(-1.0);
            if !pairs.is_empty() && weight >= 0.0 {
                return Err(config_err("graph.global_weight", "must be negative"));
            }
            Some(GraphConfig {
                positions: g.positions,
                delta,
                global_pairs: pairs,
                global_weight: weight,
            })
        }
        None => None,
    };

    if let Some(n) = doc.task.n_classes {
        if n == 0 {
            return Err(config_err("task.n_classes", "must be positive"));
        }
    }

    Ok((
        ExperimentConfig {
            dataset: doc.dataset.map(|d| match d {
                DatasetSourceDoc::Path(p) => DatasetSource::Path(p),
                DatasetSourceDoc::Synth(s) => DatasetSource::Synth(s),
            }),
            split,
            n_classes: doc.task.n_classes,
            graph,
            model: ResolvedModel {
                kind: doc.model.kind,
                hidden_dim,
                n_layers,
                rgnn,
                sparse,
                het: doc.model.het.unwrap_or_default(),
            },
            protocol: ResolvedProtocol {
                kind,
                k,
                k_inner,
                grid_learning_rate: grid_lr,
                grid_hidden_dim: grid_hidden,
            },
            train: ResolvedTrain {
                learning_rate,
                dropout,
                l1_coef: train.l1_coef,
                l2_coef: train.l2_coef,
                batch_size,
                max_epochs,
                optimizer: train.optimizer.unwrap_or_default(),
                seed: train.seed.unwrap_or(0),
                device: train.device.unwrap_or_else(|| "cpu".into()),
            },
        },
        warnings,
    ))
}

pub fn parse_config(path: &Path) -> Result<(ExperimentConfig, Vec<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_config_bytes(&bytes)
}

/// Per-task L1/L2 defaults: intra-2 -> 0.001, cross-9 -> 0.005,
/// cross-2 and intra-9 -> 0.003, anything else -> 0.001.
pub fn default_regularization(split: SplitMode, n_classes: usize) -> f64 {
    match (split, n_classes) {
        (SplitMode::Intra, 2) => 0.001,
        (SplitMode::Cross, 9) => 0.005,
        (SplitMode::Cross, 2) | (SplitMode::Intra, 9) => 0.003,
        _ => 0.001,
    }
}

fn resolve_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let source = config.dataset.as_ref().ok_or_else(|| {
        Error::Validation("config has no dataset (set dataset.path or dataset.synth)".into())
    })?;
    let ds = match source {
        DatasetSource::Path(p) => load_dataset(p)?,
        DatasetSource::Synth(spec) => synth_generate(spec)?,
    };
    let report = validate_dataset(&ds);
    if !report.is_valid() {
        return Err(Error::Validation(report.to_string()));
    }
    if let Some(n) = config.n_classes {
        if n != ds.n_classes {
            return Err(Error::Validation(format!(
                "task.n_classes = {n} but the dataset declares {}",
                ds.n_classes
            )));
        }
    }
    Ok(ds)
}

fn build_graph_spec(config: &ExperimentConfig, n_nodes: usize) -> Result<Option<GraphSpec>> {
    let g = match &config.graph {
        Some(g) => g,
        None => return Ok(None),
    };
    let adjacency = match &g.positions {
        Some(path) => {
            let positions = load_positions(path)?;
            if positions.nrows() != n_nodes {
                return Err(Error::Shape(format!(
                    "{} electrode positions for a {n_nodes}-node dataset",
                    positions.nrows()
                )));
            }
            init_adjacency(&positions, g.delta, &g.global_pairs, g.global_weight)?
        }
        None => {
            if g.global_pairs.is_empty() {
                return Ok(None);
            }
            let mut a = ndarray::Array2::<f64>::ones((n_nodes, n_nodes));
            for &(i, j) in &g.global_pairs {
                if i >= n_nodes || j >= n_nodes {
                    return Err(Error::Validation(format!(
                        "global pair ({i}, {j}) out of range for {n_nodes} nodes"
                    )));
                }
                a[[i, j]] = g.global_weight;
                a[[j, i]] = g.global_weight;
            }
            a
        }
    };
    Ok(Some(GraphSpec::new(adjacency)?))
}

/// Fully resolved settings recorded in `run_meta.json`; parseable back into a
/// run for replay.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub version: String,
    pub resolved_config: ExperimentConfig,
    pub seed: u64,
    pub jobs: usize,
    pub wall_time_sec: f64,
}

pub struct RunOutput {
    pub result: ProtocolResult,
    pub results_path: PathBuf,
}

/// Execute the configured protocol and write `results.json`,
/// `acc_matrix.csv` and `run_meta.json` under `out_dir`.
pub fn cmd_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed_override: Option<u64>,
    jobs: usize,
) -> Result<RunOutput> {
    let started = Instant::now();
    let ds = resolve_dataset(config)?;
    let seed = seed_override.unwrap_or(config.train.seed);

    let mut resolved = config.clone();
    resolved.n_classes = Some(ds.n_classes);
    resolved.train.seed = seed;
    let reg_default = default_regularization(config.split, ds.n_classes);
    resolved.train.l1_coef = Some(config.train.l1_coef.unwrap_or(reg_default));
    resolved.train.l2_coef = Some(config.train.l2_coef.unwrap_or(reg_default));

    let graph_spec = build_graph_spec(config, ds.n_nodes())?;
    if config.model.kind == ModelKind::Rgnn
        && config.graph.as_ref().is_some_and(|g| g.positions.is_some())
        && config
            .graph
            .as_ref()
            .is_some_and(|g| g.global_pairs.is_empty())
    {
        return Err(config_err(
            "graph.global_pairs",
            "rgnn initialization from positions requires explicit global pairs",
        ));
    }

    let model_template = {
        let mut m = ModelConfig::new(
            config.model.kind,
            ds.n_classes,
            ds.n_nodes(),
            ds.n_features(),
        );
        m.hidden_dim = config.model.hidden_dim;
        m.n_layers = config.model.n_layers;
        m.dropout = config.train.dropout;
        m.rgnn = config.model.rgnn.clone();
        m.sparse = config.model.sparse;
        m.het = config.model.het;
        m
    };
    let graph_ref = graph_spec.as_ref();
    let factory = move |point: &GridPoint, model_seed: u64| -> Result<Model> {
        let mut cfg = model_template.clone();
        if let Some(h) = point.hidden_dim {
            cfg.hidden_dim = h;
        }
        Model::new(cfg, graph_ref, model_seed)
    };

    let train_cfg = TrainConfig {
        learning_rate: resolved.train.learning_rate,
        l1_coef: resolved.train.l1_coef.expect("filled above"),
        l2_coef: resolved.train.l2_coef.expect("filled above"),
        batch_size: resolved.train.batch_size,
        max_epochs: resolved.train.max_epochs,
        optimizer: resolved.train.optimizer,
        seed,
        device: resolved.train.device.clone(),
    };

    let result = match config.protocol.kind {
        ProtocolKind::Cv | ProtocolKind::Fcv => run_cv(
            &factory,
            &ds,
            config.split,
            config.protocol.kind,
            config.protocol.k,
            train_cfg.max_epochs,
            &train_cfg,
            seed,
        )?,
        ProtocolKind::Ncv => {
            let mut grid = Vec::new();
            for &lr in &config.protocol.grid_learning_rate {
                for &hd in &config.protocol.grid_hidden_dim {
                    grid.push(GridPoint {
                        learning_rate: Some(lr),
                        hidden_dim: Some(hd),
                    });
                }
            }
            let mut settings = NcvSettings::new(
                config.split,
                config.protocol.k,
                config.protocol.k_inner,
                train_cfg.max_epochs,
            );
            settings.grid = grid;
            settings.seed = seed;
            settings.jobs = jobs;
            settings.dat_from_train_subjects =
                config.model.kind == ModelKind::Rgnn && config.model.rgnn.node_dat;
            ncv_run(&factory, &ds, &settings, &train_cfg)?
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results_path = out_dir.join("results.json");
    write_atomic(
        &results_path,
        &serde_json::to_vec_pretty(&result).expect("result serializes"),
    )?;
    write_atomic(&out_dir.join("acc_matrix.csv"), acc_matrix_csv(&result).as_bytes())?;
    let meta = RunMeta {
        version: env!("CARGO_PKG_VERSION").into(),
        resolved_config: resolved,
        seed,
        jobs,
        wall_time_sec: started.elapsed().as_secs_f64(),
    };
    write_atomic(
        &out_dir.join("run_meta.json"),
        &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(RunOutput {
        result,
        results_path,
    })
}

/// CSV rendering of the accuracy matrices: `fold,acc@1..` for CV/FCV, one
/// `outer,grid,inner` row per inner curve for NCV.
pub fn acc_matrix_csv(result: &ProtocolResult) -> String {
    let mut out = String::new();
    match (&result.acc_matrix, &result.ncv_outer) {
        (Some(matrix), _) => {
            out.push_str("fold");
            for j in 1..=matrix.t() {
                out.push_str(&format!(",acc_epoch_{j}"));
            }
            out.push('\n');
            for (i, row) in matrix.acc.iter().enumerate() {
                out.push_str(&i.to_string());
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        (None, Some(outers)) => {
            out.push_str("outer_fold,grid_index,inner_fold");
            let t = outers
                .iter()
                .flat_map(|o| o.inner.iter())
                .filter_map(|g| g.matrix.as_ref().map(|m| m.t()))
                .max()
                .unwrap_or(0);
            for j in 1..=t {
                out.push_str(&format!(",acc_epoch_{j}"));
            }
            out.push('\n');
            for outer in outers {
                for (g, grid) in outer.inner.iter().enumerate() {
                    if let Some(matrix) = &grid.matrix {
                        for (inner, row) in matrix.acc.iter().enumerate() {
                            out.push_str(&format!("{},{g},{inner}", outer.outer_fold));
                            for v in row {
                                out.push_str(&format!(",{v}"));
                            }
                            out.push('\n');
                        }
                    }
                }
            }
        }
        (None, None) => {}
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LearningRate,
    HiddenDim,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learning_rate" => Ok(SweepAxis::LearningRate),
            "hidden_dim" => Ok(SweepAxis::HiddenDim),
            other => Err(config_err(
                "axis",
                format!("unknown sweep axis {other:?} (learning_rate | hidden_dim)"),
            )),
        }
    }
}

/// One `cmd_run` per value with the axis field overridden; emits `sweep.csv`
/// with a row per cell. Failed cells are marked and the sweep continues.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<(PathBuf, Vec<String>)> {
    if values.is_empty() {
        return Err(config_err("values", "sweep needs at least one value"));
    }
    let mut warnings = Vec::new();
    let mut seen = Vec::new();
    for &v in values {
        if seen.contains(&v) {
            warnings.push(format!("duplicate sweep value {v} ignored"));
        } else {
            seen.push(v);
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let run_cell = |(idx, value): (usize, f64)| -> (f64, std::result::Result<f64, String>) {
        let mut cell_config = config.clone();
        match axis {
            SweepAxis::LearningRate => {
                cell_config.train.learning_rate = value;
                cell_config.protocol.grid_learning_rate = vec![value];
            }
            SweepAxis::HiddenDim => {
                let h = value as usize;
                if h == 0 || (h as f64 - value).abs() > 0.0 {
                    return (value, Err("hidden_dim must be a positive integer".into()));
                }
                cell_config.model.hidden_dim = h;
                cell_config.protocol.grid_hidden_dim = vec![h];
            }
        }
        let cell_dir = out_dir.join(format!("cell_{idx}"));
        match cmd_run(&cell_config, &cell_dir, None, 1) {
            Ok(run) => (value, Ok(run.result.summary_accuracy)),
            Err(e) => (value, Err(e.to_string())),
        }
    };

    let cells: Vec<(f64, std::result::Result<f64, String>)> = if jobs > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| {
                use rayon::prelude::*;
                seen.par_iter()
                    .copied()
                    .enumerate()
                    .map(run_cell)
                    .collect()
            }),
            Err(_) => seen.iter().copied().enumerate().map(run_cell).collect(),
        }
    } else {
        seen.iter().copied().enumerate().map(run_cell).collect()
    };

    let mut csv = String::from("value,summary_accuracy,status\n");
    for (value, outcome) in &cells {
        match outcome {
            Ok(acc) => csv.push_str(&format!("{value},{acc},ok\n")),
            Err(msg) => csv.push_str(&format!("{value},,failed: {}\n", msg.replace(',', ";"))),
        }
    }
    let path = out_dir.join("sweep.csv");
    write_atomic(&path, csv.as_bytes())?;
    Ok((path, warnings))
}

/// Generate a synthetic dataset from a spec file and save it.
pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let bytes = std::fs::read(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec = parse_synth_spec(&bytes)?;
    let ds = synth_generate(&spec)?;
    save_dataset(&ds, out_dir)
}

#[derive(Debug, Clone, Serialize)]
struct ExtractMeta {
    n_windows: usize,
    n_channels: usize,
    n_bands: usize,
    band_names: Vec<String>,
    fs_hz: f64,
    window_sec: f64,
    smoothed: bool,
}

/// Extract differential-entropy features from a raw recording directory
/// (`recording.json` + `signal.bin`) into `features.bin` + `extract_meta.json`.
pub fn cmd_extract(
    recording_dir: &Path,
    out_dir: &Path,
    window_sec: f64,
    smooth: bool,
    bands_path: Option<&Path>,
) -> Result<()> {
    let rec = load_recording(recording_dir)?;
    let bands: Vec<BandDef> = match bands_path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Format {
                file: p.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => default_bands(),
    };
    if bands.is_empty() {
        return Err(Error::Validation("band list must be non-empty".into()));
    }
    let mut de = extract_de(&rec, &bands, window_sec)?;
    if smooth {
        let (w, ch, nb) = de.dim();
        for c in 0..ch {
            for b in 0..nb {
                let series: Vec<f64> = (0..w).map(|t| de[[t, c, b]]).collect();
                let smoothed = lds_smooth_default(&series)?;
                for (t, v) in smoothed.into_iter().enumerate() {
                    de[[t, c, b]] = v;
                }
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta = ExtractMeta {
        n_windows: de.len_of(Axis(0)),
        n_channels: de.len_of(Axis(1)),
        n_bands: de.len_of(Axis(2)),
        band_names: bands.iter().map(|b| b.name.clone()).collect(),
        fs_hz: rec.fs_hz,
        window_sec,
        smoothed: smooth,
    };
    write_atomic(
        &out_dir.join("extract_meta.json"),
        &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )?;
    let mut blob = Vec::with_capacity(de.len() * 4);
    for &v in de.iter() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(&out_dir.join("features.bin"), &blob)
}
