//! The four GNN classifiers and their training step.
//!
//! All variants share the same spine: an effective adjacency (kind-specific),
//! symmetric degree normalization, `n_layers` of graph convolution
//! `H <- relu(A_hat H W)` with dropout between layers, and a classification
//! head. They differ in how the adjacency is produced and constrained:
//!
//! - `dgcnn`: trainable adjacency passed through a nonnegativity map
//!   (`relu(A) + I`), so the effective diagonal stays positive at all times.
//! - `rgnn`: trainable signed adjacency used raw (negative entries encode
//!   global connections); optional EmotionDL label smoothing and a NodeDAT
//!   domain discriminator behind a gradient-reversal layer.
//! - `sparse_dgcnn`: dgcnn plus forward-backward splitting — after each
//!   gradient step the off-diagonal adjacency is soft-thresholded.
//! - `het_emotion_net`: softmax mixture over fixed candidate adjacencies
//!   (meta-graphs) instead of a raw trainable adjacency, and a GRU over the
//!   transformed feature axis instead of the convolution head. The dual
//!   temporal stream would require raw time-series inputs; with feature
//!   tensors only, `dual` behaves as `spectral_only`.

mod forward;
mod train;

pub use forward::{model_forward, predict_proba, training_loss_and_grads, LossBreakdown};
pub use train::{evaluate, node_dat_term, EpochMetrics, TrainExtras, Trainer};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::GraphSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dgcnn,
    Rgnn,
    SparseDgcnn,
    HetEmotionNet,
}

impl ModelKind {
    pub fn all() -> [ModelKind; 4] {
        [
            ModelKind::Dgcnn,
            ModelKind::Rgnn,
            ModelKind::SparseDgcnn,
            ModelKind::HetEmotionNet,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgnnOptions {
    /// Enable the NodeDAT domain-adversarial regularizer.
    pub node_dat: bool,
    /// EmotionDL smoothing mass in `[0, 1)`; `0` disables it.
    pub emotion_dl_eps: f64,
    /// Class neighborhoods for EmotionDL; defaults to "all other classes".
    pub neighbor_map: Option<Vec<Vec<usize>>>,
}

impl Default for RgnnOptions {
    fn default() -> Self {
        RgnnOptions {
            node_dat: false,
            emotion_dl_eps: 0.0,
            neighbor_map: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseOptions {
    /// L1 strength for the adjacency soft-threshold step.
    pub adj_l1: f64,
}

impl Default for SparseOptions {
    fn default() -> Self {
        SparseOptions { adj_l1: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HetStreams {
    #[default]
    SpectralOnly,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HetOptions {
    pub streams: HetStreams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_classes: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub rgnn: RgnnOptions,
    #[serde(default)]
    pub sparse: SparseOptions,
    #[serde(default)]
    pub het: HetOptions,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_classes: usize, n_nodes: usize, n_features: usize) -> Self {
        ModelConfig {
            kind,
            n_classes,
            n_nodes,
            n_features,
            hidden_dim: 40,
            n_layers: 2,
            dropout: 0.5,
            activation: Activation::Relu,
            rgnn: RgnnOptions::default(),
            sparse: SparseOptions::default(),
            het: HetOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.n_nodes == 0
            || self.n_features == 0
            || self.hidden_dim == 0
            || self.n_layers == 0
        {
            return Err(Error::Validation(
                "model dimensions must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.rgnn.emotion_dl_eps) {
            return Err(Error::Validation(format!(
                "emotion_dl_eps must lie in [0, 1), got {}",
                self.rgnn.emotion_dl_eps
            )));
        }
        if self.sparse.adj_l1 < 0.0 {
            return Err(Error::Validation("adj_l1 must be nonnegative".into()));
        }
        if self.n_layers > 99 {
            return Err(Error::Validation("n_layers capped at 99".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l1_coef: f64,
    pub l2_coef: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l1_coef: 0.0,
            l2_coef: 0.0,
            batch_size: 256,
            max_epochs: 100,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Validation("learning_rate must be >= 0".into()));
        }
        if self.l1_coef < 0.0 || self.l2_coef < 0.0 {
            return Err(Error::Validation("regularization coefficients must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Validation("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A training or evaluation slice, already materialized in f64.
#[derive(Debug, Clone)]
pub struct LabeledSlice {
    /// `[n_samples, n_nodes, n_features]`
    pub features: Array3<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSlice {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One GNN classifier: configuration plus named parameter tensors.
///
/// Parameters live in a sorted map so iteration order (optimizer updates,
/// checkpoints, gradient checks) is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
    /// Candidate adjacencies mixed by `het_emotion_net`; empty for other kinds.
    meta_graphs: Vec<Array2<f64>>,
}

pub(crate) const META_GRAPH_COUNT: usize = 3;

impl Model {
    /// Initialize a model. Weights are uniform in
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`; the adjacency starts from
    /// `graph` when given (all-ones otherwise).
    pub fn new(config: ModelConfig, graph: Option<&GraphSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.n_nodes;
        if let Some(g) = graph {
            if g.n_nodes != n {
                return Err(Error::Shape(format!(
                    "graph has {} nodes but the model expects {n}",
                    g.n_nodes
                )));
            }
            if matches!(config.kind, ModelKind::Dgcnn | ModelKind::SparseDgcnn)
                && !g.is_nonnegative_with_self_loops()
            {
                return Err(Error::Validation(
                    "dgcnn/sparse_dgcnn initial adjacency must be nonnegative with positive diagonal"
                        .into(),
                ));
            }
        }
        let init_adj = graph
            .map(|g| g.adjacency.clone())
            .unwrap_or_else(|| Array2::ones((n, n)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Array2<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };

        let h = config.hidden_dim;
        let d = config.n_features;
        let c = config.n_classes;
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut meta_graphs = Vec::new();

        match config.kind {
            ModelKind::HetEmotionNet => {
                meta_graphs.push(Array2::eye(n));
                meta_graphs.push(Array2::ones((n, n)));
                meta_graphs.push(init_adj);
                params.insert("mix.logits".into(), Array1::<f64>::zeros(META_GRAPH_COUNT).into_dyn());
            }
            _ => {
                params.insert("adjacency".into(), init_adj.into_dyn());
            }
        }
        for l in 0..config.n_layers {
            let d_in = if l == 0 { d } else { h };
            params.insert(format!("layer_w.{l:02}"), uniform(d_in, h, d_in).into_dyn());
        }
        match config.kind {
            ModelKind::HetEmotionNet => {
                for gate in ["r", "z", "n"] {
                    params.insert(format!("gru.wx{gate}"), uniform(n, h, n).into_dyn());
                    params.insert(format!("gru.wh{gate}"), uniform(h, h, h).into_dyn());
                    params.insert(format!("gru.b{gate}"), Array1::<f64>::zeros(h).into_dyn());
                }
                params.insert("head.w".into(), uniform(h, c, h).into_dyn());
                params.insert("head.b".into(), Array1::<f64>::zeros(c).into_dyn());
            }
            _ => {
                params.insert("conv.w".into(), uniform(h, h, h).into_dyn());
                params.insert("conv.b".into(), Array1::<f64>::zeros(h).into_dyn());
                let flat = n * h;
                params.insert("head.w".into(), uniform(flat, c, flat).into_dyn());
                params.insert("head.b".into(), Array1::<f64>::zeros(c).into_dyn());
            }
        }
        if config.kind == ModelKind::Rgnn && config.rgnn.node_dat {
            params.insert("disc.w".into(), uniform(h, 1, h).into_dyn());
            params.insert("disc.b".into(), Array1::<f64>::zeros(1).into_dyn());
        }

        Ok(Model {
            config,
            seed,
            params,
            meta_graphs,
        })
    }

    /// All parameters zero except the adjacency (all-ones so degrees stay
    /// positive). Such a model emits all-zero logits: a constant predictor.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut model = Model::new(config, None, 0)?;
        for (name, tensor) in model.params.iter_mut() {
            if name != "adjacency" {
                tensor.fill(0.0);
            }
        }
        Ok(model)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub(crate) fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub(crate) fn meta_graphs(&self) -> &[Array2<f64>] {
        &self.meta_graphs
    }

    /// Raw trainable adjacency, for kinds that have one.
    pub fn adjacency_param(&self) -> Option<Array2<f64>> {
        self.params.get("adjacency").map(|t| {
            t.view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("adjacency is 2-d")
                .to_owned()
        })
    }

    pub fn layer_weights(&self) -> Vec<Array2<f64>> {
        (0..self.config.n_layers)
            .map(|l| {
                self.params[&format!("layer_w.{l:02}")]
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("layer weight is 2-d")
                    .to_owned()
            })
            .collect()
    }

    /// Names of the weight matrices covered by L1/L2 regularization:
    /// the GCN layers, the feature convolution and the head (biases,
    /// adjacency, GRU and discriminator parameters are excluded).
    pub(crate) fn regularized_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.config.n_layers)
            .map(|l| format!("layer_w.{l:02}"))
            .collect();
        if self.params.contains_key("conv.w") {
            names.push("conv.w".into());
        }
        names.push("head.w".into());
        names
    }

    /// The adjacency each kind actually feeds into normalization:
    /// `relu(A) + I` for dgcnn/sparse, raw signed `A` for rgnn, and the
    /// softmax meta-graph mixture for het_emotion_net.
    pub fn effective_adjacency(&self) -> Array2<f64> {
        match self.config.kind {
            ModelKind::Dgcnn | ModelKind::SparseDgcnn => {
                let mut a = self
                    .adjacency_param()
                    .expect("dgcnn-family models have an adjacency");
                a.mapv_inplace(|v| v.max(0.0));
                for i in 0..a.nrows() {
                    a[[i, i]] += 1.0;
                }
                a
            }
            ModelKind::Rgnn => self
                .adjacency_param()
                .expect("rgnn has an adjacency"),
            ModelKind::HetEmotionNet => {
                let logits = self.params["mix.logits"]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("mix logits are 1-d");
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
                let norm: f64 = exp.iter().sum();
                let n = self.config.n_nodes;
                let mut out = Array2::<f64>::zeros((n, n));
                for (w, g) in exp.iter().zip(self.meta_graphs.iter()) {
                    out.scaled_add(w / norm, g);
                }
                out
            }
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// One graph-convolution layer on a single sample: `activation(A_hat H W)`.
/// `activation = None` means identity.
pub fn gcn_layer_forward(
    h: &Array2<f64>,
    a_hat: &Array2<f64>,
    w: &Array2<f64>,
    activation: Option<Activation>,
) -> Result<Array2<f64>> {
    if a_hat.nrows() != a_hat.ncols() || a_hat.ncols() != h.nrows() {
        return Err(Error::Shape(format!(
            "A_hat {}x{} does not conform with H {}x{}",
            a_hat.nrows(),
            a_hat.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    if h.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "H {}x{} does not conform with W {}x{}",
            h.nrows(),
            h.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let mut out = a_hat.dot(h).dot(w);
    if let Some(Activation::Relu) = activation {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

/// Elementwise soft-threshold of the off-diagonal entries; the diagonal
/// (self-loops) is left untouched.
pub fn prox_l1(a: &Array2<f64>, lam: f64) -> Array2<f64> {
    let mut out = a.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if i != j {
            let m = v.abs() - lam;
            *v = if m <= 0.0 { 0.0 } else { v.signum() * m };
        }
    }
    out
}

/// EmotionDL targets: `(1 - eps) * onehot(label) + eps * uniform(neighbors)`.
/// The default neighborhood of a label is every other class.
pub fn emotion_dl_targets(
    labels: &[usize],
    eps: f64,
    neighbor_map: Option<&[Vec<usize>]>,
    n_classes: usize,
) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Validation(format!("eps must lie in [0, 1), got {eps}")));
    }
    let mut out = Array2::<f64>::zeros((labels.len(), n_classes));
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::Validation(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        out[[row, label]] = 1.0 - eps;
        if eps > 0.0 {
            let default_neighbors: Vec<usize> =
                (0..n_classes).filter(|&cc| cc != label).collect();
            let neighbors: &[usize] = match neighbor_map {
                Some(map) => map.get(label).map(|v| v.as_slice()).ok_or_else(|| {
                    Error::Config {
                        path: "rgnn.neighbor_map".into(),
                        message: format!("no neighbor entry for label {label}"),
                    }
                })?,
                None => &default_neighbors,
            };
            if neighbors.is_empty() {
                return Err(Error::Config {
                    path: "rgnn.neighbor_map".into(),
                    message: format!("label {label} has no neighbors but eps = {eps} > 0"),
                });
            }
            let share = eps / neighbors.len() as f64;
            for &nb in neighbors {
                if nb >= n_classes {
                    return Err(Error::Config {
                        path: "rgnn.neighbor_map".into(),
                        message: format!("neighbor {nb} out of range"),
                    });
                }
                out[[row, nb]] += share;
            }
        } else {
            out[[row, label]] = 1.0;
        }
    }
    Ok(out)
}

/// Row softmax of a logits vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / s).collect()
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy (or EmotionDL KL) plus L1/L2 weight penalties, and the
/// NodeDAT discriminator loss when source/target embeddings are supplied.
pub fn loss_value(
    model: &Model,
    logits: &Array2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    dat: Option<(&Array2<f64>, &Array2<f64>, f64)>,
) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let c = model.config.n_classes;
    if logits.ncols() != c {
        return Err(Error::Shape(format!(
            "logits have {} columns but the model has {c} classes",
            logits.ncols()
        )));
    }
    let eps = model.config.rgnn.emotion_dl_eps;
    let use_dl = model.config.kind == ModelKind::Rgnn && eps > 0.0;
    let mut total = 0.0;
    if use_dl {
        let targets =
            emotion_dl_targets(labels, eps, model.config.rgnn.neighbor_map.as_deref(), c)?;
        for (row, trow) in logits.rows().into_iter().zip(targets.rows()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (&z, &t) in row.iter().zip(trow.iter()) {
                if t > 0.0 {
                    total += t * (t.ln() - (z - lse));
                }
            }
        }
        total /= labels.len() as f64;
    } else {
        for (row, &y) in logits.rows().into_iter().zip(labels.iter()) {
            if y >= c {
                return Err(Error::Validation(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total /= labels.len() as f64;
    }
    for name in model.regularized_names() {
        let w = &model.params[&name];
        if cfg.l1_coef > 0.0 {
            total += cfg.l1_coef * w.iter().map(|v| v.abs()).sum::<f64>();
        }
        if cfg.l2_coef > 0.0 {
            total += cfg.l2_coef * w.iter().map(|v| v * v).sum::<f64>();
        }
    }
    if let Some((src, tgt, beta)) = dat {
        total += node_dat_term(model, src, tgt, beta)?;
    }
    Ok(total)
}

// --- checkpointing ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    kind: ModelKind,
    seed: u64,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    meta_graphs: Vec<Vec<usize>>,
}

/// Write `meta.json` plus `params.bin` (little-endian f64 blobs in the order
/// listed by the meta) under `dir`.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: Vec<TensorMeta> = model
        .params
        .iter()
        .map(|(name, t)| TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let meta = CheckpointMeta {
        format_version: crate::dataio::FORMAT_VERSION,
        kind: model.config.kind,
        seed: model.seed,
        config: model.config.clone(),
        tensors,
        meta_graphs: model
            .meta_graphs
            .iter()
            .map(|g| vec![g.nrows(), g.ncols()])
            .collect(),
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("checkpoint meta serializes");
    crate::dataio::write_atomic(&dir.join("meta.json"), &meta_json)?;

    let mut blob = Vec::new();
    for t in model.params.values() {
        for &v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for g in &model.meta_graphs {
        for &v in g.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::dataio::write_atomic(&dir.join("params.bin"), &blob)
}

/// Load a checkpoint written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<Model> {
    let meta_bytes = std::fs::read(dir.join("meta.json"))
        .map_err(|e| Error::io(dir.join("meta.json"), e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format {
        file: "meta.json".into(),
        message: e.to_string(),
    })?;
    if meta.format_version != crate::dataio::FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: meta.format_version,
            supported: crate::dataio::FORMAT_VERSION,
        });
    }
    meta.config.validate()?;
    let blob = std::fs::read(dir.join("params.bin"))
        .map_err(|e| Error::io(dir.join("params.bin"), e))?;

    let mut expected: u64 = 0;
    for t in &meta.tensors {
        let count = t.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match count {
            Some(c) => expected += c as u64 * 8,
            None => {
                return Err(Error::Format {
                    file: "meta.json".into(),
                    message: format!("tensor {} shape overflows", t.name),
                })
            }
        }
    }
    for shape in &meta.meta_graphs {
        if shape.len() != 2 {
            return Err(Error::Format {
                file: "meta.json".into(),
                message: "meta graphs must be rank 2".into(),
            });
        }
        expected += (shape[0] * shape[1]) as u64 * 8;
    }
    if blob.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            file: "params.bin".into(),
            expected,
            actual: blob.len() as u64,
        });
    }

    let mut offset = 0usize;
    let mut take = |count: usize| -> Vec<f64> {
        let bytes = &blob[offset..offset + count * 8];
        offset += count * 8;
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    };
    let mut params = BTreeMap::new();
    for t in &meta.tensors {
        let count: usize = t.shape.iter().product();
        let values = take(count);
        let tensor = ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("length checked");
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {}", t.name)));
        }
        params.insert(t.name.clone(), tensor);
    }
    let mut meta_graphs = Vec::new();
    for shape in &meta.meta_graphs {
        let values = take(shape[0] * shape[1]);
        meta_graphs
            .push(Array2::from_shape_vec((shape[0], shape[1]), values).expect("length checked"));
    }
    Ok(Model {
        config: meta.config,
        seed: meta.seed,
        params,
        meta_graphs,
    })
}

#[cfg(test)]
mod tests;
