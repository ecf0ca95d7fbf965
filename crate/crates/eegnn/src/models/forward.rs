//! Tape-based forward pass and training loss for all model kinds.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::DEGREE_EPS;

use super::{emotion_dl_targets, Model, ModelKind};

pub(crate) struct ForwardVars {
    pub logits: Var,
    /// Post-GCN node embeddings `[B, n, hidden]`.
    pub node_embed: Var,
}

impl Model {
    /// Push every parameter onto the tape as a leaf, keyed by name.
    pub(crate) fn leaf_params(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params()
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone())))
            .collect()
    }

    fn check_finite_params(&self) -> Result<()> {
        for (name, tensor) in self.params() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    /// Effective adjacency on the tape, per kind.
    fn adjacency_on_tape(&self, tape: &mut Tape, pvars: &BTreeMap<String, Var>) -> Var {
        let n = self.config.n_nodes;
        match self.config.kind {
            ModelKind::Dgcnn | ModelKind::SparseDgcnn => {
                let raw = pvars["adjacency"];
                let nonneg = tape.relu(raw);
                tape.add_const(nonneg, &Array2::<f64>::eye(n).into_dyn())
            }
            ModelKind::Rgnn => pvars["adjacency"],
            ModelKind::HetEmotionNet => {
                let weights = tape.softmax_vec(pvars["mix.logits"]);
                tape.mix_mats(weights, self.meta_graphs().to_vec())
            }
        }
    }

    /// `D^{-1/2} A D^{-1/2}` with `|D|`, erroring on degenerate degrees.
    fn normalize_on_tape(&self, tape: &mut Tape, a_eff: Var) -> Result<Var> {
        let degrees = tape.sum_axis1(a_eff);
        for (node, &d) in tape.value(degrees).iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("degree of node {node}")));
            }
            if d.abs() <= DEGREE_EPS {
                return Err(Error::DegenerateDegree {
                    node,
                    value: d.abs(),
                });
            }
        }
        let mags = tape.abs(degrees);
        let inv_sqrt = tape.powf(mags, -0.5);
        let rows = tape.scale_rows(a_eff, inv_sqrt);
        Ok(tape.scale_cols(rows, inv_sqrt))
    }

    /// Build the full forward computation for a batch `x [B, n, d]`.
    ///
    /// Dropout masks are drawn from `dropout_rng` only when it is provided and
    /// `config.dropout > 0`; evaluation passes `None`.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pvars: &BTreeMap<String, Var>,
        x: &Array3<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        self.check_finite_params()?;
        let (bsz, n, d) = x.dim();
        if n != self.config.n_nodes || d != self.config.n_features {
            return Err(Error::Shape(format!(
                "input [{bsz}, {n}, {d}] does not match model [*, {}, {}]",
                self.config.n_nodes, self.config.n_features
            )));
        }
        if bsz == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input batch".into()));
        }

        let a_eff = self.adjacency_on_tape(tape, pvars);
        let a_hat = self.normalize_on_tape(tape, a_eff)?;

        let h = self.config.hidden_dim;
        let mut hidden = tape.leaf(x.clone().into_dyn());
        for l in 0..self.config.n_layers {
            let agg = tape.bmm_left(a_hat, hidden);
            let lin = tape.bmm_right(agg, pvars[&format!("layer_w.{l:02}")]);
            hidden = tape.relu(lin);
            let between_layers = l + 1 < self.config.n_layers;
            if between_layers && self.config.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.config.dropout;
                    let dims = tape.value(hidden).shape().to_vec();
                    let mask = ArrayD::from_shape_fn(ndarray::IxDyn(&dims), |_| {
                        if rng.random_range(0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    hidden = tape.mul_const(hidden, mask);
                }
            }
        }
        let node_embed = hidden;

        let logits = match self.config.kind {
            ModelKind::HetEmotionNet => self.gru_head_on_tape(tape, pvars, node_embed, bsz, h),
            _ => {
                let conv = tape.bmm_right(node_embed, pvars["conv.w"]);
                let conv = tape.add_bias(conv, pvars["conv.b"]);
                let conv = tape.relu(conv);
                let flat = tape.reshape(conv, &[bsz, self.config.n_nodes * h]);
                let lin = tape.matmul(flat, pvars["head.w"]);
                tape.add_bias(lin, pvars["head.b"])
            }
        };
        Ok(ForwardVars { logits, node_embed })
    }

    /// GRU across the transformed feature axis: step `t` consumes the
    /// all-nodes slice `[B, n]` at feature position `t`; the final state
    /// feeds the head.
    fn gru_head_on_tape(
        &self,
        tape: &mut Tape,
        pvars: &BTreeMap<String, Var>,
        node_embed: Var,
        bsz: usize,
        h: usize,
    ) -> Var {
        let mut state = tape.leaf(Array2::<f64>::zeros((bsz, h)).into_dyn());
        for t in 0..h {
            let x_t = tape.select_last(node_embed, t);
            let xr = tape.matmul(x_t, pvars["gru.wxr"]);
            let hr = tape.matmul(state, pvars["gru.whr"]);
            let r_pre = tape.add(xr, hr);
            let r_pre = tape.add_bias(r_pre, pvars["gru.br"]);
            let r = tape.sigmoid(r_pre);

            let xz = tape.matmul(x_t, pvars["gru.wxz"]);
            let hz = tape.matmul(state, pvars["gru.whz"]);
            let z_pre = tape.add(xz, hz);
            let z_pre = tape.add_bias(z_pre, pvars["gru.bz"]);
            let z = tape.sigmoid(z_pre);

            let gated = tape.mul(r, state);
            let xn = tape.matmul(x_t, pvars["gru.wxn"]);
            let hn = tape.matmul(gated, pvars["gru.whn"]);
            let n_pre = tape.add(xn, hn);
            let n_pre = tape.add_bias(n_pre, pvars["gru.bn"]);
            let cand = tape.tanh(n_pre);

            let negz = tape.neg(z);
            let one_minus_z = tape.add_scalar(negz, 1.0);
            let keep_new = tape.mul(one_minus_z, cand);
            let keep_old = tape.mul(z, state);
            state = tape.add(keep_new, keep_old);
        }
        let lin = tape.matmul(state, pvars["head.w"]);
        tape.add_bias(lin, pvars["head.b"])
    }

    /// Training loss on the tape: cross-entropy (or EmotionDL KL), L1/L2
    /// penalties on the regularized weights, and the NodeDAT discriminator
    /// term behind a gradient-reversal layer when a target batch is given.
    pub(crate) fn loss_on_tape(
        &self,
        tape: &mut Tape,
        pvars: &BTreeMap<String, Var>,
        forward: &ForwardVars,
        labels: &[usize],
        l1_coef: f64,
        l2_coef: f64,
        dat: Option<(&Array3<f64>, f64)>,
    ) -> Result<Var> {
        let eps = self.config.rgnn.emotion_dl_eps;
        let mut loss = if self.config.kind == ModelKind::Rgnn && eps > 0.0 {
            let targets = emotion_dl_targets(
                labels,
                eps,
                self.config.rgnn.neighbor_map.as_deref(),
                self.config.n_classes,
            )?;
            tape.kl_div_mean(forward.logits, targets)?
        } else {
            tape.cross_entropy_mean(forward.logits, labels.to_vec())?
        };

        if l1_coef > 0.0 || l2_coef > 0.0 {
            for name in self.regularized_names() {
                let w = pvars[&name];
                if l1_coef > 0.0 {
                    let a = tape.abs(w);
                    let s = tape.sum(a);
                    let scaled = tape.scale(s, l1_coef);
                    loss = tape.add(loss, scaled);
                }
                if l2_coef > 0.0 {
                    let sq = tape.mul(w, w);
                    let s = tape.sum(sq);
                    let scaled = tape.scale(s, l2_coef);
                    loss = tape.add(loss, scaled);
                }
            }
        }

        if let Some((target_x, beta)) = dat {
            let dat_loss = self.node_dat_on_tape(tape, pvars, forward, target_x, beta)?;
            loss = tape.add(loss, dat_loss);
        }
        Ok(loss)
    }

    /// NodeDAT: per-node linear domain discriminator over source and target
    /// embeddings. The gradient-reversal layer sits between the embeddings and
    /// the discriminator, so the discriminator itself descends its BCE while
    /// the feature extractor receives `-beta` times that gradient.
    fn node_dat_on_tape(
        &self,
        tape: &mut Tape,
        pvars: &BTreeMap<String, Var>,
        forward: &ForwardVars,
        target_x: &Array3<f64>,
        beta: f64,
    ) -> Result<Var> {
        if !(self.config.kind == ModelKind::Rgnn && self.config.rgnn.node_dat) {
            return Err(Error::Validation(
                "NodeDAT term requested but node_dat is not enabled".into(),
            ));
        }
        let target_fwd = self.forward_on_tape(tape, pvars, target_x, None)?;
        let h = self.config.hidden_dim;
        let src_dims = tape.value(forward.node_embed).shape().to_vec();
        let tgt_dims = tape.value(target_fwd.node_embed).shape().to_vec();
        let src_rows = src_dims[0] * src_dims[1];
        let tgt_rows = tgt_dims[0] * tgt_dims[1];
        let src_flat = tape.reshape(forward.node_embed, &[src_rows, h]);
        let tgt_flat = tape.reshape(target_fwd.node_embed, &[tgt_rows, h]);
        let all = tape.concat_rows(src_flat, tgt_flat);
        let reversed = tape.grad_reverse(all, beta);
        let lin = tape.matmul(reversed, pvars["disc.w"]);
        let lin = tape.add_bias(lin, pvars["disc.b"]);
        let z = tape.reshape(lin, &[src_rows + tgt_rows]);
        let mut domains = vec![0.0; src_rows];
        domains.extend(std::iter::repeat_n(1.0, tgt_rows));
        tape.bce_logits_mean(z, domains)
    }
}

/// Class logits for a batch, evaluation mode (dropout disabled). A pure,
/// deterministic function of the parameters and the input.
pub fn model_forward(model: &Model, x: &Array3<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let pvars = model.leaf_params(&mut tape);
    let fwd = model.forward_on_tape(&mut tape, &pvars, x, None)?;
    Ok(tape
        .value(fwd.logits)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits are 2-d")
        .to_owned())
}

/// Value of the training objective and its gradients for one batch, without
/// dropout. `objective` is what gradient descent sees through the
/// gradient-reversal layer; `dat` is the raw discriminator loss value.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub dat: f64,
}

pub fn training_loss_and_grads(
    model: &Model,
    x: &Array3<f64>,
    labels: &[usize],
    l1_coef: f64,
    l2_coef: f64,
    dat: Option<(&Array3<f64>, f64)>,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let pvars = model.leaf_params(&mut tape);
    let fwd = model.forward_on_tape(&mut tape, &pvars, x, None)?;
    let base = model.loss_on_tape(&mut tape, &pvars, &fwd, labels, l1_coef, l2_coef, None)?;
    let (loss, dat_value) = match dat {
        Some((target_x, beta)) => {
            let dat_loss = model.node_dat_on_tape(&mut tape, &pvars, &fwd, target_x, beta)?;
            let total = tape.add(base, dat_loss);
            (total, tape.scalar_value(dat_loss))
        }
        None => (base, 0.0),
    };
    let grads = tape.backward(loss);
    let out = pvars
        .iter()
        .map(|(name, &var)| {
            let shape = model.param(name).expect("param exists").shape().to_vec();
            (name.clone(), grads.wrt(var, &shape))
        })
        .collect();
    Ok((
        LossBreakdown {
            total: tape.scalar_value(loss),
            dat: dat_value,
        },
        out,
    ))
}

/// Per-row softmax of model logits.
pub fn predict_proba(model: &Model, x: &Array3<f64>) -> Result<Array2<f64>> {
    let logits = model_forward(model, x)?;
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let soft = super::softmax(row.as_slice().expect("contiguous row"));
        for (v, s) in row.iter_mut().zip(soft) {
            *v = s;
        }
    }
    Ok(out)
}

pub(crate) fn materialize_batch(
    features: &Array3<f64>,
    labels: &[usize],
    idx: &[usize],
) -> (Array3<f64>, Vec<usize>) {
    let (_, n, d) = features.dim();
    let mut x = Array3::<f64>::zeros((idx.len(), n, d));
    let mut y = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), row)
            .assign(&features.index_axis(ndarray::Axis(0), i));
        y.push(labels[i]);
    }
    (x, y)
}
