//! Optimizers, the per-epoch training step and evaluation.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

use super::forward::model_forward;
use super::{argmax, prox_l1, LabeledSlice, Model, ModelKind, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Optional inputs to [`Trainer::train_epoch`].
#[derive(Debug, Clone, Default)]
pub struct TrainExtras {
    /// Unlabeled feature tensor from the adaptation-target pool (NodeDAT).
    /// Protocols only ever fill this from training-side subjects.
    pub dat_target: Option<Array3<f64>>,
    /// Scale of the reversed gradient; 0 leaves the feature extractor alone.
    pub dat_beta: f64,
}

impl TrainExtras {
    pub fn none() -> Self {
        TrainExtras {
            dat_target: None,
            dat_beta: 1.0,
        }
    }

    pub fn with_dat_target(target: Array3<f64>, beta: f64) -> Self {
        TrainExtras {
            dat_target: Some(target),
            dat_beta: beta,
        }
    }
}

enum OptState {
    Sgd,
    Adam {
        m: BTreeMap<String, Tensor>,
        v: BTreeMap<String, Tensor>,
        t: u64,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam {
                m: BTreeMap::new(),
                v: BTreeMap::new(),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        match self {
            OptState::Sgd => {
                for (name, p) in params.iter_mut() {
                    if let Some(g) = grads.get(name) {
                        p.scaled_add(-lr, g);
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for (name, p) in params.iter_mut() {
                    let g = match grads.get(name) {
                        Some(g) => g,
                        None => continue,
                    };
                    let m_t = m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                    let v_t = v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.raw_dim()));
                    m_t.zip_mut_with(g, |mv, &gv| *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv);
                    v_t.zip_mut_with(g, |vv, &gv| {
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv
                    });
                    ndarray::Zip::from(&mut *p)
                        .and(&*m_t)
                        .and(&*v_t)
                        .for_each(|pv, &mv, &vv| {
                            let m_hat = mv / bc1;
                            let v_hat = vv / bc2;
                            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        });
                }
            }
        }
    }
}

/// Owns a model plus the mutable training state (optimizer moments, RNG).
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: OptState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let opt = OptState::new(cfg.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            opt,
            rng,
        })
    }

    /// One pass over seeded, shuffled mini-batches: forward, loss, gradient
    /// step, then the kind-specific constraint (soft-threshold for
    /// sparse_dgcnn). Aborts with a divergence error naming the batch index
    /// when the loss goes non-finite.
    pub fn train_epoch(&mut self, data: &LabeledSlice, extras: &TrainExtras) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Validation("cannot train on an empty slice".into()));
        }
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let mut total_loss = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;

        let chunks: Vec<Vec<usize>> = order
            .chunks(self.cfg.batch_size)
            .map(|c| c.to_vec())
            .collect();
        for (batch_idx, chunk) in chunks.iter().enumerate() {
            let (x, y) = super::forward::materialize_batch(&data.features, &data.labels, chunk);

            let dat = self.sample_dat_batch(extras, chunk.len());

            let mut tape = Tape::new();
            let pvars = self.model.leaf_params(&mut tape);
            let dropout_rng = if self.model.config.dropout > 0.0 {
                Some(&mut self.rng)
            } else {
                None
            };
            let fwd = self
                .model
                .forward_on_tape(&mut tape, &pvars, &x, dropout_rng)?;
            let loss = self.model.loss_on_tape(
                &mut tape,
                &pvars,
                &fwd,
                &y,
                self.cfg.l1_coef,
                self.cfg.l2_coef,
                dat.as_ref().map(|(t, b)| (t, *b)),
            )?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence { batch: batch_idx });
            }

            let logits = tape
                .value(fwd.logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("logits are 2-d")
                .to_owned();
            for (row, &label) in logits.rows().into_iter().zip(y.iter()) {
                if argmax(row.as_slice().expect("contiguous row")) == label {
                    correct += 1;
                }
            }

            let grad_store = tape.backward(loss);
            let grads: BTreeMap<String, Tensor> = pvars
                .iter()
                .map(|(name, &var)| {
                    let shape = self.model.param(name).expect("param exists").shape().to_vec();
                    (name.clone(), grad_store.wrt(var, &shape))
                })
                .collect();
            self.opt
                .step(self.model.params_mut(), &grads, self.cfg.learning_rate);

            // Backward (proximal) half of forward-backward splitting: shrink
            // the off-diagonal raw adjacency by lr * adj_l1.
            if self.model.config.kind == ModelKind::SparseDgcnn
                && self.model.config.sparse.adj_l1 > 0.0
            {
                let lam = self.cfg.learning_rate * self.model.config.sparse.adj_l1;
                let adj = self
                    .model
                    .adjacency_param()
                    .expect("sparse_dgcnn has an adjacency");
                let shrunk = prox_l1(&adj, lam);
                *self
                    .model
                    .param_mut("adjacency")
                    .expect("sparse_dgcnn has an adjacency") = shrunk.into_dyn();
            }

            for (name, p) in self.model.params() {
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "parameter {name} after batch {batch_idx}"
                    )));
                }
            }

            total_loss += loss_value;
            batches += 1;
        }

        Ok(EpochMetrics {
            mean_loss: total_loss / batches as f64,
            train_accuracy: correct as f64 / n as f64,
        })
    }

    /// Draw a DAT target batch from the pool, matching the source batch size
    /// when possible.
    fn sample_dat_batch(&mut self, extras: &TrainExtras, batch: usize) -> Option<(Array3<f64>, f64)> {
        if !(self.model.config.kind == ModelKind::Rgnn && self.model.config.rgnn.node_dat) {
            return None;
        }
        let pool = extras.dat_target.as_ref()?;
        let avail = pool.len_of(Axis(0));
        if avail == 0 {
            return None;
        }
        let take = batch.min(avail);
        let (_, n, d) = pool.dim();
        let mut out = Array3::<f64>::zeros((take, n, d));
        for row in 0..take {
            let pick = self.rng.random_range(0..avail);
            out.index_axis_mut(Axis(0), row)
                .assign(&pool.index_axis(Axis(0), pick));
        }
        Some((out, extras.dat_beta))
    }
}

/// Fraction of samples whose argmax logit equals the label (ties resolve to
/// the lowest class index). Deterministic; dropout is never applied.
pub fn evaluate(model: &Model, data: &LabeledSlice) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty slice".into()));
    }
    let n = data.len();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let (x, y) = super::forward::materialize_batch(&data.features, &data.labels, chunk);
        let logits = model_forward(model, &x)?;
        for (row, &label) in logits.rows().into_iter().zip(y.iter()) {
            if argmax(row.as_slice().expect("contiguous row")) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

/// NodeDAT diagnostic: binary cross-entropy of the model's per-node linear
/// domain discriminator on the given source/target embeddings. During
/// training this value enters the objective behind a gradient-reversal layer
/// scaled by `beta`; here only the discriminator loss value is computed.
pub fn node_dat_term(
    model: &Model,
    source_embed: &Array2<f64>,
    target_embed: &Array2<f64>,
    _beta: f64,
) -> Result<f64> {
    if !(model.config.kind == ModelKind::Rgnn && model.config.rgnn.node_dat) {
        return Err(Error::Validation(
            "NodeDAT term requested but node_dat is not enabled".into(),
        ));
    }
    let h = model.config.hidden_dim;
    if source_embed.ncols() != h || target_embed.ncols() != h {
        return Err(Error::Shape(format!(
            "embeddings must have {h} columns, got {} and {}",
            source_embed.ncols(),
            target_embed.ncols()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(model.param("disc.w").expect("node_dat enabled").clone());
    let b = tape.leaf(model.param("disc.b").expect("node_dat enabled").clone());
    let src = tape.leaf(source_embed.clone().into_dyn());
    let tgt = tape.leaf(target_embed.clone().into_dyn());
    let all = tape.concat_rows(src, tgt);
    let lin = tape.matmul(all, w);
    let lin = tape.add_bias(lin, b);
    let rows = source_embed.nrows() + target_embed.nrows();
    let z = tape.reshape(lin, &[rows]);
    let mut domains = vec![0.0; source_embed.nrows()];
    domains.extend(std::iter::repeat_n(1.0, target_embed.nrows()));
    let loss = tape.bce_logits_mean(z, domains)?;
    Ok(tape.scalar_value(loss))
}
