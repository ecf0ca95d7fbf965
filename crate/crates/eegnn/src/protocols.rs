//! Validation protocols: CV, FCV and nested CV with grid tuning.
//!
//! Epoch selection is the whole difference between the three:
//!
//! - CV takes each fold's best epoch (`MAX_i = max_j Acc_{i,j}`) and averages.
//! - FCV averages per epoch first (`AVG_j`) and reports the best column.
//! - NCV picks the grid point and epoch count on inner folds only, retrains
//!   on the full outer training side, and reports untouched-test accuracy.
//!
//! Every data slice a protocol touches is created through an audit recorder
//! tagged with its phase, so NCV's leakage freedom is demonstrated by
//! inspecting the log rather than assumed: for outer fold `i`, no record other
//! than the final `test_evaluate` may contain a test index of fold `i`.

use std::collections::HashSet;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::models::{evaluate, LabeledSlice, Model, TrainConfig, TrainExtras, Trainer};
use crate::splitting::{split_cross, split_intra, FoldPlan, SplitMode};

/// Splitmix-style seed mixing so nested loops get independent, reproducible
/// RNG streams.
pub fn derive_seed(base: u64, salt: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salt {
        z = z.wrapping_add(s).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Cv,
    Fcv,
    Ncv,
}

/// Per-fold, per-epoch validation accuracy: `acc[i][j]` is fold `i`, epoch `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(acc: Vec<Vec<f64>>) -> Result<Self> {
        if acc.is_empty() || acc[0].is_empty() {
            return Err(Error::Validation("accuracy matrix must be non-empty".into()));
        }
        let t = acc[0].len();
        for (i, row) in acc.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Validation(format!(
                    "accuracy matrix row {i} has {} cells, expected {t}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "accuracy out of range at fold {i}, epoch {j}: {v}"
                    )));
                }
            }
        }
        Ok(AccuracyMatrix { acc })
    }

    pub fn k(&self) -> usize {
        self.acc.len()
    }

    pub fn t(&self) -> usize {
        self.acc[0].len()
    }

    /// Column means `AVG_j`.
    pub fn column_means(&self) -> Vec<f64> {
        let t = self.t();
        let k = self.k() as f64;
        (0..t)
            .map(|j| self.acc.iter().map(|row| row[j]).sum::<f64>() / k)
            .collect()
    }
}

/// One hyper-parameter assignment from the tuning grid. `None` means "use the
/// configured value".
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
}

impl GridPoint {
    pub fn apply_to(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        if let Some(lr) = self.learning_rate {
            out.learning_rate = lr;
        }
        out
    }
}

impl std::fmt::Display for GridPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.learning_rate, self.hidden_dim) {
            (None, None) => write!(f, "default"),
            (lr, hd) => {
                if let Some(lr) = lr {
                    write!(f, "lr={lr}")?;
                    if hd.is_some() {
                        write!(f, ",")?;
                    }
                }
                if let Some(hd) = hd {
                    write!(f, "hidden={hd}")?;
                }
                Ok(())
            }
        }
    }
}

/// Which protocol step touched a slice of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phase {
    Train { fold: usize },
    Validate { fold: usize },
    InnerTrain { outer: usize, grid: usize, inner: usize },
    InnerValidate { outer: usize, grid: usize, inner: usize },
    FinalTrain { outer: usize },
    TestEvaluate { outer: usize },
    DatTargetPool { outer: usize },
}

impl Phase {
    /// The outer NCV fold this phase belongs to, if any.
    fn outer_fold(&self) -> Option<usize> {
        match *self {
            Phase::InnerTrain { outer, .. }
            | Phase::InnerValidate { outer, .. }
            | Phase::FinalTrain { outer }
            | Phase::TestEvaluate { outer }
            | Phase::DatTargetPool { outer } => Some(outer),
            Phase::Train { .. } | Phase::Validate { .. } => None,
        }
    }
}

/// One audited slice creation: which phase read which sample indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub phase: Phase,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub records: Vec<AccessRecord>,
}

impl AuditLog {
    pub fn push(&mut self, phase: Phase, indices: &[usize]) {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        self.records.push(AccessRecord {
            phase,
            indices: sorted,
        });
    }
}

/// Materialize a dataset slice (f64 features, usize labels) and record the
/// access under `phase`.
fn audited_slice(ds: &Dataset, indices: &[usize], phase: Phase, log: &mut AuditLog) -> LabeledSlice {
    log.push(phase, indices);
    materialize_slice(ds, indices)
}

/// Materialize a dataset slice without audit (helper for callers that manage
/// their own logging).
pub fn materialize_slice(ds: &Dataset, indices: &[usize]) -> LabeledSlice {
    let (n, d) = (ds.n_nodes(), ds.n_features());
    let mut features = Array3::<f64>::zeros((indices.len(), n, d));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let src = ds.features.index_axis(Axis(0), i);
        features
            .index_axis_mut(Axis(0), row)
            .zip_mut_with(&src, |dst, &v| *dst = v as f64);
        labels.push(ds.labels[i] as usize);
    }
    LabeledSlice { features, labels }
}

/// Result of one protocol run, including the audit trail and fold plan needed
/// to replay or inspect it.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolResult {
    pub protocol: ProtocolKind,
    pub summary_accuracy: f64,
    /// CV: `MAX_i`. FCV: the selected column. NCV: per-outer test accuracy.
    pub per_fold: Vec<f64>,
    /// FCV's fixed epoch (1-based). For NCV, present only when every outer
    /// fold selected the same `T'`.
    pub selected_epoch: Option<usize>,
    /// CV: `EPO_i` per fold. NCV: `T'` per outer fold. All 1-based.
    pub per_fold_epochs: Option<Vec<usize>>,
    /// NCV: present when every outer fold agreed on one grid point.
    pub selected_grid_point: Option<GridPoint>,
    /// CV/FCV validation matrix.
    pub acc_matrix: Option<AccuracyMatrix>,
    /// NCV per-outer-fold detail, including all inner matrices.
    pub ncv_outer: Option<Vec<OuterFoldDetail>>,
    pub fold_plan: Option<FoldPlan>,
    pub audit_log: AuditLog,
}

#[derive(Debug, Clone, Serialize)]
pub struct InnerGridOutcome {
    pub grid_point: GridPoint,
    pub matrix: Option<AccuracyMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OuterFoldDetail {
    pub outer_fold: usize,
    pub test_accuracy: f64,
    pub grid_index: usize,
    pub grid_point: GridPoint,
    /// 1-based epoch count selected by the inner folds.
    pub t_prime: usize,
    pub inner: Vec<InnerGridOutcome>,
}

/// Train `T` epochs, evaluating on the validation slice after each.
fn train_and_curve(
    mut trainer: Trainer,
    train_slice: &LabeledSlice,
    val_slice: &LabeledSlice,
    t_epochs: usize,
    extras: &TrainExtras,
) -> Result<(Vec<f64>, Trainer)> {
    let mut curve = Vec::with_capacity(t_epochs);
    for _ in 0..t_epochs {
        trainer.train_epoch(train_slice, extras)?;
        curve.push(evaluate(&trainer.model, val_slice)?);
    }
    Ok((curve, trainer))
}

/// Evaluate a model factory over a fold plan: for each fold, a fresh model
/// (seeded `base + fold`) trains on the complement for `t_epochs`, recording
/// validation accuracy on the held-out fold after every epoch.
pub fn collect_acc_matrix<F>(
    factory: &F,
    plan: &FoldPlan,
    ds: &Dataset,
    cfg: &TrainConfig,
    t_epochs: usize,
) -> Result<(AccuracyMatrix, AuditLog)>
where
    F: Fn(&GridPoint, u64) -> Result<Model> + Sync,
{
    if t_epochs == 0 {
        return Err(Error::Validation("need at least one epoch".into()));
    }
    plan.validate(
        ds.n_samples(),
        (plan.mode == SplitMode::Cross).then_some(ds.subjects.as_slice()),
    )?;
    let mut rows = Vec::with_capacity(plan.k());
    let mut log = AuditLog::default();
    for fold in 0..plan.k() {
        let seed = cfg.seed.wrapping_add(fold as u64);
        let model = factory(&GridPoint::default(), seed)?;
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = seed;
        let trainer = Trainer::new(model, fold_cfg)?;
        let train_slice = audited_slice(ds, &plan.complement(fold), Phase::Train { fold }, &mut log);
        let val_slice = audited_slice(ds, &plan.folds[fold], Phase::Validate { fold }, &mut log);
        let (curve, _) = train_and_curve(trainer, &train_slice, &val_slice, t_epochs, &TrainExtras::none())
            .map_err(|e| Error::FoldFailed {
                fold,
                source: Box::new(e),
            })?;
        rows.push(curve);
    }
    Ok((AccuracyMatrix::new(rows)?, log))
}

/// CV summary: per fold the best epoch (`EPO_i`, ties to the lowest index) and
/// its accuracy `MAX_i`; the summary averages the `MAX_i`.
pub fn cv_summary(acc: &AccuracyMatrix) -> ProtocolResult {
    let mut per_fold = Vec::with_capacity(acc.k());
    let mut epochs = Vec::with_capacity(acc.k());
    for row in &acc.acc {
        let (epo, max) = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        per_fold.push(max);
        epochs.push(epo + 1);
    }
    let summary = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    ProtocolResult {
        protocol: ProtocolKind::Cv,
        summary_accuracy: summary,
        per_fold,
        selected_epoch: None,
        per_fold_epochs: Some(epochs),
        selected_grid_point: None,
        acc_matrix: Some(acc.clone()),
        ncv_outer: None,
        fold_plan: None,
        audit_log: AuditLog::default(),
    }
}

/// FCV summary: one fixed epoch maximizing the fold-averaged accuracy curve
/// (`AVG_j`), ties to the lowest index.
pub fn fcv_summary(acc: &AccuracyMatrix) -> ProtocolResult {
    let means = acc.column_means();
    let (epoch, best) = means
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    let per_fold: Vec<f64> = acc.acc.iter().map(|row| row[epoch]).collect();
    ProtocolResult {
        protocol: ProtocolKind::Fcv,
        summary_accuracy: best,
        per_fold,
        selected_epoch: Some(epoch + 1),
        per_fold_epochs: None,
        selected_grid_point: None,
        acc_matrix: Some(acc.clone()),
        ncv_outer: None,
        fold_plan: None,
        audit_log: AuditLog::default(),
    }
}

/// Split the dataset according to `mode`.
pub fn make_plan(ds: &Dataset, mode: SplitMode, k: usize, seed: u64) -> Result<FoldPlan> {
    match mode {
        SplitMode::Intra => split_intra(ds.n_samples(), k, seed),
        SplitMode::Cross => split_cross(&ds.subjects, k, seed),
    }
}

/// Run CV or FCV end to end: split, collect the accuracy matrix, summarize.
pub fn run_cv<F>(
    factory: &F,
    ds: &Dataset,
    mode: SplitMode,
    kind: ProtocolKind,
    k: usize,
    t_epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProtocolResult>
where
    F: Fn(&GridPoint, u64) -> Result<Model> + Sync,
{
    let plan = make_plan(ds, mode, k, seed)?;
    let (matrix, log) = collect_acc_matrix(factory, &plan, ds, cfg, t_epochs)?;
    let mut result = match kind {
        ProtocolKind::Cv => cv_summary(&matrix),
        ProtocolKind::Fcv => fcv_summary(&matrix),
        ProtocolKind::Ncv => {
            return Err(Error::Validation("run_cv does not handle ncv".into()))
        }
    };
    result.fold_plan = Some(plan);
    result.audit_log = log;
    Ok(result)
}

/// Select the grid point and 1-based epoch maximizing the inner-fold-averaged
/// accuracy. Ties break toward earlier grid entries, then lower epochs.
pub fn tune_grid(outcomes: &[InnerGridOutcome]) -> Result<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (g, outcome) in outcomes.iter().enumerate() {
        let matrix = match &outcome.matrix {
            Some(m) => m,
            None => continue,
        };
        let means = matrix.column_means();
        let (epoch, value) = means
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let candidate = (g, epoch + 1, value);
        best = match best {
            None => Some(candidate),
            Some(cur) if candidate.2 > cur.2 => Some(candidate),
            Some(cur) => Some(cur),
        };
    }
    best.ok_or_else(|| Error::Validation("all grid points failed during inner tuning".into()))
}

/// Restrict a fold plan's world to `subset` (global indices): split the subset
/// with the same mode, then map positions back to global indices.
fn split_subset(
    ds: &Dataset,
    subset: &[usize],
    mode: SplitMode,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    let plan = match mode {
        SplitMode::Intra => split_intra(subset.len(), k, seed)?,
        SplitMode::Cross => {
            let subjects: Vec<i32> = subset.iter().map(|&i| ds.subjects[i]).collect();
            split_cross(&subjects, k, seed)?
        }
    };
    Ok(FoldPlan {
        mode: plan.mode,
        seed: plan.seed,
        folds: plan
            .folds
            .into_iter()
            .map(|fold| fold.into_iter().map(|pos| subset[pos]).collect())
            .collect(),
    })
}

/// Everything `ncv_run` needs beyond the dataset itself.
pub struct NcvSettings {
    pub mode: SplitMode,
    pub k: usize,
    pub k_inner: usize,
    pub t_epochs: usize,
    pub grid: Vec<GridPoint>,
    pub seed: u64,
    /// Worker threads for outer folds; results are identical for any value.
    pub jobs: usize,
    /// Feed half of each outer fold's training-side subjects to NodeDAT as
    /// the unlabeled adaptation pool (only meaningful for rgnn + node_dat).
    pub dat_from_train_subjects: bool,
}

impl NcvSettings {
    pub fn new(mode: SplitMode, k: usize, k_inner: usize, t_epochs: usize) -> Self {
        NcvSettings {
            mode,
            k,
            k_inner,
            t_epochs,
            grid: vec![GridPoint::default()],
            seed: 0,
            jobs: 1,
            dat_from_train_subjects: false,
        }
    }
}

struct OuterOutcome {
    detail: OuterFoldDetail,
    log: AuditLog,
}

/// Nested cross-validation. Per outer fold: the training side is split into
/// `k_inner` folds; every grid point trains `t_epochs` on each inner split,
/// recording validation curves; the best (grid point, epoch) pair retrains on
/// the whole training side and is scored once on the untouched test fold.
///
/// The returned audit log is checked for leakage before this function
/// returns; a test-fold access outside the final evaluation is a hard error.
pub fn ncv_run<F>(
    factory: &F,
    ds: &Dataset,
    settings: &NcvSettings,
    cfg: &TrainConfig,
) -> Result<ProtocolResult>
where
    F: Fn(&GridPoint, u64) -> Result<Model> + Sync,
{
    if settings.k < 2 || settings.k_inner < 2 {
        return Err(Error::Validation(format!(
            "ncv requires K >= 2 and K' >= 2, got K={} K'={}",
            settings.k, settings.k_inner
        )));
    }
    if settings.grid.is_empty() {
        return Err(Error::Validation("ncv grid must be non-empty".into()));
    }
    if settings.t_epochs == 0 {
        return Err(Error::Validation("need at least one epoch".into()));
    }
    let outer_plan = make_plan(ds, settings.mode, settings.k, settings.seed)?;
    outer_plan.validate(
        ds.n_samples(),
        (settings.mode == SplitMode::Cross).then_some(ds.subjects.as_slice()),
    )?;

    let run_outer = |outer: usize| -> Result<OuterOutcome> {
        run_outer_fold(factory, ds, settings, cfg, &outer_plan, outer)
    };
    let outcomes: Vec<Result<OuterOutcome>> = if settings.jobs > 1 {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
        {
            Ok(pool) => pool.install(|| {
                use rayon::prelude::*;
                (0..settings.k).into_par_iter().map(run_outer).collect()
            }),
            Err(_) => (0..settings.k).map(run_outer).collect(),
        }
    } else {
        (0..settings.k).map(run_outer).collect()
    };

    let mut details = Vec::with_capacity(settings.k);
    let mut log = AuditLog::default();
    for outcome in outcomes {
        let outcome = outcome?;
        log.records.extend(outcome.log.records);
        details.push(outcome.detail);
    }

    check_no_test_leakage(&outer_plan, &log)?;

    let per_fold: Vec<f64> = details.iter().map(|d| d.test_accuracy).collect();
    let summary = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    let epochs: Vec<usize> = details.iter().map(|d| d.t_prime).collect();
    let same_grid = details
        .windows(2)
        .all(|w| w[0].grid_index == w[1].grid_index);
    let same_epoch = epochs.windows(2).all(|w| w[0] == w[1]);
    Ok(ProtocolResult {
        protocol: ProtocolKind::Ncv,
        summary_accuracy: summary,
        per_fold,
        selected_epoch: same_epoch.then(|| epochs[0]),
        per_fold_epochs: Some(epochs),
        selected_grid_point: same_grid.then(|| details[0].grid_point),
        acc_matrix: None,
        ncv_outer: Some(details),
        fold_plan: Some(outer_plan),
        audit_log: log,
    })
}

fn run_outer_fold<F>(
    factory: &F,
    ds: &Dataset,
    settings: &NcvSettings,
    cfg: &TrainConfig,
    outer_plan: &FoldPlan,
    outer: usize,
) -> Result<OuterOutcome>
where
    F: Fn(&GridPoint, u64) -> Result<Model> + Sync,
{
    let mut log = AuditLog::default();
    let trainval: Vec<usize> = outer_plan.complement(outer);
    let inner_seed = derive_seed(settings.seed, &[outer as u64, 1]);
    let inner_plan = split_subset(ds, &trainval, settings.mode, settings.k_inner, inner_seed)?;

    // NodeDAT adaptation pool: the latter half of the training-side subjects,
    // never anything from the test fold.
    let dat_pool: Option<Array3<f64>> = if settings.dat_from_train_subjects {
        let mut subjects: Vec<i32> = trainval.iter().map(|&i| ds.subjects[i]).collect();
        subjects.sort_unstable();
        subjects.dedup();
        let half = &subjects[subjects.len() / 2..];
        let picked: Vec<usize> = trainval
            .iter()
            .copied()
            .filter(|&i| half.contains(&ds.subjects[i]))
            .collect();
        if picked.is_empty() {
            None
        } else {
            let slice = audited_slice(ds, &picked, Phase::DatTargetPool { outer }, &mut log);
            Some(slice.features)
        }
    } else {
        None
    };
    let extras = match &dat_pool {
        Some(pool) => TrainExtras::with_dat_target(pool.clone(), 1.0),
        None => TrainExtras::none(),
    };

    let mut outcomes = Vec::with_capacity(settings.grid.len());
    let mut first_error: Option<Error> = None;
    for (g, point) in settings.grid.iter().enumerate() {
        let mut rows = Vec::with_capacity(settings.k_inner);
        let mut failed: Option<String> = None;
        for inner in 0..settings.k_inner {
            let seed = derive_seed(settings.seed, &[outer as u64, g as u64, inner as u64, 2]);
            let model = match factory(point, seed) {
                Ok(m) => m,
                Err(e) => {
                    failed = Some(e.to_string());
                    first_error.get_or_insert(e);
                    break;
                }
            };
            let mut inner_cfg = point.apply_to(cfg);
            inner_cfg.seed = seed;
            let trainer = Trainer::new(model, inner_cfg)?;
            let train_slice = audited_slice(
                ds,
                &inner_plan.complement(inner),
                Phase::InnerTrain { outer, grid: g, inner },
                &mut log,
            );
            let val_slice = audited_slice(
                ds,
                &inner_plan.folds[inner],
                Phase::InnerValidate { outer, grid: g, inner },
                &mut log,
            );
            match train_and_curve(trainer, &train_slice, &val_slice, settings.t_epochs, &extras) {
                Ok((curve, _)) => rows.push(curve),
                Err(e @ (Error::Divergence { .. } | Error::NonFinite(_))) => {
                    failed = Some(e.to_string());
                    first_error.get_or_insert(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        outcomes.push(InnerGridOutcome {
            grid_point: *point,
            matrix: match failed {
                None => Some(AccuracyMatrix::new(rows)?),
                Some(_) => None,
            },
            error: failed,
        });
    }

    let (grid_index, t_prime, _) = tune_grid(&outcomes).map_err(|e| match first_error.take() {
        Some(inner) => Error::FoldFailed {
            fold: outer,
            source: Box::new(inner),
        },
        None => e,
    })?;
    let point = settings.grid[grid_index];

    // Re-initialize and train T' epochs on the full training side.
    let final_seed = derive_seed(settings.seed, &[outer as u64, 3]);
    let model = factory(&point, final_seed)?;
    let mut final_cfg = point.apply_to(cfg);
    final_cfg.seed = final_seed;
    let mut trainer = Trainer::new(model, final_cfg)?;
    let train_slice = audited_slice(ds, &trainval, Phase::FinalTrain { outer }, &mut log);
    for _ in 0..t_prime {
        trainer
            .train_epoch(&train_slice, &extras)
            .map_err(|e| Error::FoldFailed {
                fold: outer,
                source: Box::new(e),
            })?;
    }
    let test_slice = audited_slice(
        ds,
        &outer_plan.folds[outer],
        Phase::TestEvaluate { outer },
        &mut log,
    );
    let test_accuracy = evaluate(&trainer.model, &test_slice)?;

    Ok(OuterOutcome {
        detail: OuterFoldDetail {
            outer_fold: outer,
            test_accuracy,
            grid_index,
            grid_point: point,
            t_prime,
            inner: outcomes,
        },
        log,
    })
}

/// Verify that, per outer fold, no phase other than the final test evaluation
/// ever touched a test index, and that the test evaluation came last.
pub fn check_no_test_leakage(outer_plan: &FoldPlan, log: &AuditLog) -> Result<()> {
    for (outer, test_fold) in outer_plan.folds.iter().enumerate() {
        let test_set: HashSet<usize> = test_fold.iter().copied().collect();
        let mut seen_test_eval = false;
        for record in &log.records {
            if record.phase.outer_fold() != Some(outer) {
                continue;
            }
            if record.phase == (Phase::TestEvaluate { outer }) {
                seen_test_eval = true;
                continue;
            }
            if seen_test_eval {
                return Err(Error::Leakage(format!(
                    "outer fold {outer}: phase {:?} recorded after the test evaluation",
                    record.phase
                )));
            }
            if let Some(&idx) = record.indices.iter().find(|i| test_set.contains(i)) {
                return Err(Error::Leakage(format!(
                    "outer fold {outer}: test sample {idx} accessed during {:?}",
                    record.phase
                )));
            }
        }
        if !seen_test_eval {
            return Err(Error::Leakage(format!(
                "outer fold {outer}: no test evaluation recorded"
            )));
        }
    }
    Ok(())
}
