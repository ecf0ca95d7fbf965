//! Intra-subject and cross-subject K-fold plans.
//!
//! Intra-subject plans shuffle sample indices; fold sizes differ by at most
//! one. Cross-subject plans shuffle distinct subjects, give the first `K - 1`
//! folds `floor(S / K)` subjects each and push the remainder into the last
//! fold (123 subjects at K = 10 yields nine folds of 12 and one of 15).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Intra,
    Cross,
}

/// Ordered list of disjoint index sets covering all samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn n_samples(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    /// All indices outside fold `i`, in ascending order.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Check disjointness and coverage of `0..n_samples`; in cross mode also
    /// check that no subject spans two folds.
    pub fn validate(&self, n_samples: usize, subjects: Option<&[i32]>) -> Result<()> {
        let mut seen = vec![false; n_samples];
        for fold in &self.folds {
            for &idx in fold {
                if idx >= n_samples {
                    return Err(Error::Validation(format!(
                        "fold index {idx} out of range for {n_samples} samples"
                    )));
                }
                if seen[idx] {
                    return Err(Error::Validation(format!(
                        "sample {idx} appears in two folds"
                    )));
                }
                seen[idx] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Validation(format!(
                "sample {missing} is not covered by any fold"
            )));
        }
        if self.mode == SplitMode::Cross {
            let subjects = subjects.ok_or_else(|| {
                Error::Validation("cross-mode validation needs the subject vector".into())
            })?;
            let mut owner: std::collections::HashMap<i32, usize> = Default::default();
            for (f, fold) in self.folds.iter().enumerate() {
                for &idx in fold {
                    match owner.insert(subjects[idx], f) {
                        Some(prev) if prev != f => {
                            return Err(Error::Validation(format!(
                                "subject {} spans folds {} and {}",
                                subjects[idx], prev, f
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fold plan serializes")
    }

    /// Parse a fold plan from JSON and check pairwise disjointness.
    pub fn from_json(bytes: &[u8]) -> Result<FoldPlan> {
        let plan: FoldPlan = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            file: "fold plan".into(),
            message: e.to_string(),
        })?;
        if plan.folds.is_empty() {
            return Err(Error::Validation("fold plan has no folds".into()));
        }
        let mut all: Vec<usize> = plan.folds.iter().flatten().copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return Err(Error::Validation("fold plan has overlapping folds".into()));
        }
        Ok(plan)
    }
}

/// Seeded random partition of `0..n_samples` into `k` folds whose sizes
/// differ by at most one.
pub fn split_intra(n_samples: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    split_intra_blocks(n_samples, k, seed, 1)
}

/// Like [`split_intra`], but keeps contiguous blocks of `block_size` samples
/// together (the last block may be short). `block_size = 1` is plain
/// sample-level shuffling.
pub fn split_intra_blocks(
    n_samples: usize,
    k: usize,
    seed: u64,
    block_size: usize,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    if block_size == 0 {
        return Err(Error::Validation("block_size must be positive".into()));
    }
    let n_blocks = n_samples.div_ceil(block_size);
    if n_blocks < k {
        return Err(Error::Validation(format!(
            "cannot split {n_samples} samples (block size {block_size}) into {k} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<usize> = (0..n_blocks).collect();
    blocks.shuffle(&mut rng);

    // Spread remainder blocks one per fold so sizes differ by at most one.
    let base = n_blocks / k;
    let extra = n_blocks % k;
    let mut folds = Vec::with_capacity(k);
    let mut cursor = 0usize;
    for f in 0..k {
        let take = base + usize::from(f < extra);
        let mut fold = Vec::new();
        for &b in &blocks[cursor..cursor + take] {
            let start = b * block_size;
            let end = ((b + 1) * block_size).min(n_samples);
            fold.extend(start..end);
        }
        cursor += take;
        folds.push(fold);
    }
    Ok(FoldPlan {
        mode: SplitMode::Intra,
        seed,
        folds,
    })
}

/// Seeded cross-subject split: shuffle distinct subjects, assign
/// `floor(S / K)` subjects to each of the first `K - 1` folds and the
/// remainder to the last, then group sample indices by their subject's fold.
pub fn split_cross(subjects: &[i32], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    let mut distinct: Vec<i32> = Vec::new();
    for &s in subjects {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    distinct.sort_unstable();
    let s_count = distinct.len();
    if s_count < k {
        return Err(Error::Validation(format!(
            "{s_count} distinct subjects cannot fill {k} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    distinct.shuffle(&mut rng);

    let per_fold = s_count / k;
    let mut fold_of_subject: std::collections::HashMap<i32, usize> = Default::default();
    for (pos, &subj) in distinct.iter().enumerate() {
        let fold = (pos / per_fold).min(k - 1);
        fold_of_subject.insert(subj, fold);
    }
    let mut folds = vec![Vec::new(); k];
    for (idx, &subj) in subjects.iter().enumerate() {
        folds[fold_of_subject[&subj]].push(idx);
    }
    Ok(FoldPlan {
        mode: SplitMode::Cross,
        seed,
        folds,
    })
}
