//! Dataset model, its on-disk format, and a deterministic synthetic generator.
//!
//! A dataset directory holds four files:
//!
//! ```text
//! <dir>/
//!   meta.json      format_version, n_samples, n_nodes, n_features, n_classes, band_names
//!   features.bin   little-endian f32, row-major sample -> node -> feature
//!   labels.bin     little-endian i32, one per sample
//!   subjects.bin   little-endian i32, one per sample
//! ```
//!
//! As a convenience, `features.csv` (one sample per row) is accepted in place
//! of `features.bin` when `n_nodes * n_features <= 1024`.
//!
//! The synthetic generator places class means at scaled one-hot corners of the
//! flattened feature space (pairwise distance exactly `class_separation * sqrt(2)`),
//! adds a per-subject Gaussian offset and i.i.d. noise, and is a pure function
//! of its spec.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Sample-major feature tensor with per-sample class label and subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n_samples, n_nodes, n_features]`
    pub features: Array3<f32>,
    pub labels: Vec<i32>,
    pub subjects: Vec<i32>,
    pub n_classes: usize,
    pub band_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.len_of(Axis(0))
    }

    pub fn n_nodes(&self) -> usize {
        self.features.len_of(Axis(1))
    }

    pub fn n_features(&self) -> usize {
        self.features.len_of(Axis(2))
    }

    /// Distinct subject ids in first-appearance order.
    pub fn distinct_subjects(&self) -> Vec<i32> {
        let mut seen = Vec::new();
        for &s in &self.subjects {
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen
    }

    pub fn validate(&self) -> Result<()> {
        let report = validate_dataset(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(report.to_string()))
        }
    }
}

/// One dataset invariant violation, with enough indices to locate it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    LabelOutOfRange {
        sample: usize,
        label: i32,
        n_classes: usize,
    },
    NegativeSubject {
        sample: usize,
        subject: i32,
    },
    NonFiniteFeature {
        sample: usize,
        node: usize,
        feature: usize,
    },
    BandNamesLength {
        expected: usize,
        actual: usize,
    },
    NoClasses,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                what,
                expected,
                actual,
            } => write!(f, "{what}: expected length {expected}, found {actual}"),
            Violation::LabelOutOfRange {
                sample,
                label,
                n_classes,
            } => write!(
                f,
                "label {label} at sample {sample} outside [0, {n_classes})"
            ),
            Violation::NegativeSubject { sample, subject } => {
                write!(f, "negative subject id {subject} at sample {sample}")
            }
            Violation::NonFiniteFeature {
                sample,
                node,
                feature,
            } => write!(
                f,
                "non-finite feature at sample {sample}, node {node}, feature {feature}"
            ),
            Violation::BandNamesLength { expected, actual } => {
                write!(f, "band_names: expected {expected} entries, found {actual}")
            }
            Violation::NoClasses => write!(f, "n_classes must be positive"),
        }
    }
}

/// Result of [`validate_dataset`]: empty iff the dataset satisfies every invariant.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "dataset valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check every dataset invariant and report all violations found.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = ds.n_samples();
    if ds.labels.len() != n {
        report.violations.push(Violation::LengthMismatch {
            what: "labels",
            expected: n,
            actual: ds.labels.len(),
        });
    }
    if ds.subjects.len() != n {
        report.violations.push(Violation::LengthMismatch {
            what: "subjects",
            expected: n,
            actual: ds.subjects.len(),
        });
    }
    if ds.n_classes == 0 {
        report.violations.push(Violation::NoClasses);
    }
    for (sample, &l) in ds.labels.iter().enumerate().take(n) {
        if l < 0 || l as usize >= ds.n_classes {
            report.violations.push(Violation::LabelOutOfRange {
                sample,
                label: l,
                n_classes: ds.n_classes,
            });
        }
    }
    for (sample, &s) in ds.subjects.iter().enumerate().take(n) {
        if s < 0 {
            report
                .violations
                .push(Violation::NegativeSubject { sample, subject: s });
        }
    }
    for ((sample, node, feature), &v) in ds.features.indexed_iter() {
        if !v.is_finite() {
            report.violations.push(Violation::NonFiniteFeature {
                sample,
                node,
                feature,
            });
        }
    }
    if let Some(names) = &ds.band_names {
        if names.len() != ds.n_features() {
            report.violations.push(Violation::BandNamesLength {
                expected: ds.n_features(),
                actual: names.len(),
            });
        }
    }
    report
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_samples: usize,
    n_nodes: usize,
    n_features: usize,
    n_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    band_names: Option<Vec<String>>,
}

/// Parse and sanity-check a `meta.json` payload.
pub fn parse_meta(bytes: &[u8]) -> Result<DatasetMeta> {
    let meta: Meta = serde_json::from_slice(bytes).map_err(|e| Error::Format {
        file: "meta.json".into(),
        message: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: meta.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if meta.n_nodes == 0 || meta.n_features == 0 || meta.n_classes == 0 {
        return Err(Error::Format {
            file: "meta.json".into(),
            message: "n_nodes, n_features and n_classes must be positive".into(),
        });
    }
    // Reject dimension products that cannot be addressed in memory.
    let feat_count = meta
        .n_samples
        .checked_mul(meta.n_nodes)
        .and_then(|v| v.checked_mul(meta.n_features))
        .and_then(|v| v.checked_mul(4));
    if feat_count.is_none() {
        return Err(Error::Format {
            file: "meta.json".into(),
            message: "dimension product overflows".into(),
        });
    }
    Ok(DatasetMeta {
        n_samples: meta.n_samples,
        n_nodes: meta.n_nodes,
        n_features: meta.n_features,
        n_classes: meta.n_classes,
        band_names: meta.band_names,
    })
}

/// Validated header of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub n_samples: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub band_names: Option<Vec<String>>,
}

fn decode_f32_le(bytes: &[u8], expected: usize, file: &str) -> Result<Vec<f32>> {
    let expected_bytes = expected as u64 * 4;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::SizeMismatch {
            file: file.into(),
            expected: expected_bytes,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn decode_i32_le(bytes: &[u8], expected: usize, file: &str) -> Result<Vec<i32>> {
    let expected_bytes = expected as u64 * 4;
    if bytes.len() as u64 != expected_bytes {
        return Err(Error::SizeMismatch {
            file: file.into(),
            expected: expected_bytes,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Parse `features.csv`: one sample per row, `n_nodes * n_features` columns.
pub fn parse_features_csv(bytes: &[u8], meta: &DatasetMeta) -> Result<Vec<f32>> {
    let per_row = meta.n_nodes * meta.n_features;
    if per_row > 1024 {
        return Err(Error::Format {
            file: "features.csv".into(),
            message: format!("csv features limited to 1024 values per sample, got {per_row}"),
        });
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format {
        file: "features.csv".into(),
        message: "not valid utf-8".into(),
    })?;
    let mut values = Vec::with_capacity(per_row * meta.n_samples.min(1 << 20));
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| Error::Format {
                file: "features.csv".into(),
                message: format!("line {}: bad float {:?}", lineno + 1, field.trim()),
            })?;
            values.push(v);
            count += 1;
        }
        if count != per_row {
            return Err(Error::Format {
                file: "features.csv".into(),
                message: format!("line {}: expected {per_row} values, found {count}", lineno + 1),
            });
        }
        rows += 1;
    }
    if rows != meta.n_samples {
        return Err(Error::SizeMismatch {
            file: "features.csv".into(),
            expected: meta.n_samples as u64,
            actual: rows as u64,
        });
    }
    Ok(values)
}

/// Assemble a dataset from raw file payloads. This is the single parsing path
/// behind [`load_dataset`]; it never touches the filesystem.
pub fn load_dataset_from_parts(
    meta_bytes: &[u8],
    features_bytes: &[u8],
    labels_bytes: &[u8],
    subjects_bytes: &[u8],
) -> Result<Dataset> {
    let meta = parse_meta(meta_bytes)?;
    let feat = decode_f32_le(
        features_bytes,
        meta.n_samples * meta.n_nodes * meta.n_features,
        "features.bin",
    )?;
    assemble(meta, feat, labels_bytes, subjects_bytes)
}

/// Same as [`load_dataset_from_parts`] but with CSV features.
pub fn load_dataset_from_parts_csv(
    meta_bytes: &[u8],
    features_csv: &[u8],
    labels_bytes: &[u8],
    subjects_bytes: &[u8],
) -> Result<Dataset> {
    let meta = parse_meta(meta_bytes)?;
    let feat = parse_features_csv(features_csv, &meta)?;
    assemble(meta, feat, labels_bytes, subjects_bytes)
}

fn assemble(
    meta: DatasetMeta,
    feat: Vec<f32>,
    labels_bytes: &[u8],
    subjects_bytes: &[u8],
) -> Result<Dataset> {
    let labels = decode_i32_le(labels_bytes, meta.n_samples, "labels.bin")?;
    let subjects = decode_i32_le(subjects_bytes, meta.n_samples, "subjects.bin")?;
    let features =
        Array3::from_shape_vec((meta.n_samples, meta.n_nodes, meta.n_features), feat)
            .map_err(|e| Error::Format {
                file: "features.bin".into(),
                message: e.to_string(),
            })?;
    let ds = Dataset {
        features,
        labels,
        subjects,
        n_classes: meta.n_classes,
        band_names: meta.band_names,
    };
    let report = validate_dataset(&ds);
    if !report.is_valid() {
        return Err(Error::Validation(report.to_string()));
    }
    Ok(ds)
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(path, e))
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_bytes = read_file(dir, "meta.json")?;
    let labels_bytes = read_file(dir, "labels.bin")?;
    let subjects_bytes = read_file(dir, "subjects.bin")?;
    let bin_path = dir.join("features.bin");
    if bin_path.exists() {
        let features_bytes = read_file(dir, "features.bin")?;
        load_dataset_from_parts(&meta_bytes, &features_bytes, &labels_bytes, &subjects_bytes)
    } else {
        let features_csv = read_file(dir, "features.csv")?;
        load_dataset_from_parts_csv(&meta_bytes, &features_csv, &labels_bytes, &subjects_bytes)
    }
}

/// Validate `ds`, then write the four dataset files under `dir`.
///
/// Nothing is written when validation fails.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        n_samples: ds.n_samples(),
        n_nodes: ds.n_nodes(),
        n_features: ds.n_features(),
        n_classes: ds.n_classes,
        band_names: ds.band_names.clone(),
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_atomic(&dir.join("meta.json"), &meta_json)?;

    let mut feat = Vec::with_capacity(ds.features.len() * 4);
    for &v in ds.features.iter() {
        feat.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("features.bin"), &feat)?;

    let mut lab = Vec::with_capacity(ds.labels.len() * 4);
    for &v in &ds.labels {
        lab.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("labels.bin"), &lab)?;

    let mut sub = Vec::with_capacity(ds.subjects.len() * 4);
    for &v in &ds.subjects {
        sub.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("subjects.bin"), &sub)?;
    Ok(())
}

/// Write via a temp file plus rename, so readers never observe partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// Distance scale between class means; pairwise distance is exactly
    /// `class_separation * sqrt(2)`.
    pub class_separation: f64,
    /// Standard deviation of the per-subject mean offset.
    pub subject_shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Parse a `SynthSpec` JSON document.
pub fn parse_synth_spec(bytes: &[u8]) -> Result<SynthSpec> {
    let spec: SynthSpec = serde_json::from_slice(bytes).map_err(|e| Error::Format {
        file: "synth spec".into(),
        message: e.to_string(),
    })?;
    validate_synth_spec(&spec)?;
    Ok(spec)
}

fn validate_synth_spec(spec: &SynthSpec) -> Result<()> {
    if spec.n_subjects == 0
        || spec.samples_per_subject == 0
        || spec.n_nodes == 0
        || spec.n_features == 0
        || spec.n_classes == 0
    {
        return Err(Error::Validation(
            "synth spec requires positive subjects, samples, nodes, features and classes".into(),
        ));
    }
    if spec.n_classes > spec.n_nodes * spec.n_features {
        return Err(Error::Validation(format!(
            "synth spec needs n_classes <= n_nodes * n_features ({} > {})",
            spec.n_classes,
            spec.n_nodes * spec.n_features
        )));
    }
    if spec.class_separation < 0.0 || spec.subject_shift < 0.0 || !(spec.noise_std > 0.0) {
        return Err(Error::Validation(
            "synth spec: class_separation, subject_shift >= 0 and noise_std > 0 required".into(),
        ));
    }
    let total = spec
        .n_subjects
        .checked_mul(spec.samples_per_subject)
        .and_then(|n| n.checked_mul(spec.n_nodes))
        .and_then(|n| n.checked_mul(spec.n_features));
    if total.is_none() {
        return Err(Error::Validation("synth spec dimensions overflow".into()));
    }
    Ok(())
}

/// Generate a dataset from `spec`. Pure: identical specs yield bit-identical
/// datasets.
///
/// Class `c`'s mean tensor is `class_separation` at flattened position `c`,
/// zero elsewhere. Each subject draws a per-dimension offset from
/// `Normal(0, subject_shift^2)`; each sample adds `Normal(0, noise_std^2)`
/// noise. Labels within a subject cycle through the classes, so per-subject
/// class counts are balanced up to rounding.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    use rand::SeedableRng;
    validate_synth_spec(spec)?;
    let dim = spec.n_nodes * spec.n_features;
    let n_samples = spec.n_subjects * spec.samples_per_subject;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Subject offsets are drawn up front so the stream layout is stable.
    let shift = Normal::new(0.0, spec.subject_shift.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut offsets = vec![vec![0.0f64; dim]; spec.n_subjects];
    if spec.subject_shift > 0.0 {
        for off in offsets.iter_mut() {
            for v in off.iter_mut() {
                *v = shift.sample(&mut rng);
            }
        }
    } else {
        for _ in 0..spec.n_subjects * dim {
            let _: f64 = rng.random();
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).expect("valid normal");
    let mut feat = Vec::with_capacity(n_samples * dim);
    let mut labels = Vec::with_capacity(n_samples);
    let mut subjects = Vec::with_capacity(n_samples);
    for subject in 0..spec.n_subjects {
        for k in 0..spec.samples_per_subject {
            let class = k % spec.n_classes;
            for d in 0..dim {
                let mean = if d == class {
                    spec.class_separation
                } else {
                    0.0
                };
                let v = mean + offsets[subject][d] + noise.sample(&mut rng);
                feat.push(v as f32);
            }
            labels.push(class as i32);
            subjects.push(subject as i32);
        }
    }
    let features = Array3::from_shape_vec((n_samples, spec.n_nodes, spec.n_features), feat)
        .expect("shape matches construction");
    Ok(Dataset {
        features,
        labels,
        subjects,
        n_classes: spec.n_classes,
        band_names: None,
    })
}
