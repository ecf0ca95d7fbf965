//! Adjacency construction and the symmetric normalization used by every model:
//! `A_hat = D^{-1/2} A D^{-1/2}` with `D_ii = sum_j A_ij`.
//!
//! Signed adjacencies (negative entries mark global connections) are supported
//! by normalizing with `|D_ii|`; a degree whose magnitude falls below `1e-12`
//! is reported as degenerate rather than silently inverted.

use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const DEGREE_EPS: f64 = 1e-12;

/// Node count, adjacency and optional electrode geometry for building models.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub n_nodes: usize,
    /// Square adjacency with self-loops included.
    pub adjacency: Array2<f64>,
    /// Optional electrode coordinates, one `[x, y, z]` row per node.
    pub positions: Option<Array2<f64>>,
    pub global_pairs: Option<Vec<(usize, usize)>>,
}

impl GraphSpec {
    pub fn new(adjacency: Array2<f64>) -> Result<Self> {
        if adjacency.nrows() != adjacency.ncols() {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        if adjacency.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("adjacency contains non-finite entries".into()));
        }
        Ok(GraphSpec {
            n_nodes: adjacency.nrows(),
            adjacency,
            positions: None,
            global_pairs: None,
        })
    }

    /// The least-informative prior: every entry 1, self-loops included.
    pub fn fully_connected(n_nodes: usize) -> Self {
        GraphSpec {
            n_nodes,
            adjacency: Array2::ones((n_nodes, n_nodes)),
            positions: None,
            global_pairs: None,
        }
    }

    /// True when usable as a DGCNN / SparseDGCNN initial adjacency:
    /// elementwise nonnegative with strictly positive diagonal.
    pub fn is_nonnegative_with_self_loops(&self) -> bool {
        self.adjacency.iter().all(|&v| v >= 0.0)
            && self.adjacency.diag().iter().all(|&v| v > 0.0)
    }
}

/// Symmetric degree normalization: `out_ij = A_ij / sqrt(|D_ii| * |D_jj|)`.
///
/// Errors with the offending node index when any `|D_ii| <= 1e-12`.
pub fn normalize_adjacency(a: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "adjacency must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mut inv_sqrt = vec![0.0f64; n];
    for i in 0..n {
        let degree: f64 = a.row(i).sum();
        let mag = degree.abs();
        if mag <= DEGREE_EPS {
            return Err(Error::DegenerateDegree {
                node: i,
                value: mag,
            });
        }
        inv_sqrt[i] = 1.0 / mag.sqrt();
    }
    let mut out = a.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v *= inv_sqrt[i] * inv_sqrt[j];
    }
    Ok(out)
}

/// Distance-based adjacency: `A_ij = min(1, delta / d(i,j)^2)` off the
/// diagonal, `A_ii = 1`, then `global_pairs` overwritten symmetrically with
/// `global_weight` (which must be negative when pairs are given).
pub fn init_adjacency(
    positions: &Array2<f64>,
    delta: f64,
    global_pairs: &[(usize, usize)],
    global_weight: f64,
) -> Result<Array2<f64>> {
    let n = positions.nrows();
    if positions.ncols() != 3 {
        return Err(Error::Shape(format!(
            "positions must be [n, 3], got [{}, {}]",
            n,
            positions.ncols()
        )));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("positions contain non-finite values".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("delta must be positive, got {delta}")));
    }
    if !global_pairs.is_empty() && global_weight >= 0.0 {
        return Err(Error::Validation(format!(
            "global_weight must be negative for global connections, got {global_weight}"
        )));
    }
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let d2: f64 = (0..3)
                .map(|k| {
                    let diff = positions[[i, k]] - positions[[j, k]];
                    diff * diff
                })
                .sum();
            if d2 == 0.0 {
                return Err(Error::Validation(format!(
                    "electrodes {i} and {j} are coincident"
                )));
            }
            let w = (delta / d2).min(1.0);
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    for &(i, j) in global_pairs {
        if i >= n || j >= n {
            return Err(Error::Validation(format!(
                "global pair ({i}, {j}) out of range for {n} nodes"
            )));
        }
        a[[i, j]] = global_weight;
        a[[j, i]] = global_weight;
    }
    Ok(a)
}

#[derive(Deserialize)]
#[serde(transparent)]
struct PositionsDoc(Vec<[f64; 3]>);

/// Parse electrode positions from a JSON array of `[x, y, z]` triples.
pub fn parse_positions(bytes: &[u8]) -> Result<Array2<f64>> {
    let doc: PositionsDoc = serde_json::from_slice(bytes).map_err(|e| Error::Format {
        file: "positions".into(),
        message: e.to_string(),
    })?;
    if doc.0.is_empty() {
        return Err(Error::Format {
            file: "positions".into(),
            message: "empty position list".into(),
        });
    }
    let n = doc.0.len();
    let flat: Vec<f64> = doc.0.into_iter().flatten().collect();
    let arr = Array2::from_shape_vec((n, 3), flat).expect("triples flatten to n x 3");
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            file: "positions".into(),
            message: "non-finite coordinate".into(),
        });
    }
    Ok(arr)
}

pub fn load_positions(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_positions(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn identity_is_a_fixed_point() {
        let eye: Array2<f64> = Array2::eye(4);
        let out = normalize_adjacency(&eye).unwrap();
        assert_eq!(out, eye);
    }

    #[test]
    fn two_node_all_ones_normalizes_to_halves() {
        let a = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let out = normalize_adjacency(&a).unwrap();
        // D = diag(2, 2) by hand, so every entry becomes 1/2.
        for &v in out.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_row_names_the_degenerate_node() {
        let a = arr2(&[[1.0, 0.5], [0.0, 0.0]]);
        match normalize_adjacency(&a).unwrap_err() {
            Error::DegenerateDegree { node, .. } => assert_eq!(node, 1),
            other => panic!("expected degenerate degree, got {other:?}"),
        }
    }

    #[test]
    fn signed_rows_use_absolute_degree() {
        let a = arr2(&[[1.0, -3.0], [-3.0, 1.0]]);
        // degrees are -2 on both rows; |D| = 2.
        let out = normalize_adjacency(&a).unwrap();
        assert!((out[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((out[[0, 1]] + 1.5).abs() < 1e-15);
    }

    #[test]
    fn scale_invariance_of_normalization() {
        let a = arr2(&[[1.0, 0.3, 0.0], [0.3, 2.0, 0.7], [0.0, 0.7, 1.5]]);
        let base = normalize_adjacency(&a).unwrap();
        for c in [0.1, 3.0, 1e6] {
            let scaled = normalize_adjacency(&(&a * c)).unwrap();
            for (x, y) in base.iter().zip(scaled.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distance_two_gives_quarter_weight() {
        let pos = arr2(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let a = init_adjacency(&pos, 1.0, &[], -1.0).unwrap();
        assert!((a[[0, 1]] - 0.25).abs() < 1e-15);
        assert!((a[[1, 0]] - 0.25).abs() < 1e-15);
        assert_eq!(a[[0, 0]], 1.0);
    }

    #[test]
    fn distance_sqrt_delta_saturates_at_one() {
        let delta = 0.36_f64;
        let d = delta.sqrt();
        let pos = arr2(&[[0.0, 0.0, 0.0], [d, 0.0, 0.0]]);
        let a = init_adjacency(&pos, delta, &[], -1.0).unwrap();
        assert_eq!(a[[0, 1]], 1.0);
    }

    #[test]
    fn global_pairs_overwrite_symmetrically_with_negative_weight() {
        let pos = arr2(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let a = init_adjacency(&pos, 1.0, &[(0, 1)], -1.0).unwrap();
        assert_eq!(a[[0, 1]], -1.0);
        assert_eq!(a[[1, 0]], -1.0);
    }

    #[test]
    fn nonnegative_global_weight_with_pairs_is_rejected() {
        let pos = arr2(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert!(init_adjacency(&pos, 1.0, &[(0, 1)], 0.5).is_err());
    }

    #[test]
    fn coincident_electrodes_are_rejected() {
        let pos = arr2(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        assert!(matches!(
            init_adjacency(&pos, 1.0, &[], -1.0).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn positions_json_round_trip() {
        let arr = parse_positions(b"[[0.0,1.0,2.0],[3.0,4.0,5.0]]").unwrap();
        assert_eq!(arr.nrows(), 2);
        assert_eq!(arr[[1, 2]], 5.0);
        assert!(parse_positions(b"[[0.0,1.0]]").is_err());
        assert!(parse_positions(b"not json").is_err());
    }
}
