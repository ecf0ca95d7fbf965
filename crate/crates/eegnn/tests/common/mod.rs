//! Shared oracles for the integration suites: a central-finite-difference
//! gradient checker and an independent linear classifier baseline.

use eegnn::dataio::Dataset;
use eegnn::models::{training_loss_and_grads, Model};
use ndarray::{Array3, Axis};

/// Worst relative error between tape gradients and central finite differences
/// over every entry of every parameter.
///
/// `feat_objective(total, dat)` maps the loss breakdown to the scalar whose
/// derivative the non-discriminator parameters should match;
/// `disc_objective` does the same for `disc.*` parameters. Plain models pass
/// the identity for both.
#[allow(clippy::too_many_arguments)]
pub fn max_grad_rel_error(
    model: &Model,
    x: &Array3<f64>,
    labels: &[usize],
    l1: f64,
    l2: f64,
    dat: Option<(&Array3<f64>, f64)>,
    feat_objective: &dyn Fn(f64, f64) -> f64,
    disc_objective: &dyn Fn(f64, f64) -> f64,
) -> f64 {
    let (_, grads) = training_loss_and_grads(model, x, labels, l1, l2, dat).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for name in model.param_names() {
        let objective: &dyn Fn(f64, f64) -> f64 = if name.starts_with("disc.") {
            disc_objective
        } else {
            feat_objective
        };
        let len = model.param(&name).unwrap().len();
        for i in 0..len {
            let mut perturbed = model.clone();
            perturbed.param_mut(&name).unwrap().as_slice_mut().unwrap()[i] += h;
            let (up, _) = training_loss_and_grads(&perturbed, x, labels, l1, l2, dat).unwrap();
            perturbed.param_mut(&name).unwrap().as_slice_mut().unwrap()[i] -= 2.0 * h;
            let (dn, _) = training_loss_and_grads(&perturbed, x, labels, l1, l2, dat).unwrap();
            let fd = (objective(up.total, up.dat) - objective(dn.total, dn.dat)) / (2.0 * h);
            let g = grads[&name].as_slice().unwrap()[i];
            // Floor the denominator at 1e-6: central differences of an O(1)
            // loss carry ~1e-11 absolute noise, so pure relative error is
            // meaningless for vanishing gradients. Above the floor this is
            // the plain relative error; below it, absolute agreement to
            // 1e-10 is enforced (tol 1e-4 times the floor).
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Nearest-class-centroid classifier on flattened features: fit on `train`,
/// report accuracy on `test`. A linear decision rule, fully independent of
/// the GNN stack.
pub fn nearest_centroid_accuracy(ds: &Dataset, train: &[usize], test: &[usize]) -> f64 {
    let dim = ds.n_nodes() * ds.n_features();
    let mut centroids = vec![vec![0.0f64; dim]; ds.n_classes];
    let mut counts = vec![0usize; ds.n_classes];
    for &i in train {
        let label = ds.labels[i] as usize;
        for (d, &v) in ds.features.index_axis(Axis(0), i).iter().enumerate() {
            centroids[label][d] += v as f64;
        }
        counts[label] += 1;
    }
    for (c, count) in counts.iter().enumerate() {
        if *count > 0 {
            for v in centroids[c].iter_mut() {
                *v /= *count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for &i in test {
        let row: Vec<f64> = ds
            .features
            .index_axis(Axis(0), i)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == ds.labels[i] as usize {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
