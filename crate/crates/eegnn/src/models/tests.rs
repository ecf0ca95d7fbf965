use super::*;
use crate::models::forward::training_loss_and_grads;
use ndarray::{arr2, Array3, Axis};

fn toy_config(kind: ModelKind, n_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, n_classes, 3, 2);
    cfg.hidden_dim = 4;
    cfg.n_layers = 2;
    cfg.dropout = 0.0;
    cfg
}

fn toy_batch(bsz: usize, n: usize, d: usize, seed: u64) -> Array3<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((bsz, n, d), |_| rng.random_range(-1.0..1.0))
}

fn separable_slice() -> LabeledSlice {
    // Class 0 lives near -1, class 1 near +1, in every coordinate.
    let mut features = Array3::<f64>::zeros((4, 3, 2));
    for s in 0..4 {
        let sign = if s % 2 == 0 { -1.0 } else { 1.0 };
        features
            .index_axis_mut(Axis(0), s)
            .mapv_inplace(|_| sign * (1.0 + 0.1 * s as f64));
    }
    LabeledSlice {
        features,
        labels: vec![0, 1, 0, 1],
    }
}

#[test]
fn gcn_layer_identity_chain_returns_input() {
    let h = arr2(&[[1.0, -2.0], [3.0, 4.0]]);
    let eye = ndarray::Array2::<f64>::eye(2);
    let out = gcn_layer_forward(&h, &eye, &eye, None).unwrap();
    assert_eq!(out, h);
}

#[test]
fn gcn_layer_hand_computed_case() {
    let a_hat = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
    let h = arr2(&[[2.0], [0.0]]);
    let w = arr2(&[[1.0]]);
    let out = gcn_layer_forward(&h, &a_hat, &w, Some(Activation::Relu)).unwrap();
    assert_eq!(out, arr2(&[[1.0], [1.0]]));
}

#[test]
fn gcn_layer_relu_zeroes_negative_entries() {
    let a_hat = ndarray::Array2::<f64>::eye(2);
    let h = arr2(&[[1.0], [-1.0]]);
    let w = arr2(&[[2.0]]);
    let out = gcn_layer_forward(&h, &a_hat, &w, Some(Activation::Relu)).unwrap();
    assert_eq!(out, arr2(&[[2.0], [0.0]]));
}

#[test]
fn gcn_layer_shape_mismatch_is_rejected() {
    let h = arr2(&[[1.0, 2.0]]);
    let a = ndarray::Array2::<f64>::eye(2);
    let w = arr2(&[[1.0]]);
    assert!(gcn_layer_forward(&h, &a, &w, None).is_err());
}

#[test]
fn zero_model_emits_uniform_softmax() {
    for kind in ModelKind::all() {
        let model = Model::zeroed(toy_config(kind, 4)).unwrap();
        let x = toy_batch(2, 3, 2, 1);
        let logits = model_forward(&model, &x).unwrap();
        for row in logits.rows() {
            for &v in row.iter() {
                assert_eq!(v, 0.0, "{kind:?}");
            }
            let probs = softmax(row.as_slice().unwrap());
            for p in probs {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_shape_matches_batch_and_classes() {
    for kind in ModelKind::all() {
        let model = Model::new(toy_config(kind, 5), None, 3).unwrap();
        let x = toy_batch(3, 3, 2, 2);
        let logits = model_forward(&model, &x).unwrap();
        assert_eq!(logits.dim(), (3, 5), "{kind:?}");
    }
}

#[test]
fn evaluation_forward_is_bitwise_deterministic() {
    let mut cfg = toy_config(ModelKind::Dgcnn, 2);
    cfg.dropout = 0.5; // must not matter in evaluation mode
    let model = Model::new(cfg, None, 7).unwrap();
    let x = toy_batch(4, 3, 2, 3);
    let a = model_forward(&model, &x).unwrap();
    let b = model_forward(&model, &x).unwrap();
    for (x1, x2) in a.iter().zip(b.iter()) {
        assert_eq!(x1.to_bits(), x2.to_bits());
    }
}

#[test]
fn saturated_logits_drive_cross_entropy_to_zero() {
    let model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let logits = arr2(&[[50.0, -50.0], [-50.0, 50.0]]);
    let loss = loss_value(&model, &logits, &[0, 1], &TrainConfig::default(), None).unwrap();
    assert!(loss < 1e-6, "loss = {loss}");
}

#[test]
fn uniform_logits_cost_ln_two() {
    let model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let logits = arr2(&[[0.3, 0.3], [-1.0, -1.0]]);
    let mut cfg = TrainConfig::default();
    cfg.l1_coef = 0.0;
    cfg.l2_coef = 0.0;
    let loss = loss_value(&model, &logits, &[0, 1], &cfg, None).unwrap();
    assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn l2_of_a_single_weight_two_adds_exactly_four() {
    let mut model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let logits = arr2(&[[0.0, 0.0]]);
    let base_cfg = TrainConfig::default();
    let base = loss_value(&model, &logits, &[0], &base_cfg, None).unwrap();
    model.param_mut("layer_w.00").unwrap()[[0, 0]] = 2.0;
    let mut cfg = TrainConfig::default();
    cfg.l2_coef = 1.0;
    let with_l2 = loss_value(&model, &logits, &[0], &cfg, None).unwrap();
    assert_eq!(with_l2 - base, 4.0);
}

#[test]
fn out_of_range_label_in_loss_is_rejected() {
    let model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let logits = arr2(&[[0.0, 0.0]]);
    assert!(loss_value(&model, &logits, &[2], &TrainConfig::default(), None).is_err());
}

#[test]
fn emotion_dl_targets_match_the_rule() {
    // eps = 0: exact one-hot rows.
    let t = emotion_dl_targets(&[1], 0.0, None, 3).unwrap();
    assert_eq!(t, arr2(&[[0.0, 1.0, 0.0]]));
    // eps = 0.1, two classes, default map: [0.9, 0.1] for label 0.
    let t = emotion_dl_targets(&[0], 0.1, None, 2).unwrap();
    assert!((t[[0, 0]] - 0.9).abs() < 1e-15);
    assert!((t[[0, 1]] - 0.1).abs() < 1e-15);
    // Rows always sum to one.
    let map = vec![vec![1, 2], vec![0], vec![0, 1]];
    let t = emotion_dl_targets(&[0, 1, 2], 0.3, Some(&map), 3).unwrap();
    for row in t.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn emotion_dl_empty_neighbors_with_positive_eps_fails() {
    let map = vec![vec![]];
    let err = emotion_dl_targets(&[0], 0.2, Some(&map), 1).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn prox_soft_threshold_arithmetic() {
    let a = arr2(&[[1.0, 0.5], [-0.1, 1.0]]);
    let out = prox_l1(&a, 0.2);
    assert_eq!(out[[0, 1]], 0.3);
    assert_eq!(out[[1, 0]], 0.0);
    // Diagonal untouched.
    assert_eq!(out[[0, 0]], 1.0);
    assert_eq!(out[[1, 1]], 1.0);
}

#[test]
fn prox_with_zero_lambda_is_identity() {
    let a = arr2(&[[1.0, 0.5], [-0.25, 2.0]]);
    assert_eq!(prox_l1(&a, 0.0), a);
}

#[test]
fn prox_dominating_lambda_zeroes_all_off_diagonals() {
    let a = arr2(&[[1.0, 0.5, -0.7], [0.2, 3.0, 0.6], [-0.9, 0.1, 2.0]]);
    let out = prox_l1(&a, 1.0);
    for ((i, j), &v) in out.indexed_iter() {
        if i != j {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn prox_is_non_expansive() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a: f64 = rng.random_range(-3.0..3.0);
        let b: f64 = rng.random_range(-3.0..3.0);
        let lam: f64 = rng.random_range(0.0..2.0);
        let pa = prox_l1(&arr2(&[[0.0, a], [0.0, 0.0]]), lam)[[0, 1]];
        let pb = prox_l1(&arr2(&[[0.0, b], [0.0, 0.0]]), lam)[[0, 1]];
        assert!((pa - pb).abs() <= (a - b).abs() + 1e-15);
    }
}

#[test]
fn node_dat_constant_half_discriminator_costs_ln_two() {
    let mut cfg = toy_config(ModelKind::Rgnn, 2);
    cfg.rgnn.node_dat = true;
    let mut model = Model::new(cfg, None, 1).unwrap();
    model.param_mut("disc.w").unwrap().fill(0.0);
    model.param_mut("disc.b").unwrap().fill(0.0);
    let src = ndarray::Array2::from_elem((6, 4), 0.3);
    let tgt = ndarray::Array2::from_elem((6, 4), -0.8);
    let loss = node_dat_term(&model, &src, &tgt, 1.0).unwrap();
    assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn node_dat_without_the_flag_is_a_contract_violation() {
    let model = Model::new(toy_config(ModelKind::Rgnn, 2), None, 1).unwrap();
    let e = ndarray::Array2::zeros((2, 4));
    assert!(node_dat_term(&model, &e, &e, 1.0).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let model = Model::new(toy_config(ModelKind::SparseDgcnn, 2), None, 11).unwrap();
        let before: Vec<(String, Vec<u64>)> = model
            .param_names()
            .iter()
            .map(|n| {
                (
                    n.clone(),
                    model.param(n).unwrap().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        cfg.optimizer = optimizer;
        cfg.batch_size = 2;
        let mut trainer = Trainer::new(model, cfg).unwrap();
        trainer.train_epoch(&separable_slice(), &TrainExtras::none()).unwrap();
        for (name, bits) in before {
            let after: Vec<u64> = trainer
                .model
                .param(&name)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, after, "{optimizer:?} changed {name}");
        }
    }
}

#[test]
fn same_seed_reproduces_identical_parameters() {
    let run = || {
        let mut cfg = toy_config(ModelKind::Dgcnn, 2);
        cfg.dropout = 0.3;
        let model = Model::new(cfg, None, 5).unwrap();
        let mut tc = TrainConfig::default();
        tc.learning_rate = 0.05;
        tc.batch_size = 2;
        tc.seed = 9;
        let mut trainer = Trainer::new(model, tc).unwrap();
        for _ in 0..3 {
            trainer.train_epoch(&separable_slice(), &TrainExtras::none()).unwrap();
        }
        trainer
            .model
            .param_names()
            .iter()
            .flat_map(|n| {
                trainer
                    .model
                    .param(n)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn single_sample_overfit_loss_decreases_below_five_percent() {
    let mut features = Array3::<f64>::zeros((1, 3, 2));
    features.mapv_inplace(|_| 0.8);
    let data = LabeledSlice {
        features,
        labels: vec![1],
    };
    let model = Model::new(toy_config(ModelKind::Dgcnn, 2), None, 2).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.learning_rate = 0.01;
    cfg.batch_size = 1;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(trainer.train_epoch(&data, &TrainExtras::none()).unwrap().mean_loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss did not strictly decrease: {:?}", losses);
    }
    assert!(losses.last().unwrap() < &0.05, "final loss {:?}", losses.last());
}

#[test]
fn exploding_learning_rate_reports_divergence_with_batch_index() {
    let model = Model::new(toy_config(ModelKind::Dgcnn, 2), None, 4).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 1e300;
    cfg.batch_size = 2;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let data = separable_slice();
    let mut diverged = false;
    for _ in 0..4 {
        match trainer.train_epoch(&data, &TrainExtras::none()) {
            Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {
                diverged = true;
                break;
            }
            Ok(_) => {}
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }
    assert!(diverged);
}

#[test]
fn sparse_dominating_lambda_zeroes_effective_off_diagonals_in_one_step() {
    let mut cfg = toy_config(ModelKind::SparseDgcnn, 2);
    cfg.sparse.adj_l1 = 1e6;
    let model = Model::new(cfg, None, 8).unwrap();
    let mut tc = TrainConfig::default();
    tc.learning_rate = 0.01;
    tc.batch_size = 4;
    let mut trainer = Trainer::new(model, tc).unwrap();
    trainer.train_epoch(&separable_slice(), &TrainExtras::none()).unwrap();
    let eff = trainer.model.effective_adjacency();
    for ((i, j), &v) in eff.indexed_iter() {
        if i != j {
            assert_eq!(v, 0.0);
        }
        if i == j {
            assert!(v >= 0.0);
        }
    }
}

#[test]
fn dgcnn_effective_diagonal_stays_nonnegative_through_training() {
    for kind in [ModelKind::Dgcnn, ModelKind::SparseDgcnn] {
        let model = Model::new(toy_config(kind, 2), None, 3).unwrap();
        let mut tc = TrainConfig::default();
        tc.learning_rate = 0.1;
        tc.batch_size = 2;
        let mut trainer = Trainer::new(model, tc).unwrap();
        for _ in 0..5 {
            trainer.train_epoch(&separable_slice(), &TrainExtras::none()).unwrap();
            let eff = trainer.model.effective_adjacency();
            for i in 0..eff.nrows() {
                assert!(eff[[i, i]] >= 0.0, "{kind:?}");
            }
        }
    }
}

#[test]
fn zero_weight_model_scores_half_on_balanced_two_class_slice() {
    // All logits zero, argmax ties resolve to class 0: two of four correct.
    let model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let acc = evaluate(&model, &separable_slice()).unwrap();
    assert_eq!(acc, 0.5);
}

#[test]
fn adversarial_label_flip_scores_zero_for_a_perfect_predictor() {
    let model = Model::new(toy_config(ModelKind::Dgcnn, 2), None, 6).unwrap();
    let mut tc = TrainConfig::default();
    tc.learning_rate = 0.05;
    tc.batch_size = 4;
    let mut trainer = Trainer::new(model, tc).unwrap();
    let data = separable_slice();
    for _ in 0..200 {
        trainer.train_epoch(&data, &TrainExtras::none()).unwrap();
        if evaluate(&trainer.model, &data).unwrap() == 1.0 {
            break;
        }
    }
    assert_eq!(evaluate(&trainer.model, &data).unwrap(), 1.0);
    let flipped = LabeledSlice {
        features: data.features.clone(),
        labels: data.labels.iter().map(|&l| 1 - l).collect(),
    };
    assert_eq!(evaluate(&trainer.model, &flipped).unwrap(), 0.0);
}

#[test]
fn evaluate_on_empty_slice_is_an_error() {
    let model = Model::zeroed(toy_config(ModelKind::Dgcnn, 2)).unwrap();
    let empty = LabeledSlice {
        features: Array3::zeros((0, 3, 2)),
        labels: vec![],
    };
    assert!(evaluate(&model, &empty).is_err());
}

#[test]
fn checkpoint_round_trips_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in ModelKind::all().into_iter().enumerate() {
        let mut cfg = toy_config(kind, 3);
        if kind == ModelKind::Rgnn {
            cfg.rgnn.node_dat = true;
            cfg.rgnn.emotion_dl_eps = 0.1;
        }
        let model = Model::new(cfg, None, 17).unwrap();
        let path = dir.path().join(format!("ckpt{i}"));
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back, "{kind:?}");
    }
}

#[test]
fn truncated_checkpoint_blob_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(toy_config(ModelKind::Dgcnn, 2), None, 1).unwrap();
    save_model(&model, dir.path()).unwrap();
    let path = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_model(dir.path()).unwrap_err(),
        Error::SizeMismatch { .. }
    ));
}

/// Quick finite-difference sanity check on one kind; the acceptance suite
/// covers all four at tighter settings.
#[test]
fn dgcnn_gradients_match_finite_differences() {
    let model = Model::new(toy_config(ModelKind::Dgcnn, 2), None, 12).unwrap();
    let x = toy_batch(2, 3, 2, 13);
    let labels = vec![0usize, 1usize];
    let (_, grads) = training_loss_and_grads(&model, &x, &labels, 0.01, 0.01, None).unwrap();
    let mut worst: f64 = 0.0;
    for name in model.param_names() {
        let shape = model.param(&name).unwrap().shape().to_vec();
        let len = model.param(&name).unwrap().len();
        for i in 0..len {
            let h = 1e-5;
            let mut perturbed = model.clone();
            perturbed.param_mut(&name).unwrap().as_slice_mut().unwrap()[i] += h;
            let (up, _) = training_loss_and_grads(&perturbed, &x, &labels, 0.01, 0.01, None).unwrap();
            perturbed.param_mut(&name).unwrap().as_slice_mut().unwrap()[i] -= 2.0 * h;
            let (dn, _) = training_loss_and_grads(&perturbed, &x, &labels, 0.01, 0.01, None).unwrap();
            let fd = (up.total - dn.total) / (2.0 * h);
            let g = grads[&name].as_slice().unwrap()[i];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        let _ = shape;
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}
