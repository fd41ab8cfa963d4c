use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbridge::bridge::continuous::masked_endpoint_loss;
use sbridge::bridge::discrete::{discretize, posterior_loss};
use sbridge::bridge::BridgeConfig;
use sbridge::conditioning::ConditionKey;
use sbridge::data::{synth_generate, ExpressionDataset, SyntheticSpec};
use sbridge::error::Error;
use sbridge::metrics;
use sbridge::nn::RealMatrix;
use sbridge::ot::{epoch_pairing, PairingStrategy, SinkhornConfig};
use sbridge::training::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_genes: 6,
        n_cells_per_condition: 24,
        n_conditions: 2,
        n_cell_types: 2,
        seed,
        ..Default::default()
    }
}

fn small_data(seed: u64) -> ExpressionDataset {
    synth_generate(&small_spec(seed)).unwrap().0
}

fn small_config(seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        ..Default::default()
    };
    cfg.model.hidden = vec![16, 16];
    cfg.bridge.steps = 10;
    cfg
}

#[test]
fn same_seed_gives_identical_parameters() {
    let ds = small_data(1);
    let cfg = small_config(5, 2);
    let (a, log_a) = train(&ds, &cfg).unwrap();
    let (b, log_b) = train(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    let strip = |l: &[EpochLog]| l.iter().map(|e| (e.l_cont, e.l_disc)).collect::<Vec<_>>();
    assert_eq!(strip(&log_a), strip(&log_b));
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_to(&mut x).unwrap();
    b.write_to(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn different_seeds_differ() {
    let ds = small_data(1);
    let (a, _) = train(&ds, &small_config(1, 1)).unwrap();
    let (b, _) = train(&ds, &small_config(2, 1)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn oversized_batch_is_a_single_batch() {
    let ds = small_data(2);
    let mut cfg = small_config(0, 3);
    cfg.batch_size = 10_000;
    let (model, log) = train(&ds, &cfg).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(model.continuous.step_count, 3);
    assert!(log.iter().all(|e| e.l_cont.is_finite() && e.l_disc.is_finite()));
}

#[test]
fn null_shift_losses_are_finite_and_do_not_grow() {
    for seed in 0..3 {
        let spec = SyntheticSpec {
            shift_magnitude: 0.0,
            sparsity: 0.0,
            ..small_spec(seed)
        };
        let ds = synth_generate(&spec).unwrap().0;
        let (_, log) = train(&ds, &small_config(seed, 10)).unwrap();
        assert!(log.iter().all(|e| e.total().is_finite()));
        let first = log[0].l_cont;
        let tail: f64 = log[7..].iter().map(|e| e.l_cont).sum::<f64>() / 3.0;
        assert!(tail <= first * 1.1, "seed {seed}: {first} -> {tail}");
    }
}

#[test]
fn log_total_is_sum_of_parts() {
    let ds = small_data(3);
    let (_, log) = train(&ds, &small_config(0, 2)).unwrap();
    for e in &log {
        assert_eq!(e.total(), e.l_cont + e.l_disc);
    }
}

fn one_batch(seed: u64) -> (ExpressionDataset, BridgeBatch) {
    let ds = small_data(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = epoch_pairing(&ds, &SinkhornConfig::default(), PairingStrategy::default(), &mut rng)
        .unwrap();
    let flat = flatten_pairs(&pairs);
    let batch = build_batch(&ds, &flat[..20], &BridgeConfig::default(), &mut rng).unwrap();
    (ds, batch)
}

fn fresh_model(ds: &ExpressionDataset, seed: u64) -> BridgeModel {
    let cfg = small_config(seed, 1);
    BridgeModel::new(
        ds.gene_names.clone(),
        ds.vocab.clone(),
        cfg.model,
        cfg.bridge,
        true,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[test]
fn batch_loss_matches_independent_recomputation() {
    let (ds, batch) = one_batch(4);
    let mut model = fresh_model(&ds, 4);
    let reference = model.clone();
    let loss = batch_gradients(&mut model, &batch).unwrap();

    let n = batch.times.len() as f64;
    let (pred, _) = predict(
        &reference.continuous,
        &batch.x_t,
        &batch.times,
        &batch.conditions,
        &reference.model,
        &reference.bridge,
        false,
    )
    .unwrap();
    let pred = pred + &batch.x_t;
    let l_cont: f64 = (0..batch.times.len())
        .map(|i| masked_endpoint_loss(pred.row(i), batch.x_end.row(i)).unwrap().loss)
        .sum::<f64>()
        / n;
    let disc = reference.discrete.as_ref().unwrap();
    let (logits, _) = predict(
        disc,
        &batch.d_t,
        &batch.times,
        &batch.conditions,
        &reference.model,
        &reference.bridge,
        false,
    )
    .unwrap();
    let l_disc: f64 = (0..batch.times.len())
        .map(|i| posterior_loss(logits.row(i), &batch.d_end[i]).unwrap().0)
        .sum::<f64>()
        / n;
    assert!((loss.l_cont - l_cont).abs() < 1e-12);
    assert!((loss.l_disc - l_disc).abs() < 1e-12);
    assert_eq!(loss.total(), loss.l_cont + loss.l_disc);
}

#[test]
fn discrete_tuples_come_from_continuous_endpoints() {
    let (_, batch) = one_batch(5);
    for i in 0..batch.times.len() {
        assert_eq!(batch.d0[i], discretize(batch.x0.row(i)));
        assert_eq!(batch.d_end[i], discretize(batch.x_end.row(i)));
        // The loss ignores exactly the genes the activation target switches off.
        let probe = Array2::from_elem((1, batch.x_end.ncols()), 7.0);
        let g = masked_endpoint_loss(probe.row(0), batch.x_end.row(i)).unwrap().grad;
        for (j, &bit) in batch.d_end[i].0.iter().enumerate() {
            assert_eq!(g[j] == 0.0, bit == 0 || batch.x_end[[i, j]] == 7.0);
        }
    }
}

#[test]
fn pairings_are_redrawn_each_epoch() {
    let ds = small_data(6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SinkhornConfig::default();
    let a = epoch_pairing(&ds, &cfg, PairingStrategy::default(), &mut rng).unwrap();
    let b = epoch_pairing(&ds, &cfg, PairingStrategy::default(), &mut rng).unwrap();
    assert_ne!(a, b);
}

#[test]
fn exploding_optimizer_aborts_with_numerical_error() {
    let ds = small_data(7);
    let mut cfg = small_config(0, 3);
    cfg.optimizer.learning_rate = 1e300;
    cfg.optimizer.weight_decay = 0.0;
    let err = train(&ds, &cfg).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn oracle_generation_is_exact() {
    let cfg = BridgeConfig {
        sigma: 0.0,
        ..Default::default()
    };
    let controls = array![[1.0, 0.0, 2.0], [0.5, 3.0, 0.0], [0.0, 0.0, 0.0]];
    let c = array![4.0, 5.0, 6.0];
    let d_end = array![1.0, 0.0, 1.0];
    let continuous = |_: f64, x: &RealMatrix| Ok(Array2::from_shape_fn(x.dim(), |(_, j)| c[j]));
    let discrete = Some(|_: f64, d: &RealMatrix| Ok(Array2::from_shape_fn(d.dim(), |(_, j)| d_end[j])));
    let out = generate_with(&controls, &cfg, continuous, discrete, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(out.values.nrows(), 3);
    for row in out.values.rows() {
        assert_eq!(row, &c * &d_end);
    }
}

#[test]
fn all_off_activations_zero_the_output() {
    let cfg = BridgeConfig::default();
    let controls = array![[1.0, 2.0], [3.0, 4.0]];
    let continuous = |_: f64, x: &RealMatrix| Ok(x.mapv(|v| v + 10.0));
    let discrete = Some(|_: f64, d: &RealMatrix| Ok(Array2::zeros(d.dim())));
    let out = generate_with(&controls, &cfg, continuous, discrete, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert!(out.values.iter().all(|&v| v == 0.0));
    assert!(out.endpoints.iter().all(|&v| v != 0.0));
}

#[test]
fn generate_checks_vocabulary_and_shape() {
    let ds = small_data(8);
    let model = fresh_model(&ds, 0);
    let controls = ds.rows(&[0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = generate(&model, &controls, &ConditionKey::new(0, 1, 0.0), &mut rng).unwrap();
    assert_eq!(out.values.dim(), controls.dim());
    let err = generate(&model, &controls, &ConditionKey::new(0, 99, 0.0), &mut rng).unwrap_err();
    assert!(matches!(err, Error::Vocabulary { .. }));
    let err = generate(&model, &Array2::zeros((2, 3)), &ConditionKey::new(0, 1, 0.0), &mut rng)
        .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn model_checkpoint_round_trips() {
    let ds = small_data(9);
    let (model, _) = train(&ds, &small_config(0, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = BridgeModel::load(&path).unwrap();
    let values = |m: &BridgeModel| -> Vec<Vec<f64>> {
        m.continuous
            .tensors()
            .chain(m.discrete.iter().flat_map(|d| d.tensors()))
            .map(|p| p.value.iter().copied().collect())
            .collect()
    };
    assert_eq!(values(&loaded), values(&model));
    assert_eq!((loaded.vocab.clone(), loaded.model.clone()), (model.vocab.clone(), model.model.clone()));
    let mut bytes = Vec::new();
    loaded.write_to(&mut bytes).unwrap();
    assert_eq!(bytes, std::fs::read(&path).unwrap());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(BridgeModel::load(&path).is_err());
}

#[test]
fn evaluation_fixed_points() {
    let ds = small_data(10);
    let groups = ds.perturbed_groups();
    let perfect = evaluate_with(&ds, &ds, 3, |k, _, _| Ok(ds.rows(&groups[k]))).unwrap();
    for c in &perfect.per_condition {
        assert_eq!(c.metrics.e_distance, 0.0);
        assert_eq!(c.metrics.emd_all, 0.0);
        if let Some(p) = c.metrics.activation_pcc_all {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }
    let untouched = evaluate_with(&ds, &ds, 3, |_, controls, _| Ok(controls.clone())).unwrap();
    for (a, b) in untouched.per_condition.iter().zip(&perfect.per_condition) {
        assert!(a.metrics.e_distance > b.metrics.e_distance);
    }
    let again = evaluate_with(&ds, &ds, 3, |_, controls, _| Ok(controls.clone())).unwrap();
    assert_eq!(untouched, again);
}

#[test]
fn evaluation_is_reproducible_for_a_trained_model() {
    let ds = small_data(11);
    let (model, _) = train(&ds, &small_config(0, 1)).unwrap();
    let a = evaluate(&model, &ds, &ds, 4).unwrap();
    let b = evaluate(&model, &ds, &ds, 4).unwrap();
    assert_eq!(a, b);
    let reports: Vec<metrics::MetricsReport> = a.per_condition.iter().map(|c| c.metrics.clone()).collect();
    assert_eq!(metrics::aggregate(&reports), a.aggregate);
}

#[test]
fn no_discrete_variant_trains_and_leaves_outputs_unmasked() {
    let ds = small_data(12);
    let mut cfg = small_config(0, 1);
    cfg.discrete = false;
    let (model, log) = train(&ds, &cfg).unwrap();
    assert!(model.discrete.is_none());
    assert_eq!(log[0].l_disc, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = generate(&model, &ds.rows(&[0, 1]), &ConditionKey::new(0, 1, 0.0), &mut rng).unwrap();
    assert_eq!(out.values, out.endpoints);
}
