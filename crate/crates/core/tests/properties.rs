use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sbridge::bridge::continuous::{interpolate, masked_endpoint_loss};
use sbridge::bridge::discrete::{ctmc_step, posterior_loss, ActivationVector};
use sbridge::bridge::BridgeConfig;
use sbridge::metrics::{e_distance, e_distance_unbiased};
use sbridge::nn::{sigmoid, RealMatrix};
use sbridge::ot::{sinkhorn, transport_cost, Epsilon, SinkhornConfig};

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> RealMatrix {
    Array2::from_shape_vec((rows, cols), values).unwrap()
}

fn square_cost(max: usize) -> impl Strategy<Value = RealMatrix> {
    (2..=max).prop_flat_map(|n| {
        proptest::collection::vec(0.0..10.0f64, n * n).prop_map(move |v| matrix(n, n, v))
    })
}

fn best_assignment(cost: &RealMatrix) -> f64 {
    fn go(cost: &RealMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.nrows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.nrows()], 0.0, &mut best);
    best / cost.nrows() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_marginals_hold_when_converged(cost in square_cost(12)) {
        let cfg = SinkhornConfig::default();
        let r = sinkhorn(&cost, &cfg).unwrap();
        prop_assert!(r.plan.iter().all(|&p| p >= 0.0));
        if r.converged {
            let mass = 1.0 / cost.nrows() as f64;
            for s in r.plan.sum_axis(ndarray::Axis(0)).iter().chain(r.plan.sum_axis(ndarray::Axis(1)).iter()) {
                prop_assert!((s - mass).abs() < cfg.tolerance);
            }
        }
    }

    #[test]
    fn sinkhorn_scale_behaviour(cost in square_cost(8), c in 0.1..50.0f64) {
        let base = SinkhornConfig { epsilon: Epsilon::Absolute(0.5), ..Default::default() };
        let scaled = SinkhornConfig { epsilon: Epsilon::Absolute(0.5 * c), ..Default::default() };
        let a = sinkhorn(&cost, &base).unwrap().plan;
        let b = sinkhorn(&cost.mapv(|x| x * c), &scaled).unwrap().plan;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn entropic_consistency(cost in (2..=6usize).prop_flat_map(|n| {
        proptest::collection::vec(0.0..1.0f64, n * n).prop_map(move |v| matrix(n, n, v))
    })) {
        let n = cost.nrows() as f64;
        let max_c = cost.iter().cloned().fold(0.0, f64::max);
        // Sinkhorn stalls on near-permutation costs; a plan whose marginals
        // are off by `residual` has a cost off by at most `2 n residual max C`.
        let slack = |residual: f64| 2.0 * n * residual * max_c + 1e-12;
        let mut last = (f64::INFINITY, 0.0);
        for eps in [1e-1, 3e-2, 1e-2, 3e-3, 1e-3] {
            let cfg = SinkhornConfig {
                epsilon: Epsilon::Absolute(eps),
                max_iters: 20_000,
                tolerance: 1e-9,
                ..Default::default()
            };
            let r = sinkhorn(&cost, &cfg).unwrap();
            let tc = transport_cost(&r.plan, &cost);
            let bound = last.0 + last.1 + slack(r.residual);
            prop_assert!(tc <= bound, "eps {eps}: {tc} > {}", last.0);
            last = (tc, slack(r.residual));
        }
        let opt = best_assignment(&cost);
        prop_assert!(last.0 <= opt * 1.01 + last.1, "{} vs optimum {opt}", last.0);
    }

    #[test]
    fn masked_loss_ignores_switched_off_genes(
        target in proptest::collection::vec(prop_oneof![Just(0.0), 0.1..5.0f64], 1..20),
        seed in any::<u64>(),
    ) {
        let n = target.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Array1<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut other = pred.clone();
        for (o, &t) in other.iter_mut().zip(&target) {
            if t == 0.0 {
                *o += 100.0;
            }
        }
        let target = Array1::from(target);
        let a = masked_endpoint_loss(pred.view(), target.view()).unwrap();
        let b = masked_endpoint_loss(other.view(), target.view()).unwrap();
        prop_assert_eq!(a.loss, b.loss);
        prop_assert_eq!(a.grad, b.grad);
        prop_assert!(a.loss >= 0.0);
    }

    #[test]
    fn posterior_gradient_is_sigmoid_minus_target(
        logits in proptest::collection::vec(-40.0..40.0f64, 1..16),
        bits in proptest::collection::vec(0u8..=1, 16),
    ) {
        let d = ActivationVector(bits[..logits.len()].to_vec());
        let l = Array1::from(logits);
        let (loss, grad) = posterior_loss(l.view(), &d).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for i in 0..l.len() {
            prop_assert_eq!(grad[i], sigmoid(l[i]) - d.0[i] as f64);
        }
    }

    #[test]
    fn bridge_endpoints_are_pinned(
        x0 in proptest::collection::vec(-1e3..1e3f64, 1..10),
        seed in any::<u64>(),
        sigma in 0.0..2.0f64,
    ) {
        let cfg = BridgeConfig { sigma, ..Default::default() };
        let a = Array1::from(x0.clone());
        let b = a.mapv(|v| v * 0.5 - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(interpolate(a.view(), b.view(), 0.0, &cfg, &mut rng).unwrap(), a.clone());
        prop_assert_eq!(interpolate(a.view(), b.view(), 1.0, &cfg, &mut rng).unwrap(), b);
    }

    #[test]
    fn ctmc_steps_stay_binary(
        bits in proptest::collection::vec(0u8..=1, 1..12),
        q in proptest::collection::vec(0.0..=1.0f64, 12),
        k in 0usize..50,
        seed in any::<u64>(),
    ) {
        let cfg = BridgeConfig::default();
        let d = ActivationVector(bits.clone());
        let q = Array1::from(q[..bits.len()].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next = ctmc_step(&d, q.view(), cfg.time(k), cfg.step_size(), &cfg, &mut rng).unwrap();
        prop_assert!(next.0.iter().all(|&b| b <= 1));
        if k + 1 == cfg.steps {
            // The final step lands on a draw consistent with q: certain posteriors are reproduced.
            for i in 0..q.len() {
                if q[i] == 1.0 { prop_assert_eq!(next.0[i], 1); }
                if q[i] == 0.0 { prop_assert_eq!(next.0[i], 0); }
            }
        }
    }

    #[test]
    fn energy_distance_symmetry_and_self_zero(
        n in 2usize..12, m in 2usize..12, d in 1usize..5, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let b = Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut rng));
        let ab = e_distance(&a, &b).unwrap();
        let ba = e_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= -1e-12);
        prop_assert_eq!(e_distance(&a, &a).unwrap(), 0.0);
    }
}

/// Under the null both estimators are calibrated: the unbiased form averages
/// to zero and the plug-in form to its known positive bias.
#[test]
fn energy_distance_null_calibration() {
    let (n, d, reps) = (30, 3, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut unbiased = Vec::new();
    let mut plug_in = Vec::new();
    let mut spread = Vec::new();
    for _ in 0..reps {
        let a: RealMatrix = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let b: RealMatrix = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        unbiased.push(e_distance_unbiased(&a, &b).unwrap());
        plug_in.push(e_distance(&a, &b).unwrap());
        let mut within = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    within += (&a.row(i) - &a.row(j)).mapv(|x| x * x).sum().sqrt();
                }
            }
        }
        spread.push(within / (n * (n - 1)) as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
    };
    assert!(mean(&unbiased).abs() < 3.0 * se(&unbiased), "{} ± {}", mean(&unbiased), se(&unbiased));
    // E[plug-in] = E‖X - X'‖ (1/n_a + 1/n_b) under the null.
    let expected_bias = mean(&spread) * (2.0 / n as f64);
    let gap = mean(&plug_in) - expected_bias;
    assert!(gap.abs() < 3.0 * se(&plug_in), "{} vs {}", mean(&plug_in), expected_bias);
}
