//! Invariants of the public API over random particle clouds.

use ndarray::Array2;
use proptest::prelude::*;
use wgf_core::distributions::DistributionSpec;
use wgf_core::flow::{check_support_bound, max_target_radius, simulate_flow, FlowConfig};
use wgf_core::metrics::{exact_w2, mmd_squared};
use wgf_core::ot::{build_cost_matrix, sinkhorn_divergence, sinkhorn_scaling, SinkhornSpec};
use wgf_core::velocity::{sinkhorn_velocity, SelfEstimator, VelocityFieldSpec};
use wgf_core::ParticleBatch;

fn cloud(n: usize, d: usize) -> impl Strategy<Value = ParticleBatch> {
    prop::collection::vec(-2.0f64..2.0, n * d)
        .prop_map(move |v| ParticleBatch::uniform(Array2::from_shape_vec((n, d), v).unwrap()).unwrap())
}

fn weighted_cloud(n: usize, d: usize) -> impl Strategy<Value = ParticleBatch> {
    (cloud(n, d), prop::collection::vec(0.1f64..1.0, n)).prop_map(|(b, w)| {
        let total: f64 = w.iter().sum();
        let w = w.iter().map(|x| x / total).collect();
        ParticleBatch::with_weights(b.into_positions(), w).unwrap()
    })
}

fn converged(epsilon: f64) -> SinkhornSpec {
    SinkhornSpec {
        marginal_tolerance: Some(1e-13),
        ..SinkhornSpec::new(epsilon, 20_000).log_domain()
    }
}

fn map(b: &ParticleBatch, f: impl Fn(&[f64]) -> Vec<f64>) -> ParticleBatch {
    let p = b.positions();
    let rows: Vec<Vec<f64>> = p.outer_iter().map(|x| f(x.as_slice().unwrap())).collect();
    let mut out = Array2::zeros(p.dim());
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    b.with_positions(out).unwrap()
}

fn rotate(theta: f64) -> impl Fn(&[f64]) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    move |x| vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sinkhorn_plan_is_a_coupling(
        q in weighted_cloud(7, 2),
        p in weighted_cloud(5, 2),
        eps in 0.05f64..2.0,
    ) {
        let cost = build_cost_matrix(&q, &p, Default::default()).unwrap();
        let c = sinkhorn_scaling(&cost, q.weights(), p.weights(), &converged(eps)).unwrap();
        prop_assert!(c.plan.iter().all(|&x| x >= 0.0 && x.is_finite()));
        let (rows, cols) = c.marginal_violation();
        prop_assert!(rows <= 1e-12 && cols <= 1e-12, "rows {rows} cols {cols}");
        prop_assert!((c.plan.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn divergence_is_symmetric_nonnegative_and_zero_on_the_diagonal(
        q in cloud(6, 2),
        p in cloud(6, 2),
        eps in 0.1f64..2.0,
    ) {
        let spec = converged(eps);
        let qp = sinkhorn_divergence(&q, &p, &spec).unwrap();
        let pq = sinkhorn_divergence(&p, &q, &spec).unwrap();
        prop_assert!(qp >= -1e-10, "{qp}");
        prop_assert!((qp - pq).abs() <= 1e-9 * (1.0 + qp.abs()), "{qp} vs {pq}");
        prop_assert_eq!(sinkhorn_divergence(&q, &q, &spec).unwrap(), 0.0);
    }

    #[test]
    fn sinkhorn_velocity_rotates_with_the_clouds(
        q in cloud(6, 2),
        q2 in cloud(6, 2),
        p in cloud(5, 2),
        theta in 0.0f64..std::f64::consts::TAU,
    ) {
        let spec = converged(0.5);
        let v = sinkhorn_velocity(&q, &q2, &p, &spec).unwrap().into_inner();
        let r = rotate(theta);
        let vr = sinkhorn_velocity(&map(&q, &r), &map(&q2, &r), &map(&p, &r), &spec).unwrap().into_inner();
        let expected = map(&ParticleBatch::uniform(v).unwrap(), &r).into_positions();
        prop_assert!(max_abs_diff(&vr, &expected) <= 1e-9);
    }

    #[test]
    fn sinkhorn_velocity_scales_with_the_clouds(
        q in cloud(6, 2),
        q2 in cloud(6, 2),
        p in cloud(5, 2),
        c in 0.5f64..3.0,
    ) {
        // the half-squared cost scales by c^2, so eps * c^2 leaves the plans unchanged
        let v = sinkhorn_velocity(&q, &q2, &p, &converged(0.4)).unwrap().into_inner();
        let s = |x: &[f64]| x.iter().map(|v| c * v).collect();
        let vs = sinkhorn_velocity(&map(&q, s), &map(&q2, s), &map(&p, s), &converged(0.4 * c * c))
            .unwrap()
            .into_inner();
        prop_assert!(max_abs_diff(&vs, &(&v * c)) <= 1e-9);
    }

    #[test]
    fn exact_w2_is_a_metric_on_equal_size_clouds(
        a in cloud(6, 2),
        b in cloud(6, 2),
        c in cloud(6, 2),
        shift in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let ab = exact_w2(&a, &b).unwrap();
        prop_assert!((ab - exact_w2(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(exact_w2(&a, &a).unwrap() <= 1e-12);
        prop_assert!(ab <= exact_w2(&a, &c).unwrap() + exact_w2(&c, &b).unwrap() + 1e-12);
        // a rigid shift of one cloud is matched by the identity assignment
        let moved = map(&a, |x| vec![x[0] + shift[0], x[1] + shift[1]]);
        let norm = shift[0].hypot(shift[1]);
        prop_assert!((exact_w2(&a, &moved).unwrap() - norm).abs() <= 1e-9);
    }

    #[test]
    fn mmd_is_nonnegative_and_symmetric(a in cloud(8, 2), b in cloud(5, 2), sigma in 0.2f64..3.0) {
        let ab = mmd_squared(&a, &b, sigma).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - mmd_squared(&b, &a, sigma).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn sinkhorn_flows_stay_inside_the_support_bound(
        init in cloud(16, 2),
        eta in 0.05f64..1.0,
        eps in 0.05f64..1.0,
        estimator in prop_oneof![
            Just(SelfEstimator::TwoBatch),
            Just(SelfEstimator::OneBatch),
            Just(SelfEstimator::OneBatchMasked),
        ],
        seed in 0u64..1000,
    ) {
        let config = FlowConfig {
            step_size: eta,
            num_steps: 8,
            velocity: VelocityFieldSpec::sinkhorn(SinkhornSpec::new(eps, 50).log_domain(), estimator),
            target: DistributionSpec::isotropic(vec![1.0, -1.0], 0.5),
            uncond_target: None,
            target_batch: 16,
            resample_target_each_step: true,
            record_energy: false,
            seed,
        };
        let t = simulate_flow(&init, &config).unwrap();
        let report = check_support_bound(&t, init.support_radius(), max_target_radius(&t));
        prop_assert!(report.holds(), "violations at {:?}", report.violations);
    }
}
