//! Explicit Euler particle dynamics.
//!
//! A two-batch self term needs a sample of the current distribution that is
//! independent of the particles being moved. Each step the cloud is split at
//! random into halves `A` and `B`; particles in `A` use `B` as their second
//! batch and vice versa.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::batch::ParticleBatch;
use crate::distributions::{Distribution, DistributionSpec};
use crate::error::{Error, Result};
use crate::metrics::mmd_squared;
use crate::ot::sinkhorn_divergence;
use crate::rng::{stream, Rng};
use crate::velocity::{
    Guidance, SelfEstimator, VelocityBatch, VelocityField, VelocityFieldSpec, VelocityInputs, VelocityKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub step_size: f64,
    pub num_steps: usize,
    pub velocity: VelocityFieldSpec,
    pub target: DistributionSpec,
    /// Unconditional target, sampled only under guidance.
    #[serde(default)]
    pub uncond_target: Option<DistributionSpec>,
    pub target_batch: usize,
    #[serde(default = "default_true")]
    pub resample_target_each_step: bool,
    /// Record the energy at every state (one extra divergence evaluation per step).
    #[serde(default = "default_true")]
    pub record_energy: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(
                "flow.step_size",
                format!("must be > 0, got {}", self.step_size),
            ));
        }
        if self.num_steps == 0 {
            return Err(Error::config("flow.num_steps", "must be >= 1"));
        }
        if self.target_batch == 0 {
            return Err(Error::config("flow.target_batch", "must be >= 1"));
        }
        self.velocity.validate()?;
        self.target.build()?;
        if self.velocity.needs_uncond_batch() && self.uncond_target.is_none() {
            return Err(Error::config(
                "flow.uncond_target",
                "guidance with this velocity needs an unconditional target",
            ));
        }
        if let Some(u) = &self.uncond_target {
            u.build()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStep {
    pub time: f64,
    pub particles: ParticleBatch,
    /// Velocity applied from this state; `None` at the final state.
    pub velocity: Option<VelocityBatch>,
    pub energy: Option<f64>,
    pub support_radius: f64,
    /// Support radius of the target batch in use at this state.
    pub target_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub steps: Vec<FlowStep>,
    pub step_size: f64,
    pub config: FlowConfig,
}

impl FlowTrajectory {
    pub fn final_batch(&self) -> &ParticleBatch {
        &self.steps.last().expect("non-empty trajectory").particles
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn energies(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.energy).collect()
    }
}

/// `x + eta * V`; non-finite results abort with `step`.
pub fn euler_step(particles: &ParticleBatch, velocity: &VelocityBatch, eta: f64, step: usize) -> Result<ParticleBatch> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!("step size must be >= 0, got {eta}")));
    }
    if velocity.vectors().dim() != particles.positions().dim() {
        return Err(Error::DimensionMismatch(format!(
            "velocity {:?} vs particles {:?}",
            velocity.vectors().dim(),
            particles.positions().dim()
        )));
    }
    let next = &particles.positions() + &(&velocity.vectors() * eta);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step });
    }
    particles.with_positions(next)
}

/// Piecewise-linear interpolation between stored states.
pub fn interpolate(trajectory: &FlowTrajectory, t: f64) -> Result<ParticleBatch> {
    let eta = trajectory.step_size;
    let k_max = trajectory.num_steps();
    let t_end = k_max as f64 * eta;
    let slack = 1e-12 * t_end.max(1.0);
    if !(t >= -slack && t <= t_end + slack) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, {t_end}]")));
    }
    let k = ((t / eta).floor().max(0.0) as usize).min(k_max);
    let step = &trajectory.steps[k];
    if k == k_max {
        return Ok(step.particles.clone());
    }
    let dt = t - step.time;
    if dt == 0.0 {
        return Ok(step.particles.clone());
    }
    let v = step
        .velocity
        .as_ref()
        .expect("velocity stored for every non-final step");
    step.particles
        .with_positions(&step.particles.positions() + &(&v.vectors() * dt))
}

struct Samplers {
    target: Distribution,
    uncond: Option<Distribution>,
    target_rng: Rng,
    uncond_rng: Rng,
    split_rng: Rng,
}

fn energy_of(spec: &VelocityFieldSpec, q: &ParticleBatch, p: &ParticleBatch) -> Result<Option<f64>> {
    match &spec.kind {
        VelocityKind::Sinkhorn { sinkhorn, .. } => sinkhorn_divergence(q, p, sinkhorn).map(Some),
        VelocityKind::Mmd { bandwidth } => mmd_squared(q, p, *bandwidth).map(|m| Some(0.5 * m)),
        VelocityKind::KlKde { .. } | VelocityKind::KlAnalytic { .. } => Ok(None),
    }
}

/// Velocity at the current state, splitting the cloud when a two-batch self
/// term is configured.
fn step_velocity(
    field: &dyn VelocityField,
    spec: &VelocityFieldSpec,
    q: &ParticleBatch,
    p: &ParticleBatch,
    p_uncond: Option<&ParticleBatch>,
    split_rng: &mut Rng,
) -> Result<VelocityBatch> {
    let split = matches!(
        spec.kind,
        VelocityKind::Sinkhorn {
            self_estimator: SelfEstimator::TwoBatch,
            ..
        }
    );
    if !split {
        return field.velocity(&VelocityInputs {
            q,
            q_second: q,
            p,
            p_uncond,
        });
    }
    let n = q.len();
    if n < 2 {
        return Err(Error::InvalidInput("two-batch flow needs at least 2 particles".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(split_rng);
    let (a_idx, b_idx) = order.split_at(n / 2);
    let a = q.select(a_idx)?;
    let b = q.select(b_idx)?;
    let mut out = Array2::zeros((n, q.dim()));
    for (own, own_idx, other) in [(&a, a_idx, &b), (&b, b_idx, &a)] {
        let v = field.velocity(&VelocityInputs {
            q: own,
            q_second: other,
            p,
            p_uncond,
        })?;
        for (row, &i) in v.vectors().outer_iter().zip(own_idx) {
            out.row_mut(i).assign(&row);
        }
    }
    VelocityBatch::new(out)
}

/// Runs `num_steps` Euler steps of the configured field.
pub fn simulate_flow(init: &ParticleBatch, config: &FlowConfig) -> Result<FlowTrajectory> {
    let spec = config.velocity.clone();
    simulate_flow_with(init, config, &spec)
}

/// As [`simulate_flow`] with the velocity supplied by `field`; the energy
/// trace still follows `config.velocity`.
pub fn simulate_flow_with(
    init: &ParticleBatch,
    config: &FlowConfig,
    field: &dyn VelocityField,
) -> Result<FlowTrajectory> {
    config.validate()?;
    if init.is_empty() {
        return Err(Error::InvalidInput("empty initial batch".into()));
    }
    let target = config.target.build()?;
    if target.dim() != init.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial batch d={} vs target d={}",
            init.dim(),
            target.dim()
        )));
    }
    let mut s = Samplers {
        target,
        uncond: config.uncond_target.as_ref().map(|u| u.build()).transpose()?,
        target_rng: stream(config.seed, "flow/target"),
        uncond_rng: stream(config.seed, "flow/uncond"),
        split_rng: stream(config.seed, "flow/split"),
    };
    let spec = &config.velocity;
    let eta = config.step_size;
    let uncond_n = spec.guidance.uncond_batch();
    let wants_uncond = !matches!(spec.guidance, Guidance::None) && s.uncond.is_some();

    let mut p = s.target.sample(config.target_batch, &mut s.target_rng);
    let mut steps: Vec<FlowStep> = Vec::with_capacity(config.num_steps + 1);
    let mut q = init.clone();
    for k in 0..config.num_steps {
        if k > 0 && config.resample_target_each_step {
            p = s.target.sample(config.target_batch, &mut s.target_rng);
        }
        let p_uncond = match (&s.uncond, wants_uncond) {
            (Some(u), true) => Some(u.sample(uncond_n, &mut s.uncond_rng)),
            _ => None,
        };
        let energy = if config.record_energy {
            energy_of(spec, &q, &p).map_err(|e| e.at_step(k))?
        } else {
            None
        };
        let v = step_velocity(field, spec, &q, &p, p_uncond.as_ref(), &mut s.split_rng).map_err(|e| e.at_step(k))?;
        let next = euler_step(&q, &v, eta, k)?;
        steps.push(FlowStep {
            time: k as f64 * eta,
            support_radius: q.support_radius(),
            target_radius: p.support_radius(),
            particles: q,
            velocity: Some(v),
            energy,
        });
        q = next;
    }
    let k = config.num_steps;
    let energy = if config.record_energy {
        energy_of(spec, &q, &p).map_err(|e| e.at_step(k))?
    } else {
        None
    };
    steps.push(FlowStep {
        time: k as f64 * eta,
        support_radius: q.support_radius(),
        target_radius: p.support_radius(),
        particles: q,
        velocity: None,
        energy,
    });
    Ok(FlowTrajectory {
        steps,
        step_size: eta,
        config: config.clone(),
    })
}

/// Discrete support recursion `rho_k <= (1+eta)^k R0 + ((1+eta)^k - 1) R`.
pub fn support_bound(eta: f64, k: usize, r0: f64, r: f64) -> f64 {
    let g = (1.0 + eta).powi(k as i32);
    g * r0 + (g - 1.0) * r
}

/// Continuous-time bound `e^t R0 + (e^t - 1) R`; dominates the discrete one at `t = k eta`.
pub fn support_bound_continuous(t: f64, r0: f64, r: f64) -> f64 {
    let g = t.exp();
    g * r0 + (g - 1.0) * r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportReport {
    pub bounds: Vec<f64>,
    pub observed: Vec<f64>,
    /// `bound - observed` per step.
    pub margins: Vec<f64>,
    pub violations: Vec<usize>,
}

impl SupportReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_support_bound(trajectory: &FlowTrajectory, r0: f64, r: f64) -> SupportReport {
    let eta = trajectory.step_size;
    let mut rep = SupportReport {
        bounds: Vec::new(),
        observed: Vec::new(),
        margins: Vec::new(),
        violations: Vec::new(),
    };
    for (k, s) in trajectory.steps.iter().enumerate() {
        let b = support_bound(eta, k, r0, r);
        let m = b - s.support_radius;
        // round-off slack on the bound only
        if m < -1e-12 * b.max(1.0) {
            rep.violations.push(k);
        }
        rep.bounds.push(b);
        rep.observed.push(s.support_radius);
        rep.margins.push(m);
    }
    rep
}

/// Largest target radius seen along the trajectory.
pub fn max_target_radius(trajectory: &FlowTrajectory) -> f64 {
    trajectory.steps.iter().map(|s| s.target_radius).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::SinkhornSpec;
    use crate::velocity::{ScoreSource, ZeroVelocity};
    use ndarray::array;

    fn batch(rows: &[&[f64]]) -> ParticleBatch {
        ParticleBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn kl_gaussian_config(eta: f64, k: usize) -> FlowConfig {
        FlowConfig {
            step_size: eta,
            num_steps: k,
            velocity: VelocityFieldSpec {
                kind: VelocityKind::KlAnalytic {
                    score_p: DistributionSpec::StandardNormal { dim: 1 },
                    score_q: ScoreSource::MomentMatched,
                    score_p_uncond: None,
                },
                guidance: Guidance::None,
            },
            target: DistributionSpec::StandardNormal { dim: 1 },
            uncond_target: None,
            target_batch: 1,
            resample_target_each_step: false,
            record_energy: true,
            seed: 0,
        }
    }

    fn sinkhorn_config(seed: u64, k: usize) -> FlowConfig {
        FlowConfig {
            step_size: 0.5,
            num_steps: k,
            velocity: VelocityFieldSpec::sinkhorn(SinkhornSpec::new(0.1, 100), SelfEstimator::TwoBatch),
            target: DistributionSpec::isotropic(vec![2.0, 0.0], 0.5),
            uncond_target: None,
            target_batch: 64,
            resample_target_each_step: true,
            record_energy: true,
            seed,
        }
    }

    fn normal_init(n: usize, mean: f64, seed: u64) -> ParticleBatch {
        DistributionSpec::isotropic(vec![mean], 1.0)
            .build()
            .unwrap()
            .sample(n, &mut stream(seed, "init"))
    }

    fn mean_1d(b: &ParticleBatch) -> f64 {
        b.mean()[0]
    }

    #[test]
    fn euler_examples() {
        let x = batch(&[&[0.0, 0.0]]);
        let v = VelocityBatch::new(array![[1.0, 1.0]]).unwrap();
        assert_eq!(euler_step(&x, &v, 0.5, 0).unwrap().positions(), array![[0.5, 0.5]]);
        assert_eq!(euler_step(&x, &v, 0.0, 0).unwrap(), x);
        assert_eq!(euler_step(&x, &VelocityBatch::zeros(1, 2), 0.3, 0).unwrap(), x);
        let far = batch(&[&[1e308, 0.0]]);
        let huge = VelocityBatch::new(array![[1e308, 0.0]]).unwrap();
        assert!(matches!(
            euler_step(&far, &huge, 1.0, 7),
            Err(Error::Divergence { step: 7 })
        ));
        assert!(euler_step(&x, &VelocityBatch::zeros(2, 2), 0.3, 0).is_err());
    }

    #[test]
    fn labels_and_weights_survive_a_step() {
        let x = ParticleBatch::with_weights(array![[0.0], [1.0]], vec![0.25, 0.75])
            .unwrap()
            .with_labels(vec![1, 0])
            .unwrap();
        let y = euler_step(&x, &VelocityBatch::new(array![[1.0], [2.0]]).unwrap(), 0.5, 0).unwrap();
        assert_eq!(y.weights(), x.weights());
        assert_eq!(y.labels(), x.labels());
    }

    fn constant_trajectory() -> FlowTrajectory {
        // x=(0,0), V=(2,0), eta=1, two steps
        let cfg = FlowConfig {
            step_size: 1.0,
            num_steps: 2,
            ..sinkhorn_config(0, 2)
        };
        let x0 = batch(&[&[0.0, 0.0]]);
        let v = VelocityBatch::new(array![[2.0, 0.0]]).unwrap();
        let x1 = euler_step(&x0, &v, 1.0, 0).unwrap();
        let x2 = euler_step(&x1, &v, 1.0, 1).unwrap();
        let step = |k: usize, p: ParticleBatch, v: Option<VelocityBatch>| FlowStep {
            time: k as f64,
            support_radius: p.support_radius(),
            target_radius: 0.0,
            particles: p,
            velocity: v,
            energy: None,
        };
        FlowTrajectory {
            steps: vec![step(0, x0, Some(v.clone())), step(1, x1, Some(v)), step(2, x2, None)],
            step_size: 1.0,
            config: cfg,
        }
    }

    #[test]
    fn interpolation_examples() {
        let t = constant_trajectory();
        assert_eq!(interpolate(&t, 0.5).unwrap().positions(), array![[1.0, 0.0]]);
        assert_eq!(interpolate(&t, 1.0).unwrap(), t.steps[1].particles);
        assert_eq!(interpolate(&t, 2.0).unwrap(), *t.final_batch());
        assert_eq!(interpolate(&t, 1.25).unwrap().positions(), array![[2.5, 0.0]]);
        assert!(interpolate(&t, -0.1).is_err());
        assert!(interpolate(&t, 2.1).is_err());
    }

    #[test]
    fn zero_field_single_step_repeats_init() {
        let init = batch(&[&[0.5, -1.0], &[2.0, 0.0]]);
        let cfg = sinkhorn_config(1, 1);
        let t = simulate_flow_with(&init, &cfg, &ZeroVelocity).unwrap();
        assert_eq!(t.num_steps(), 1);
        assert_eq!(t.steps[0].particles, init);
        assert_eq!(t.steps[1].particles, init);
        assert_eq!(t.steps[0].time, 0.0);
        assert_eq!(t.steps[1].time, 0.5);
        assert!(t.steps[1].velocity.is_none());
    }

    #[test]
    fn kl_gaussian_mean_decays_geometrically() {
        let init = normal_init(4096, 4.0, 2);
        let t = simulate_flow(&init, &kl_gaussian_config(0.1, 10)).unwrap();
        let expected = 4.0 * 0.9f64.powi(10);
        assert!((expected - 1.3947).abs() < 1e-4);
        let m = mean_1d(t.final_batch());
        assert!((m - expected).abs() <= 0.05 * expected, "{m} vs {expected}");
        // moment matching makes the mean recursion exact: m_K = m_0 (1 - eta)^K
        let exact = mean_1d(&init) * 0.9f64.powi(10);
        assert!((m - exact).abs() < 1e-12, "{m} vs {exact}");
        assert!(t.energies().iter().all(Option::is_none));
    }

    #[test]
    fn euler_error_is_first_order_in_eta() {
        let init = normal_init(256, 4.0, 3);
        let shift = 4.0 - mean_1d(&init);
        let init = init.with_positions(&init.positions() + shift).unwrap();
        let errors: Vec<f64> = [0.2f64, 0.1, 0.05]
            .iter()
            .map(|&eta| {
                let k = (1.0 / eta).round() as usize;
                let t = simulate_flow(&init, &kl_gaussian_config(eta, k)).unwrap();
                (mean_1d(t.final_batch()) - 4.0 * (-1.0f64).exp()).abs()
            })
            .collect();
        // 4 |(1 - eta)^(1/eta) - e^-1|
        for (e, want) in errors.iter().zip([0.1608, 0.0768, 0.0376]) {
            assert!((e - want).abs() < 5e-4, "{e} vs {want}");
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.7..=2.3).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn support_bound_arithmetic() {
        assert_eq!(support_bound(1.0, 1, 1.0, 1.0), 3.0);
        assert_eq!(support_bound(0.3, 0, 1.5, 9.0), 1.5);
        assert!((support_bound_continuous(2f64.ln(), 1.0, 2.0) - 4.0).abs() < 1e-15);
        for k in 0..50 {
            let eta = 0.1;
            assert!(support_bound(eta, k, 1.0, 2.0) <= support_bound_continuous(k as f64 * eta, 1.0, 2.0) + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_flows_respect_support_bound_and_are_deterministic() {
        for seed in 0..3 {
            let init = DistributionSpec::StandardNormal { dim: 2 }
                .build()
                .unwrap()
                .sample(64, &mut stream(seed, "init"));
            let cfg = sinkhorn_config(seed, 12);
            let a = simulate_flow(&init, &cfg).unwrap();
            let b = simulate_flow(&init, &cfg).unwrap();
            assert_eq!(a, b);
            let r0 = init.support_radius();
            let rep = check_support_bound(&a, r0, max_target_radius(&a));
            assert!(rep.holds(), "seed {seed}: {:?}", rep.violations);
            assert!(rep.margins.iter().all(|m| *m >= -1e-12));
            assert!(a.energies().iter().all(Option::is_some));
        }
    }

    #[test]
    fn stationary_flow_stays_inside_bound() {
        let target = DistributionSpec::isotropic(vec![0.0, 0.0], 1.0);
        let init = target.build().unwrap().sample(64, &mut stream(4, "p"));
        let cfg = FlowConfig {
            target,
            num_steps: 5,
            ..sinkhorn_config(4, 5)
        };
        let t = simulate_flow(&init, &cfg).unwrap();
        let rep = check_support_bound(&t, init.support_radius(), max_target_radius(&t));
        assert!(rep.holds());
    }

    #[test]
    fn energy_follows_velocity_kind() {
        let init = DistributionSpec::StandardNormal { dim: 2 }
            .build()
            .unwrap()
            .sample(32, &mut stream(5, "init"));
        let cfg = FlowConfig {
            velocity: VelocityFieldSpec {
                kind: VelocityKind::Mmd { bandwidth: 1.0 },
                guidance: Guidance::None,
            },
            resample_target_each_step: false,
            num_steps: 3,
            ..sinkhorn_config(5, 3)
        };
        let t = simulate_flow(&init, &cfg).unwrap();
        let p = cfg.target.build().unwrap().sample(64, &mut stream(5, "flow/target"));
        let half_mmd = 0.5 * mmd_squared(&init, &p, 1.0).unwrap();
        assert_eq!(t.steps[0].energy, Some(half_mmd));
        let e: Vec<f64> = t.energies().into_iter().map(Option::unwrap).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]), "{e:?}");

        let kde = FlowConfig {
            velocity: VelocityFieldSpec {
                kind: VelocityKind::KlKde { bandwidth: 1.0 },
                guidance: Guidance::None,
            },
            ..cfg
        };
        assert!(simulate_flow(&init, &kde)
            .unwrap()
            .energies()
            .iter()
            .all(Option::is_none));
    }

    #[test]
    fn validation_names_fields() {
        let bad = FlowConfig {
            step_size: 0.0,
            ..sinkhorn_config(0, 1)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("step_size"));
        let bad = FlowConfig {
            num_steps: 0,
            ..sinkhorn_config(0, 1)
        };
        assert!(bad.validate().unwrap_err().to_string().contains("num_steps"));
        let guided = FlowConfig {
            velocity: sinkhorn_config(0, 1).velocity.with_guidance(Guidance::Velocity {
                w: 1.0,
                uncond_batch: 8,
            }),
            ..sinkhorn_config(0, 1)
        };
        assert!(guided.validate().unwrap_err().to_string().contains("uncond_target"));
    }

    #[test]
    fn kl_velocity_guidance_tilts_the_mean() {
        let cfg = FlowConfig {
            velocity: VelocityFieldSpec {
                kind: VelocityKind::KlAnalytic {
                    score_p: DistributionSpec::isotropic(vec![1.0], 1.0),
                    score_q: ScoreSource::MomentMatched,
                    score_p_uncond: Some(DistributionSpec::StandardNormal { dim: 1 }),
                },
                guidance: Guidance::Velocity {
                    w: 1.0,
                    uncond_batch: 1,
                },
            },
            target: DistributionSpec::isotropic(vec![1.0], 1.0),
            ..kl_gaussian_config(0.1, 150)
        };
        let t = simulate_flow(&normal_init(1024, 0.0, 6), &cfg).unwrap();
        let m = mean_1d(t.final_batch());
        assert!((m - 2.0).abs() < 1e-3, "{m}");
    }

    #[test]
    fn kl_distribution_guidance_extrapolates_the_mean() {
        // Gaussian moment matching has a stationary point at mean
        // (1 + w) mu_c - w mu_u with variance
        // (1 + w) s_c^2 - w s_u^2 - w (1 + w) (mu_c - mu_u)^2, which must be positive.
        let (w, mu_c) = (1.0, 0.5);
        let cfg = FlowConfig {
            velocity: VelocityFieldSpec {
                kind: VelocityKind::KlAnalytic {
                    score_p: DistributionSpec::isotropic(vec![mu_c], 1.0),
                    score_q: ScoreSource::MomentMatched,
                    score_p_uncond: None,
                },
                guidance: Guidance::Distribution { w, uncond_batch: 4096 },
            },
            target: DistributionSpec::isotropic(vec![mu_c], 1.0),
            uncond_target: Some(DistributionSpec::StandardNormal { dim: 1 }),
            ..kl_gaussian_config(0.1, 300)
        };
        let t = simulate_flow(&normal_init(4096, 0.0, 7), &cfg).unwrap();
        let fin = t.final_batch();
        let m = mean_1d(fin);
        assert!((m - (1.0 + w) * mu_c).abs() < 0.05, "{m}");
        let var = fin.covariance()[[0, 0]];
        assert!((var - 0.5).abs() < 0.05, "{var}");
    }
}
