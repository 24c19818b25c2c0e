//! One runner per experiment. Each writes its CSVs and SVGs into the output
//! directory and returns the headline metrics.
//!
//! Independent runs (estimators, guidance weights, grid cells, variants) are
//! evaluated in parallel; each draws from its own labelled RNG stream, so the
//! artifacts do not depend on the thread count.

use ndarray::Array2;
use rayon::prelude::*;
use wgf_core::acceptance::{mean_radial_gap, transport_floor};
use wgf_core::distributions::{Curve, Distribution, DistributionSpec};
use wgf_core::flow::{simulate_flow, FlowConfig};
use wgf_core::generator::{
    sample, train_generator, Conditioning, GeneratorParams, TrainConfig, TrainOutcome, TrainingData,
};
use wgf_core::metrics::{
    exact_w2, landscape_slice, mmd_squared, mode_coverage, modes_of, moment_errors, transport_distance_histogram,
    w2_to_normal_1d, LandscapeEval,
};
use wgf_core::ot::{sinkhorn_divergence, SinkhornSpec};
use wgf_core::rng::stream;
use wgf_core::velocity::{Guidance, SelfEstimator, VelocityFieldSpec, VelocityKind};
use wgf_core::ParticleBatch;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};
use crate::output::{plot_points, Frame, Metrics, OutputDir};
use crate::svg::{self, Series};

/// Samples drawn per series in scatter plots.
const PLOT_POINTS: usize = 2000;
/// Coverage radius and minimum share per mode for mode-coverage metrics.
const COVERAGE_RADIUS_SIGMAS: f64 = 3.0;
const COVERAGE_MIN_FRACTION: f64 = 0.01;

pub fn run(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    match cfg.experiment {
        ExperimentKind::GaussianTails => gaussian_tails(cfg, out),
        ExperimentKind::ModeCoverage => mode_coverage_run(cfg, out),
        ExperimentKind::DomainTransfer => domain_transfer(cfg, out),
        ExperimentKind::CfgCompare => cfg_compare(cfg, out),
        ExperimentKind::Landscape => landscape(cfg, out),
        ExperimentKind::FlowConvergence => flow_convergence(cfg, out),
        ExperimentKind::AblationVelocity => ablation(cfg, out),
    }
}

fn estimator_name(e: SelfEstimator) -> &'static str {
    match e {
        SelfEstimator::TwoBatch => "two-batch",
        SelfEstimator::OneBatch => "one-batch",
        SelfEstimator::OneBatchMasked => "one-batch-masked",
    }
}

fn with_estimator(spec: &VelocityFieldSpec, estimator: SelfEstimator) -> Result<VelocityFieldSpec> {
    let mut spec = spec.clone();
    match &mut spec.kind {
        VelocityKind::Sinkhorn { self_estimator, .. } => *self_estimator = estimator,
        _ => {
            return Err(CliError::invalid(
                "estimators",
                "self estimators apply only to a sinkhorn velocity",
            ))
        }
    }
    Ok(spec)
}

/// Sinkhorn settings for energy read-outs: the field's own when it has them.
fn energy_spec(spec: &VelocityFieldSpec) -> SinkhornSpec {
    match &spec.kind {
        VelocityKind::Sinkhorn { sinkhorn, .. } => sinkhorn.clone(),
        _ => SinkhornSpec::default().log_domain(),
    }
}

fn train(train: &TrainConfig, data: &TrainingData) -> Result<TrainOutcome> {
    Ok(train_generator(train.clone(), data.clone(), &mut |_| Ok(()))?)
}

fn ema_samples(
    outcome: &TrainOutcome,
    data: &TrainingData,
    count: usize,
    seed: u64,
    label: &str,
) -> Result<ParticleBatch> {
    Ok(sample(
        &outcome.ema,
        &data.reference,
        count,
        &Conditioning::none(),
        &mut stream(seed, label),
    )?)
}

fn trace(batch: &ParticleBatch) -> f64 {
    batch.covariance().diag().sum()
}

/// Trains once per configured self estimator, in parallel.
fn per_estimator(cfg: &ExperimentConfig) -> Result<(TrainingData, Vec<(SelfEstimator, ParticleBatch)>)> {
    let base = cfg.train()?;
    let data = TrainingData::new(&cfg.reference, cfg.target()?)?;
    let estimators = cfg.estimators.clone().unwrap_or_else(|| vec![SelfEstimator::TwoBatch]);
    let runs = estimators
        .par_iter()
        .map(|&e| {
            let mut t = base.clone();
            t.velocity = with_estimator(&base.velocity, e)?;
            let outcome = train(&t, &data)?;
            let s = ema_samples(
                &outcome,
                &data,
                cfg.eval_samples,
                cfg.seed,
                &format!("eval/{}", estimator_name(e)),
            )?;
            Ok((e, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((data, runs))
}

fn scatter_with_target(
    out: &mut OutputDir,
    title: &str,
    runs: &[(String, &ParticleBatch)],
    target: &ParticleBatch,
) -> Result<()> {
    let mut series: Vec<Series> = runs
        .iter()
        .map(|(l, b)| Series::new(l.clone(), plot_points(b, PLOT_POINTS)))
        .collect();
    series.push(Series::new("target", plot_points(target, PLOT_POINTS)));
    out.write_text("samples.svg", &svg::scatter(title, &series))
}

fn gaussian_tails(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let (data, runs) = per_estimator(cfg)?;
    let target = data
        .target
        .sample(cfg.eval_samples, &mut stream(cfg.seed, "eval/target"));
    let mut m = Metrics::default();
    m.push("target.trace", data.target.covariance().diag().sum());
    for (e, s) in &runs {
        let name = estimator_name(*e);
        let errors = moment_errors(s, &data.target)?;
        m.push(format!("{name}.mean_error"), errors.mean_error);
        m.push(format!("{name}.covariance_error"), errors.covariance_error);
        m.push(format!("{name}.trace"), trace(s));
    }
    let labelled: Vec<(String, &ParticleBatch)> =
        runs.iter().map(|(e, s)| (estimator_name(*e).to_string(), s)).collect();
    let mut sets: Vec<(&str, &ParticleBatch)> = labelled.iter().map(|(l, s)| (l.as_str(), *s)).collect();
    sets.push(("target", &target));
    out.samples(&sets)?;
    out.metrics(&m)?;
    scatter_with_target(out, "gaussian tails", &labelled, &target)?;
    Ok(m)
}

fn mode_coverage_run(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let (data, runs) = per_estimator(cfg)?;
    let modes = modes_of(&data.target, COVERAGE_RADIUS_SIGMAS);
    if modes.len() < 2 {
        return Err(CliError::invalid("target", "mode coverage needs a mixture target"));
    }
    let target = data
        .target
        .sample(cfg.eval_samples, &mut stream(cfg.seed, "eval/target"));
    let mut m = Metrics::default();
    let target_minority: f64 = data
        .target
        .component_weights()
        .iter()
        .zip(&modes)
        .filter(|(_, mode)| mode.minority)
        .map(|(w, _)| w)
        .sum();
    m.push("target.minority_mass", target_minority);
    for (e, s) in &runs {
        let name = estimator_name(*e);
        let r = mode_coverage(s, &modes, COVERAGE_MIN_FRACTION)?;
        for k in 0..modes.len() {
            m.push(format!("{name}.mode{k}.fraction"), r.fraction(k));
        }
        m.push(
            format!("{name}.modes_covered"),
            r.covered.iter().filter(|&&c| c).count() as f64,
        );
        m.push(format!("{name}.minority_mass"), r.minority_mass_fraction);
    }
    let labelled: Vec<(String, &ParticleBatch)> =
        runs.iter().map(|(e, s)| (estimator_name(*e).to_string(), s)).collect();
    let mut sets: Vec<(&str, &ParticleBatch)> = labelled.iter().map(|(l, s)| (l.as_str(), *s)).collect();
    sets.push(("target", &target));
    out.samples(&sets)?;
    out.metrics(&m)?;
    scatter_with_target(out, "mode coverage", &labelled, &target)?;
    Ok(m)
}

fn domain_transfer(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let train_cfg = cfg.train()?;
    let params = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| CliError::invalid("transfer", "missing"))?;
    let data = TrainingData::new(&cfg.reference, cfg.target()?)?;
    let tracked = data
        .reference
        .sample(params.tracked_points, &mut stream(cfg.seed, "transfer/tracked"));
    let energy_z = data
        .reference
        .sample(256, &mut stream(cfg.seed, "transfer/energy-inputs"));
    let energy_target = data.target.sample(256, &mut stream(cfg.seed, "transfer/energy-target"));
    let sinkhorn = energy_spec(&train_cfg.velocity);

    let mut frames: Vec<(usize, Array2<f64>, f64)> = Vec::new();
    let outcome = train_generator(train_cfg.clone(), data.clone(), &mut |snap| {
        let x = snap.ema.forward(tracked.positions(), &Conditioning::none())?;
        let e = ParticleBatch::uniform(snap.ema.forward(energy_z.positions(), &Conditioning::none())?)?;
        frames.push((snap.step, x, sinkhorn_divergence(&e, &energy_target, &sinkhorn)?));
        Ok(())
    })?;

    let z = data
        .reference
        .sample(cfg.eval_samples, &mut stream(cfg.seed, "eval/source"));
    let x = ParticleBatch::uniform(outcome.ema.forward(z.positions(), &Conditioning::none())?)?;
    let target = data
        .target
        .sample(cfg.eval_samples, &mut stream(cfg.seed, "eval/target"));
    let transport = transport_distance_histogram(&z, &x)?;
    let (lo, hi) = params.radius_band;
    let inside = x
        .positions()
        .outer_iter()
        .filter(|p| (lo..=hi).contains(&p.dot(p).sqrt()))
        .count() as f64
        / x.len() as f64;

    let mut m = Metrics::default();
    m.push("transport.mean", transport.mean);
    m.push("transport.p10", transport.p10);
    m.push("transport.median", transport.median);
    m.push("transport.p90", transport.p90);
    m.push("transport.max", transport.max);
    if let (Some(oval), Some(Curve::Circle { radius })) = (data.reference.curve(), data.target.curve()) {
        let gap = mean_radial_gap(oval, *radius);
        let floor = transport_floor(oval, &Curve::Circle { radius: *radius }, 1000)?;
        m.push("radial_gap", gap);
        m.push("transport.ratio_to_radial_gap", transport.mean / gap);
        m.push("exact_transport_floor", floor);
    }
    m.push("inside_band_fraction", inside);

    out.samples(&[("source", &z), ("generated", &x), ("target", &target)])?;
    out.metrics(&m)?;
    let frame_views: Vec<Frame<'_>> = frames
        .iter()
        .map(|(step, x, e)| Frame {
            step: *step,
            time: *step as f64,
            particles: x.view(),
            energy: Some(*e),
        })
        .collect();
    out.trajectory(&frame_views)?;
    out.write_text(
        "samples.svg",
        &svg::scatter(
            "domain transfer",
            &[
                Series::new("source", plot_points(&z, PLOT_POINTS)),
                Series::new("generated", plot_points(&x, PLOT_POINTS)),
                Series::new("target", plot_points(&target, PLOT_POINTS)),
            ],
        ),
    )?;
    let energy: Vec<(f64, f64)> = frames.iter().map(|(s, _, e)| (*s as f64, *e)).collect();
    out.write_text(
        "energy.svg",
        &svg::lines(
            "sinkhorn divergence at checkpoints",
            "step",
            "energy",
            &[Series::new("ema", energy)],
            true,
        ),
    )?;
    Ok(m)
}

fn guidance_label(g: &Guidance) -> &'static str {
    match g {
        Guidance::None => "none",
        Guidance::Distribution { .. } => "distribution",
        Guidance::Velocity { .. } => "velocity",
    }
}

fn cfg_compare(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let flow = cfg.flow()?;
    let params = cfg
        .guidance
        .as_ref()
        .ok_or_else(|| CliError::invalid("guidance", "missing"))?;
    let reference = cfg.reference.build()?;
    let init = reference.sample(params.particles, &mut stream(cfg.seed, "cfg/init"));
    let cond = flow.target.build()?;
    let uncond = flow
        .uncond_target
        .as_ref()
        .ok_or_else(|| {
            CliError::invalid(
                "flow.uncond_target",
                "guidance comparison needs an unconditional target",
            )
        })?
        .build()?;
    let (mu_c, mu_u) = (cond.mean(), uncond.mean());
    let axis: Vec<f64> = mu_c.iter().zip(&mu_u).map(|(c, u)| c - u).collect();
    let axis_norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    if axis_norm == 0.0 {
        return Err(CliError::invalid(
            "flow.target",
            "conditional and unconditional means coincide",
        ));
    }

    let uncond_batch = flow.velocity.guidance.uncond_batch().max(1);
    let modes = [
        Guidance::Velocity { w: 0.0, uncond_batch },
        Guidance::Distribution { w: 0.0, uncond_batch },
    ];
    let jobs: Vec<(Guidance, f64)> = modes
        .iter()
        .flat_map(|g| params.weights.iter().map(move |&w| (g.with_weight(w), w)))
        .collect();
    let finals = jobs
        .par_iter()
        .map(|(g, _)| {
            let config = FlowConfig {
                velocity: flow.velocity.clone().with_guidance(*g),
                ..flow.clone()
            };
            Ok(simulate_flow(&init, &config)?.final_batch().clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut m = Metrics::default();
    let mut curves: Vec<Series> = modes
        .iter()
        .map(|g| Series::new(guidance_label(g), Vec::new()))
        .collect();
    for (job, ((g, w), q)) in jobs.iter().zip(&finals).enumerate() {
        let mean = q.mean();
        let shift = mean
            .iter()
            .zip(&mu_c)
            .zip(&axis)
            .map(|((m, c), a)| (m - c) * a)
            .sum::<f64>()
            / axis_norm;
        let key = format!("{}.w{w}", guidance_label(g));
        for (k, v) in mean.iter().enumerate() {
            m.push(format!("{key}.mean{k}"), *v);
        }
        m.push(format!("{key}.shift_along_guidance"), shift);
        m.push(format!("{key}.trace"), trace(q));
        curves[job / params.weights.len()].points.push((*w, shift));
    }
    let labels: Vec<String> = jobs
        .iter()
        .map(|(g, w)| format!("{}-w{w}", guidance_label(g)))
        .collect();
    let sets: Vec<(&str, &ParticleBatch)> = labels.iter().map(|l| l.as_str()).zip(&finals).collect();
    out.samples(&sets)?;
    out.metrics(&m)?;
    out.write_text(
        "guidance.svg",
        &svg::lines(
            "final mean offset along conditional minus unconditional",
            "guidance weight w",
            "offset",
            &curves,
            false,
        ),
    )?;
    if let Some(&w_max) = params.weights.iter().max_by(|a, b| a.total_cmp(b)) {
        let series: Vec<Series> = jobs
            .iter()
            .zip(&finals)
            .zip(&labels)
            .filter(|(((_, w), _), _)| *w == w_max)
            .map(|((_, q), l)| Series::new(l.clone(), plot_points(q, PLOT_POINTS)))
            .collect();
        out.write_text(
            "samples.svg",
            &svg::scatter("final particles at the largest weight", &series),
        )?;
    }
    Ok(m)
}

fn landscape(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let train_cfg = cfg.train()?;
    let params = cfg
        .landscape
        .as_ref()
        .ok_or_else(|| CliError::invalid("landscape", "missing"))?;
    let data = TrainingData::new(&cfg.reference, cfg.target()?)?;
    let mut checkpoints: Vec<GeneratorParams> = Vec::new();
    train_generator(train_cfg.clone(), data.clone(), &mut |snap| {
        checkpoints.push(snap.params.clone());
        Ok(())
    })?;
    let eval = LandscapeEval {
        inputs: data
            .reference
            .sample(params.eval_inputs, &mut stream(cfg.seed, "landscape/inputs"))
            .into_positions(),
        target: data
            .target
            .sample(params.eval_targets, &mut stream(cfg.seed, "landscape/target")),
        sinkhorn: params.sinkhorn.clone(),
    };
    let slice = landscape_slice(&checkpoints, params.transverse_seed, &params.grid(), &eval)?;

    let header = vec!["x".to_string(), "y".to_string(), "energy".to_string()];
    let mut rows = Vec::with_capacity(slice.xs.len() * slice.ys.len());
    for (iy, y) in slice.ys.iter().enumerate() {
        for (ix, x) in slice.xs.iter().enumerate() {
            rows.push(vec![
                crate::output::float(*x),
                crate::output::float(*y),
                crate::output::float(slice.energy[[iy, ix]]),
            ]);
        }
    }
    out.write_csv("landscape.csv", &header, rows)?;
    let mut m = Metrics::default();
    m.push("checkpoints", checkpoints.len() as f64);
    for (k, e) in slice.trajectory_energy.iter().enumerate() {
        m.push(format!("trajectory.energy{k}"), *e);
    }
    out.metrics(&m)?;
    out.write_text(
        "landscape.svg",
        &svg::heatmap(
            "sinkhorn divergence landscape",
            &slice.xs,
            &slice.ys,
            &slice.energy,
            &slice.trajectory,
        ),
    )?;
    Ok(m)
}

/// `(mean, std)` of a one-dimensional Gaussian spec.
fn gaussian_1d(spec: &DistributionSpec, field: &str) -> Result<(f64, f64)> {
    let d: Distribution = spec.build()?;
    if d.dim() != 1
        || !matches!(
            spec,
            DistributionSpec::Gaussian { .. } | DistributionSpec::StandardNormal { .. }
        )
    {
        return Err(CliError::invalid(
            field,
            "flow convergence needs a one-dimensional Gaussian",
        ));
    }
    Ok((d.mean()[0], d.covariance()[[0, 0]].sqrt()))
}

fn flow_convergence(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let flow = cfg.flow()?;
    let params = cfg
        .convergence
        .as_ref()
        .ok_or_else(|| CliError::invalid("convergence", "missing"))?;
    let (m0, s0) = gaussian_1d(&cfg.reference, "reference")?;
    let score_p = match &flow.velocity.kind {
        VelocityKind::KlAnalytic { score_p, .. } => score_p,
        _ => {
            return Err(CliError::invalid(
                "flow.velocity",
                "flow convergence uses the kl-analytic velocity",
            ))
        }
    };
    let (mu, sigma) = gaussian_1d(score_p, "flow.velocity.score_p")?;
    let reference = cfg.reference.build()?;

    let jobs: Vec<(f64, usize)> = params
        .etas
        .iter()
        .flat_map(|&eta| params.particle_counts.iter().map(move |&n| (eta, n)))
        .collect();
    let steps_for = |eta: f64| ((params.horizon / eta).round() as usize).max(1);
    let results = jobs
        .par_iter()
        .map(|&(eta, n)| {
            let init = reference.sample(n, &mut stream(cfg.seed, &format!("convergence/init/{n}")));
            let steps = steps_for(eta);
            let config = FlowConfig {
                step_size: eta,
                num_steps: steps,
                ..flow.clone()
            };
            let t = simulate_flow(&init, &config)?;
            // exact law at the discrete final time k * eta
            let time = steps as f64 * eta;
            let decay = (-time / (sigma * sigma)).exp();
            let mean_t = mu + (m0 - mu) * decay;
            let var_t = sigma * sigma + (s0 * s0 - sigma * sigma) * decay * decay;
            let x: Vec<f64> = t.final_batch().positions().iter().copied().collect();
            let w2 = w2_to_normal_1d(&x, mean_t, var_t.sqrt())?;
            Ok((t, w2))
        })
        .collect::<Result<Vec<_>>>()?;

    let header: Vec<String> = ["eta", "N", "terminal_w2"].iter().map(|s| s.to_string()).collect();
    let rows = jobs
        .iter()
        .zip(&results)
        .map(|((eta, n), (_, w2))| vec![crate::output::float(*eta), n.to_string(), crate::output::float(*w2)]);
    out.write_csv("convergence.csv", &header, rows)?;

    let finest = jobs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(i, _)| i)
        .expect("at least one run");
    let trajectory = &results[finest].0;
    let keep = params.trajectory_particles.min(jobs[finest].1);
    let frames: Vec<Frame<'_>> = trajectory
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| Frame {
            step: k,
            time: s.time,
            particles: s.particles.positions().slice_move(ndarray::s![..keep, ..]),
            energy: s.energy,
        })
        .collect();
    out.trajectory(&frames)?;

    let mut m = Metrics::default();
    for ((eta, n), (_, w2)) in jobs.iter().zip(&results) {
        m.push(format!("terminal_w2.eta{eta}.n{n}"), *w2);
    }
    out.metrics(&m)?;
    let curves: Vec<Series> = params
        .particle_counts
        .iter()
        .map(|&n| {
            let pts = jobs
                .iter()
                .zip(&results)
                .filter(|((_, k), _)| *k == n)
                .map(|((eta, _), (_, w2))| (*eta, *w2))
                .collect();
            Series::new(format!("N={n}"), pts)
        })
        .collect();
    out.write_text(
        "convergence.svg",
        &svg::lines("terminal W2 to the exact flow", "eta", "W2", &curves, true),
    )?;
    Ok(m)
}

fn ablation(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Metrics> {
    let base = cfg.train()?;
    let params = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| CliError::invalid("ablation", "missing"))?;
    let data = TrainingData::new(&cfg.reference, cfg.target()?)?;
    let target = data
        .target
        .sample(params.w2_samples, &mut stream(cfg.seed, "ablation/target"));
    let results = params
        .variants
        .par_iter()
        .map(|v| {
            let t = TrainConfig {
                velocity: v.velocity.clone(),
                ..base.clone()
            };
            let outcome = train(&t, &data)?;
            let s = ema_samples(&outcome, &data, params.w2_samples, cfg.seed, "ablation/samples")?;
            let w2 = exact_w2(&s, &target)?;
            let mmd = mmd_squared(&s, &target, params.mmd_bandwidth)?;
            let loss = outcome.losses.last().copied().unwrap_or(f64::NAN);
            Ok((s, w2, mmd, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = Metrics::default();
    for (v, (_, w2, mmd, loss)) in params.variants.iter().zip(&results) {
        m.push(format!("{}.w2", v.name), *w2);
        m.push(format!("{}.mmd2", v.name), *mmd);
        m.push(format!("{}.final_loss", v.name), *loss);
    }
    let mut sets: Vec<(&str, &ParticleBatch)> = params
        .variants
        .iter()
        .map(|v| v.name.as_str())
        .zip(results.iter().map(|r| &r.0))
        .collect();
    sets.push(("target", &target));
    out.samples(&sets)?;
    out.metrics(&m)?;
    let series: Vec<Series> = sets
        .iter()
        .map(|(l, b)| Series::new(*l, plot_points(b, PLOT_POINTS)))
        .collect();
    out.write_text("samples.svg", &svg::scatter("velocity ablation", &series))?;
    Ok(m)
}
