//! Experiment configuration.
//!
//! A config file names an experiment and overrides any subset of that
//! experiment's defaults. Resolution deep-merges the file over the defaults
//! (tables merge key by key, everything else is replaced), applies the seed
//! override, then deserializes strictly so misspelled keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use wgf_core::distributions::{catalog_entry, DistributionSpec};
use wgf_core::flow::FlowConfig;
use wgf_core::generator::{Architecture, TrainConfig};
use wgf_core::metrics::LandscapeGrid;
use wgf_core::ot::{CostKind, SinkhornSpec};
use wgf_core::velocity::{Guidance, ScoreSource, SelfEstimator, VelocityFieldSpec, VelocityKind};

use crate::error::{CliError, Result};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "WGF_LAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GaussianTails,
    ModeCoverage,
    DomainTransfer,
    CfgCompare,
    Landscape,
    FlowConvergence,
    AblationVelocity,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::GaussianTails,
        ExperimentKind::ModeCoverage,
        ExperimentKind::DomainTransfer,
        ExperimentKind::CfgCompare,
        ExperimentKind::Landscape,
        ExperimentKind::FlowConvergence,
        ExperimentKind::AblationVelocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GaussianTails => "gaussian-tails",
            ExperimentKind::ModeCoverage => "mode-coverage",
            ExperimentKind::DomainTransfer => "domain-transfer",
            ExperimentKind::CfgCompare => "cfg-compare",
            ExperimentKind::Landscape => "landscape",
            ExperimentKind::FlowConvergence => "flow-convergence",
            ExperimentKind::AblationVelocity => "ablation-velocity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            CliError::invalid(
                "experiment",
                format!("unknown experiment {name:?}, expected one of {}", known.join(", ")),
            )
        })
    }
}

/// Grid of the flow-convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceParams {
    pub etas: Vec<f64>,
    pub particle_counts: Vec<usize>,
    /// Final time `T`; each run takes `round(T / eta)` steps.
    pub horizon: f64,
    /// Particles of the finest run written to trajectory.csv.
    pub trajectory_particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceParams {
    /// Each weight is run under both velocity and distribution guidance.
    pub weights: Vec<f64>,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeParams {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
    pub transverse_seed: u64,
    /// Fixed reference inputs at which each grid point is scored.
    pub eval_inputs: usize,
    pub eval_targets: usize,
    pub sinkhorn: SinkhornSpec,
}

impl LandscapeParams {
    pub fn grid(&self) -> LandscapeGrid {
        LandscapeGrid {
            x_range: self.x_range,
            y_range: self.y_range,
            resolution: self.resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub velocity: VelocityFieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationParams {
    pub variants: Vec<AblationVariant>,
    /// Sample count per side of the exact-W2 evaluation.
    pub w2_samples: usize,
    pub mmd_bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferParams {
    /// Reference points whose images are tracked across checkpoints.
    pub tracked_points: usize,
    pub radius_band: (f64, f64),
}

/// A fully resolved experiment. Only the sections its experiment uses are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub eval_samples: usize,
    /// Generator input distribution, or the initial particles of a flow.
    pub reference: DistributionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    /// Training target; flows carry theirs in `flow.target`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<DistributionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<SelfEstimator>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferParams>,
}

fn catalog(name: &str) -> DistributionSpec {
    catalog_entry(name).expect("bundled catalog entry")
}

fn toy_train(hidden: usize, steps: usize, velocity: VelocityFieldSpec) -> TrainConfig {
    TrainConfig {
        arch: Architecture {
            hidden: vec![hidden; 4],
            ..Architecture::default()
        },
        ema_decay: 0.99,
        steps,
        velocity,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    }
}

fn sinkhorn(epsilon: f64, estimator: SelfEstimator) -> VelocityFieldSpec {
    VelocityFieldSpec::sinkhorn(SinkhornSpec::new(epsilon, 100), estimator)
}

/// Mixture modes and wide Gaussian tails sit several units apart, where `exp(-C/eps)`
/// underflows whole rows of the kernel; these runs use the log domain.
fn sinkhorn_log(epsilon: f64, estimator: SelfEstimator) -> VelocityFieldSpec {
    VelocityFieldSpec::sinkhorn(SinkhornSpec::new(epsilon, 100).log_domain(), estimator)
}

impl ExperimentConfig {
    fn base(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            seed: 0,
            output_dir: PathBuf::from("runs").join(experiment.name()),
            eval_samples: 20_000,
            reference: DistributionSpec::StandardNormal { dim: 2 },
            train: None,
            flow: None,
            target: None,
            estimators: None,
            convergence: None,
            guidance: None,
            landscape: None,
            ablation: None,
            transfer: None,
        }
    }

    /// Defaults of one experiment; every field a config may set is present.
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let base = Self::base(experiment);
        match experiment {
            ExperimentKind::GaussianTails => Self {
                train: Some(toy_train(64, 2000, sinkhorn_log(0.05, SelfEstimator::TwoBatch))),
                target: Some(DistributionSpec::diagonal(vec![0.0, 0.0], &[1.0, 4.0])),
                estimators: Some(vec![SelfEstimator::TwoBatch, SelfEstimator::OneBatch]),
                ..base
            },
            ExperimentKind::ModeCoverage => Self {
                train: Some(toy_train(128, 5000, sinkhorn_log(0.2, SelfEstimator::TwoBatch))),
                target: Some(catalog("imbalanced-6+2")),
                estimators: Some(vec![SelfEstimator::TwoBatch, SelfEstimator::OneBatchMasked]),
                ..base
            },
            ExperimentKind::DomainTransfer => {
                let mut train = toy_train(64, 2000, sinkhorn(0.05, SelfEstimator::TwoBatch));
                train.arch.residual = true;
                train.arch.zero_init_final = true;
                train.checkpoint_interval = 100;
                Self {
                    reference: catalog("oval-source"),
                    train: Some(train),
                    target: Some(catalog("circle-target")),
                    transfer: Some(TransferParams {
                        tracked_points: 64,
                        radius_band: (1.8, 2.2),
                    }),
                    ..base
                }
            }
            ExperimentKind::CfgCompare => Self {
                flow: Some(FlowConfig {
                    step_size: 0.5,
                    num_steps: 60,
                    velocity: sinkhorn_log(0.05, SelfEstimator::OneBatch).with_guidance(Guidance::Velocity {
                        w: 0.0,
                        uncond_batch: 256,
                    }),
                    target: DistributionSpec::isotropic(vec![0.0, 4.0], 0.5),
                    uncond_target: Some(catalog("three-mode-conditional")),
                    target_batch: 256,
                    resample_target_each_step: false,
                    record_energy: false,
                    seed: 0,
                }),
                guidance: Some(GuidanceParams {
                    weights: vec![0.0, 1.0, 2.0, 4.0],
                    particles: 256,
                }),
                eval_samples: 0,
                ..base
            },
            ExperimentKind::Landscape => {
                let mut train = toy_train(64, 2000, sinkhorn_log(0.05, SelfEstimator::TwoBatch));
                train.checkpoint_interval = 200;
                Self {
                    train: Some(train),
                    target: Some(catalog("eight-gaussians-ring")),
                    landscape: Some(LandscapeParams {
                        x_range: (-0.5, 10.5),
                        y_range: (-2.0, 2.0),
                        resolution: (64, 64),
                        transverse_seed: 0,
                        eval_inputs: 256,
                        eval_targets: 256,
                        sinkhorn: SinkhornSpec::new(0.05, 100).log_domain(),
                    }),
                    eval_samples: 0,
                    ..base
                }
            }
            ExperimentKind::FlowConvergence => Self {
                reference: DistributionSpec::isotropic(vec![4.0], 1.0),
                flow: Some(FlowConfig {
                    step_size: 0.1,
                    num_steps: 10,
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
                    record_energy: false,
                    seed: 0,
                }),
                convergence: Some(ConvergenceParams {
                    etas: vec![0.2, 0.1, 0.05],
                    particle_counts: vec![256, 1024, 4096],
                    horizon: 1.0,
                    trajectory_particles: 64,
                }),
                eval_samples: 0,
                ..base
            },
            ExperimentKind::AblationVelocity => {
                let variant = |name: &str, velocity: VelocityFieldSpec| AblationVariant {
                    name: name.to_string(),
                    velocity,
                };
                let euclid = VelocityFieldSpec::sinkhorn(
                    SinkhornSpec {
                        cost_kind: CostKind::Euclidean,
                        ..SinkhornSpec::new(0.05, 100).log_domain()
                    },
                    SelfEstimator::TwoBatch,
                );
                let plain = |kind| VelocityFieldSpec {
                    kind,
                    guidance: Guidance::None,
                };
                Self {
                    train: Some(toy_train(64, 1000, sinkhorn_log(0.05, SelfEstimator::TwoBatch))),
                    target: Some(catalog("eight-gaussians-ring")),
                    ablation: Some(AblationParams {
                        variants: vec![
                            variant("sinkhorn-two-batch", sinkhorn_log(0.05, SelfEstimator::TwoBatch)),
                            variant("sinkhorn-one-batch", sinkhorn_log(0.05, SelfEstimator::OneBatch)),
                            variant("sinkhorn-masked", sinkhorn_log(0.05, SelfEstimator::OneBatchMasked)),
                            variant("sinkhorn-eps-0.5", sinkhorn_log(0.5, SelfEstimator::TwoBatch)),
                            variant("sinkhorn-euclidean", euclid),
                            variant("mmd", plain(VelocityKind::Mmd { bandwidth: 2.0 })),
                            variant("kl-kde", plain(VelocityKind::KlKde { bandwidth: 1.0 })),
                        ],
                        w2_samples: 512,
                        mmd_bandwidth: 1.0,
                    }),
                    eval_samples: 0,
                    ..base
                }
            }
        }
    }

    /// Parses a config file body, merges it over the experiment defaults and
    /// applies `seed_override`.
    pub fn resolve(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        let name = match user.get("experiment") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(CliError::invalid("experiment", "must be a string")),
            None => return Err(CliError::invalid("experiment", "missing")),
        };
        let kind = ExperimentKind::from_name(&name)?;
        let mut merged = Table::try_from(Self::defaults(kind)).map_err(|e| CliError::Parse(e.to_string()))?;
        merge(&mut merged, user);
        let mut cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::resolve(&text, seed_override)
    }

    /// The top-level seed is the only seed; nested seed fields mirror it.
    fn propagate_seed(&mut self) {
        if let Some(t) = &mut self.train {
            t.seed = self.seed;
        }
        if let Some(f) = &mut self.flow {
            f.seed = self.seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::invalid("train", "required by this experiment"))
    }

    pub fn flow(&self) -> Result<&FlowConfig> {
        self.flow
            .as_ref()
            .ok_or_else(|| CliError::invalid("flow", "required by this experiment"))
    }

    pub fn target(&self) -> Result<&DistributionSpec> {
        self.target
            .as_ref()
            .ok_or_else(|| CliError::invalid("target", "required by this experiment"))
    }

    fn validate(&self) -> Result<()> {
        let allowed = Self::defaults(self.experiment);
        let sections = [
            ("train", self.train.is_some(), allowed.train.is_some()),
            ("flow", self.flow.is_some(), allowed.flow.is_some()),
            ("target", self.target.is_some(), allowed.target.is_some()),
            ("estimators", self.estimators.is_some(), allowed.estimators.is_some()),
            ("convergence", self.convergence.is_some(), allowed.convergence.is_some()),
            ("guidance", self.guidance.is_some(), allowed.guidance.is_some()),
            ("landscape", self.landscape.is_some(), allowed.landscape.is_some()),
            ("ablation", self.ablation.is_some(), allowed.ablation.is_some()),
            ("transfer", self.transfer.is_some(), allowed.transfer.is_some()),
        ];
        if let Some((name, ..)) = sections.iter().find(|(_, set, ok)| *set && !*ok) {
            return Err(CliError::invalid(
                name,
                format!("not used by experiment {}", self.experiment.name()),
            ));
        }
        self.reference.build()?;
        if let Some(t) = &self.target {
            t.build()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(f) = &self.flow {
            f.validate()?;
        }
        if let Some(e) = &self.estimators {
            if e.is_empty() {
                return Err(CliError::invalid("estimators", "must list at least one estimator"));
            }
        }
        if matches!(
            self.experiment,
            ExperimentKind::GaussianTails | ExperimentKind::ModeCoverage | ExperimentKind::DomainTransfer
        ) && self.eval_samples == 0
        {
            return Err(CliError::invalid("eval_samples", "must be >= 1"));
        }
        if let Some(c) = &self.convergence {
            if c.etas.is_empty() || c.etas.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(CliError::invalid(
                    "convergence.etas",
                    "must be a non-empty list of values > 0",
                ));
            }
            if c.particle_counts.is_empty() || c.particle_counts.contains(&0) {
                return Err(CliError::invalid(
                    "convergence.particle_counts",
                    "must be a non-empty list of counts >= 1",
                ));
            }
            if !(c.horizon > 0.0 && c.horizon.is_finite()) {
                return Err(CliError::invalid("convergence.horizon", "must be > 0"));
            }
        }
        if let Some(g) = &self.guidance {
            if g.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(CliError::invalid("guidance.weights", "must be >= 0"));
            }
            if g.particles == 0 {
                return Err(CliError::invalid("guidance.particles", "must be >= 1"));
            }
        }
        if let Some(l) = &self.landscape {
            if l.eval_inputs == 0 || l.eval_targets == 0 {
                return Err(CliError::invalid(
                    "landscape.eval_inputs",
                    "eval_inputs and eval_targets must be >= 1",
                ));
            }
            if self.train()?.checkpoint_interval == 0 {
                return Err(CliError::invalid(
                    "train.checkpoint_interval",
                    "landscape needs checkpoints (>= 1)",
                ));
            }
            l.sinkhorn.validate()?;
        }
        if let Some(a) = &self.ablation {
            if a.variants.is_empty() {
                return Err(CliError::invalid("ablation.variants", "must list at least one variant"));
            }
            for v in &a.variants {
                v.velocity.validate()?;
            }
            if a.w2_samples == 0 {
                return Err(CliError::invalid("ablation.w2_samples", "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Seed precedence: `--seed`, then the environment, then the config file.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::invalid(SEED_ENV, format!("not an unsigned integer: {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Keys that select an enum variant; the variant's fields go with them.
const TAGS: [&str; 4] = ["kind", "shape", "source", "mode"];

/// True when `over` names a different variant than `base`, so the default's
/// variant-specific fields must not leak into it.
fn switches_variant(base: &Table, over: &Table) -> bool {
    TAGS.iter()
        .any(|t| matches!((base.get(*t), over.get(*t)), (Some(a), Some(b)) if a != b))
}

fn merge(base: &mut Table, over: Table) {
    if switches_variant(base, &over) {
        // guidance sits beside the velocity kind and survives a change of kind
        let guidance = base.remove("guidance");
        *base = over;
        if let (Some(g), false) = (guidance, base.contains_key("guidance")) {
            base.insert("guidance".into(), g);
        }
        return;
    }
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in ExperimentKind::ALL {
            let d = ExperimentConfig::defaults(kind);
            let text = d.to_toml().unwrap();
            let back = ExperimentConfig::resolve(&text, None).unwrap();
            assert_eq!(back, d, "{}", kind.name());
        }
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg = ExperimentConfig::resolve("experiment = \"gaussian-tails\"\nseed = 3\n[train]\nsteps = 10\n", None)
            .unwrap();
        assert_eq!(cfg.train().unwrap().steps, 10);
        assert_eq!(cfg.train().unwrap().seed, 3);
        assert_eq!(cfg.train().unwrap().arch.hidden, vec![64; 4]);
    }

    #[test]
    fn changing_a_variant_drops_the_default_variant_fields() {
        let cfg = ExperimentConfig::resolve(
            "experiment = \"gaussian-tails\"\n[train.velocity]\nkind = \"mmd\"\nbandwidth = 2.0\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.train().unwrap().velocity.kind, VelocityKind::Mmd { bandwidth: 2.0 });
        // same variant: fields merge
        let cfg = ExperimentConfig::resolve(
            "experiment = \"cfg-compare\"\n[flow.velocity.sinkhorn]\nepsilon = 0.3\n",
            None,
        )
        .unwrap();
        let v = &cfg.flow().unwrap().velocity;
        assert!(
            matches!(&v.kind, VelocityKind::Sinkhorn { sinkhorn, .. } if sinkhorn.epsilon == 0.3 && sinkhorn.log_domain)
        );
        assert_ne!(v.guidance, Guidance::None);
    }

    #[test]
    fn seed_override_wins() {
        let cfg = ExperimentConfig::resolve("experiment = \"flow-convergence\"\nseed = 3\n", Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.flow().unwrap().seed, 9);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::resolve("experiment = \"flow-convergence\"\n[flow]\nstep_size = 0.0\n", None)
            .unwrap_err();
        assert!(err.to_string().contains("flow.step_size"), "{err}");
        let err = ExperimentConfig::resolve("experiment = \"nope\"\n", None).unwrap_err();
        assert!(err.to_string().contains("experiment"), "{err}");
        let err = ExperimentConfig::resolve("experiment = \"gaussian-tails\"\n[train]\nstepz = 1\n", None).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = ExperimentConfig::resolve(
            "experiment = \"gaussian-tails\"\n[landscape]\nresolution = [2, 2]\n",
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("landscape"), "{err}");
        for e in [
            ExperimentConfig::resolve("experiment = \"flow-convergence\"\n[flow]\nstep_size = -1.0\n", None)
                .unwrap_err(),
            ExperimentConfig::resolve("experiment = 3\n", None).unwrap_err(),
        ] {
            assert_eq!(e.exit_code(), 2);
        }
    }
}
