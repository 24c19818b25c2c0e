//! Particle estimators of the velocity fields driving the flow.
//!
//! Every kind is written as `attraction(q -> p) - repulsion(q -> q')`:
//!
//! | kind         | attraction at `x_i`                          |
//! |--------------|----------------------------------------------|
//! | Sinkhorn     | barycentric map `T_{q,p}(x_i)`               |
//! | MMD          | `sum_j b_j (y_j - x_i) k(x_i, y_j) / s^2`    |
//! | KL (KDE)     | kernel-weighted mean of `p` at `x_i`, `/ s^2` |
//! | KL (analytic)| `grad log p(x_i)`                            |
//!
//! Velocity guidance adds `w * (attraction(q -> p_c) - attraction(q -> p_u))`.
//! Distribution guidance instead mixes `p_u` into the repulsive batch.
//!
//! The second batch `q'` must be drawn independently of `q` by the caller.

use std::borrow::Cow;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::batch::ParticleBatch;
use crate::distributions::{Distribution, DistributionSpec};
use crate::error::{Error, Result};
use crate::ot::{barycentric_projection, build_cost_matrix, sinkhorn_scaling, SinkhornSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SelfEstimator {
    /// Self term from an independent batch `q'`.
    #[default]
    TwoBatch,
    /// Self term `T_{q,q}` with the diagonal left in.
    OneBatch,
    /// Self term `T_{q,q}` with `K_ii = 0`.
    OneBatchMasked,
}

/// Where the score of the current distribution comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSource {
    Fixed {
        distribution: DistributionSpec,
    },
    /// Score of the Gaussian with the repulsive batch's mean and covariance.
    MomentMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VelocityKind {
    Sinkhorn {
        #[serde(default)]
        sinkhorn: SinkhornSpec,
        #[serde(default)]
        self_estimator: SelfEstimator,
    },
    Mmd {
        bandwidth: f64,
    },
    KlKde {
        bandwidth: f64,
    },
    KlAnalytic {
        score_p: DistributionSpec,
        score_q: ScoreSource,
        /// Unconditional target score, used only by velocity guidance.
        #[serde(default)]
        score_p_uncond: Option<DistributionSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Guidance {
    #[default]
    None,
    Distribution {
        w: f64,
        #[serde(default = "default_uncond_batch")]
        uncond_batch: usize,
    },
    Velocity {
        w: f64,
        #[serde(default = "default_uncond_batch")]
        uncond_batch: usize,
    },
}

fn default_uncond_batch() -> usize {
    32
}

impl Guidance {
    pub fn weight(&self) -> f64 {
        match *self {
            Guidance::None => 0.0,
            Guidance::Distribution { w, .. } | Guidance::Velocity { w, .. } => w,
        }
    }

    pub fn uncond_batch(&self) -> usize {
        match *self {
            Guidance::None => 0,
            Guidance::Distribution { uncond_batch, .. } | Guidance::Velocity { uncond_batch, .. } => uncond_batch,
        }
    }

    /// Same mode with a different scale.
    pub fn with_weight(self, w: f64) -> Self {
        match self {
            Guidance::None => Guidance::None,
            Guidance::Distribution { uncond_batch, .. } => Guidance::Distribution { w, uncond_batch },
            Guidance::Velocity { uncond_batch, .. } => Guidance::Velocity { w, uncond_batch },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityFieldSpec {
    #[serde(flatten)]
    pub kind: VelocityKind,
    pub guidance: Guidance,
}

// `flatten` cannot reject unknown keys, so `guidance` is split off by hand and
// the remaining table goes through the strict `VelocityKind` deserializer.
impl<'de> Deserialize<'de> for VelocityFieldSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut table = serde_json::Map::deserialize(deserializer)?;
        let guidance = match table.remove("guidance") {
            Some(g) => Guidance::deserialize(g).map_err(D::Error::custom)?,
            None => Guidance::None,
        };
        let kind = VelocityKind::deserialize(serde_json::Value::Object(table)).map_err(D::Error::custom)?;
        Ok(Self { kind, guidance })
    }
}

impl VelocityFieldSpec {
    pub fn sinkhorn(sinkhorn: SinkhornSpec, self_estimator: SelfEstimator) -> Self {
        Self {
            kind: VelocityKind::Sinkhorn {
                sinkhorn,
                self_estimator,
            },
            guidance: Guidance::None,
        }
    }

    pub fn with_guidance(mut self, guidance: Guidance) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            VelocityKind::Sinkhorn { sinkhorn, .. } => sinkhorn.validate()?,
            VelocityKind::Mmd { bandwidth } | VelocityKind::KlKde { bandwidth } => {
                if !(*bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(Error::config(
                        "velocity.bandwidth",
                        format!("must be > 0, got {bandwidth}"),
                    ));
                }
            }
            VelocityKind::KlAnalytic {
                score_p,
                score_q,
                score_p_uncond,
            } => {
                score_p.build()?;
                if let ScoreSource::Fixed { distribution } = score_q {
                    distribution.build()?;
                }
                if let Some(u) = score_p_uncond {
                    u.build()?;
                }
            }
        }
        let w = self.guidance.weight();
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::config("velocity.guidance.w", format!("must be >= 0, got {w}")));
        }
        if matches!(self.guidance, Guidance::Distribution { .. } | Guidance::Velocity { .. })
            && self.guidance.uncond_batch() == 0
        {
            return Err(Error::config("velocity.guidance.uncond_batch", "must be >= 1"));
        }
        Ok(())
    }

    /// Whether evaluation needs an independent second batch `q'`.
    pub fn needs_second_batch(&self) -> bool {
        match &self.kind {
            VelocityKind::Sinkhorn { self_estimator, .. } => *self_estimator == SelfEstimator::TwoBatch,
            VelocityKind::Mmd { .. } | VelocityKind::KlKde { .. } => true,
            VelocityKind::KlAnalytic { score_q, .. } => matches!(score_q, ScoreSource::MomentMatched),
        }
    }

    /// Whether evaluation needs an unconditional target batch.
    pub fn needs_uncond_batch(&self) -> bool {
        !matches!(self.guidance, Guidance::None)
            && !matches!(self.kind, VelocityKind::KlAnalytic { .. } if matches!(self.guidance, Guidance::Velocity { .. }))
    }
}

/// Per-particle velocity, row-aligned with the source batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityBatch {
    vectors: Array2<f64>,
}

impl VelocityBatch {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if let Some(v) = vectors.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite velocity entry {v}")));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            vectors: Array2::zeros((n, d)),
        }
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean Euclidean norm over particles.
    pub fn mean_norm(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.vectors.outer_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.vectors.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Batches an estimator may draw on. `p_uncond` is only read under guidance.
#[derive(Debug, Clone, Copy)]
pub struct VelocityInputs<'a> {
    pub q: &'a ParticleBatch,
    pub q_second: &'a ParticleBatch,
    pub p: &'a ParticleBatch,
    pub p_uncond: Option<&'a ParticleBatch>,
}

/// Anything that maps particle batches to velocities.
pub trait VelocityField {
    fn velocity(&self, inputs: &VelocityInputs<'_>) -> Result<VelocityBatch>;
}

impl VelocityField for VelocityFieldSpec {
    fn velocity(&self, inputs: &VelocityInputs<'_>) -> Result<VelocityBatch> {
        evaluate(self, inputs)
    }
}

/// `V = 0` everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroVelocity;

impl VelocityField for ZeroVelocity {
    fn velocity(&self, inputs: &VelocityInputs<'_>) -> Result<VelocityBatch> {
        Ok(VelocityBatch::zeros(inputs.q.len(), inputs.q.dim()))
    }
}

fn check_dims(batches: &[&ParticleBatch]) -> Result<()> {
    let d = batches[0].dim();
    if let Some(b) = batches.iter().find(|b| b.dim() != d) {
        return Err(Error::DimensionMismatch(format!("d={d} vs d={}", b.dim())));
    }
    Ok(())
}

fn nonempty(b: &ParticleBatch, role: &str) -> Result<()> {
    if b.is_empty() {
        return Err(Error::InvalidInput(format!("{role} batch is empty")));
    }
    Ok(())
}

/// `T_{q,target}` under `spec`, optionally with `C_ii = +inf` on the leading square block.
fn sinkhorn_map(
    q: &ParticleBatch,
    target: &ParticleBatch,
    spec: &SinkhornSpec,
    mask_diagonal: bool,
) -> Result<Array2<f64>> {
    let mut cost = build_cost_matrix(q, target, spec.cost_kind)?;
    if mask_diagonal {
        cost = cost.with_masked_leading_diagonal();
    }
    let coupling = sinkhorn_scaling(&cost, q.weights(), target.weights(), spec)?;
    barycentric_projection(&coupling, target.positions(), q.weights())
}

/// `V = T_{q,p} - T_{q,q'}`.
pub fn sinkhorn_velocity(
    q: &ParticleBatch,
    q_second: &ParticleBatch,
    p: &ParticleBatch,
    spec: &SinkhornSpec,
) -> Result<VelocityBatch> {
    check_dims(&[q, q_second, p])?;
    let cross = sinkhorn_map(q, p, spec, false)?;
    let own = sinkhorn_map(q, q_second, spec, false)?;
    VelocityBatch::new(cross - own)
}

/// `V = T_{q,p} - T_{q,q}`, the self coupling optionally diagonal-masked.
pub fn sinkhorn_velocity_one_batch(
    q: &ParticleBatch,
    p: &ParticleBatch,
    spec: &SinkhornSpec,
    masked: bool,
) -> Result<VelocityBatch> {
    check_dims(&[q, p])?;
    let cross = sinkhorn_map(q, p, spec, false)?;
    let own = sinkhorn_map(q, q, spec, masked)?;
    VelocityBatch::new(cross - own)
}

fn gaussian_weights(x: ArrayView1<f64>, y: ArrayView2<f64>, inv_two_var: f64, out: &mut [f64]) {
    for (o, yj) in out.iter_mut().zip(y.outer_iter()) {
        let d2: f64 = x.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
        *o = (-d2 * inv_two_var).exp();
    }
}

/// `(1/s^2) sum_j b_j (y_j - x_i) k(x_i, y_j)` for every `x_i`.
fn mmd_attraction(q: &ParticleBatch, target: &ParticleBatch, sigma: f64) -> Array2<f64> {
    let (n, d) = (q.len(), q.dim());
    let inv_var = 1.0 / (sigma * sigma);
    let y = target.positions();
    let b = target.weights();
    let mut k = vec![0.0; target.len()];
    let mut out = Array2::zeros((n, d));
    for (i, x) in q.positions().outer_iter().enumerate() {
        gaussian_weights(x, y, 0.5 * inv_var, &mut k);
        let mut row = out.row_mut(i);
        for ((yj, kj), bj) in y.outer_iter().zip(&k).zip(b) {
            let c = bj * kj;
            for a in 0..d {
                row[a] += c * (yj[a] - x[a]);
            }
        }
        row.mapv_inplace(|v| v * inv_var);
    }
    out
}

pub fn mmd_velocity(
    q: &ParticleBatch,
    q_second: &ParticleBatch,
    p: &ParticleBatch,
    sigma: f64,
) -> Result<VelocityBatch> {
    check_sigma(sigma)?;
    check_dims(&[q, q_second, p])?;
    VelocityBatch::new(mmd_attraction(q, p, sigma) - mmd_attraction(q, q_second, sigma))
}

/// Kernel-weighted mean of `target` at every `x_i`, divided by `s^2`.
fn kde_attraction(q: &ParticleBatch, target: &ParticleBatch, sigma: f64) -> Result<Array2<f64>> {
    let (n, d) = (q.len(), q.dim());
    let inv_var = 1.0 / (sigma * sigma);
    let y = target.positions();
    let b = target.weights();
    let mut k = vec![0.0; target.len()];
    let mut out = Array2::zeros((n, d));
    for (i, x) in q.positions().outer_iter().enumerate() {
        gaussian_weights(x, y, 0.5 * inv_var, &mut k);
        let total: f64 = k.iter().zip(b).map(|(kj, bj)| kj * bj).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateKde { index: i });
        }
        let mut row = out.row_mut(i);
        for ((yj, kj), bj) in y.outer_iter().zip(&k).zip(b) {
            let c = bj * kj / total;
            for a in 0..d {
                row[a] += c * yj[a];
            }
        }
        row.mapv_inplace(|v| v * inv_var);
    }
    Ok(out)
}

pub fn kl_kde_velocity(
    q: &ParticleBatch,
    q_second: &ParticleBatch,
    p: &ParticleBatch,
    sigma: f64,
) -> Result<VelocityBatch> {
    check_sigma(sigma)?;
    check_dims(&[q, q_second, p])?;
    VelocityBatch::new(kde_attraction(q, p, sigma)? - kde_attraction(q, q_second, sigma)?)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be > 0, got {sigma}")));
    }
    Ok(())
}

/// Score function evaluated row by row.
pub trait Score {
    fn score_at(&self, x: ArrayView1<f64>) -> Result<Array1<f64>>;
}

impl Score for Distribution {
    fn score_at(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.score(x)
    }
}

fn score_rows(s: &dyn Score, q: &ParticleBatch) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((q.len(), q.dim()));
    for (i, x) in q.positions().outer_iter().enumerate() {
        let v = s.score_at(x)?;
        if v.len() != q.dim() {
            return Err(Error::DimensionMismatch(format!(
                "score of dimension {} at a d={} particle",
                v.len(),
                q.dim()
            )));
        }
        if let Some(bad) = v.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite score {bad} at particle {i}")));
        }
        out.row_mut(i).assign(&v);
    }
    Ok(out)
}

/// `V(x_i) = grad log p(x_i) - grad log q(x_i)`.
pub fn kl_analytic_velocity(q: &ParticleBatch, score_p: &dyn Score, score_q: &dyn Score) -> Result<VelocityBatch> {
    VelocityBatch::new(score_rows(score_p, q)? - score_rows(score_q, q)?)
}

/// Gaussian with the batch's weighted mean and (biased) covariance.
pub fn moment_matched_gaussian(batch: &ParticleBatch) -> Result<Distribution> {
    let c = batch.covariance();
    let d = batch.dim();
    DistributionSpec::Gaussian {
        mean: batch.mean(),
        covariance: (0..d).map(|i| (0..d).map(|j| c[[i, j]]).collect()).collect(),
    }
    .build()
    .map_err(|_| Error::InvalidInput("moment-matched covariance is singular".into()))
}

/// Repulsive batch for distribution guidance: `q_cond` with mass `1/(w+1)`, `p_uncond` with mass `w/(w+1)`.
pub fn apply_distribution_guidance(q_cond: &ParticleBatch, p_uncond: &ParticleBatch, w: f64) -> Result<ParticleBatch> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidInput(format!("guidance weight must be >= 0, got {w}")));
    }
    if w == 0.0 {
        return Ok(q_cond.clone());
    }
    ParticleBatch::concat_weighted(q_cond, p_uncond, 1.0 / (w + 1.0))
}

/// `V = (T_{q,p_c} - T_{q,q'}) + w (T_{q,p_c} - T_{q,p_u})`.
pub fn velocity_guidance(
    q_cond: &ParticleBatch,
    q_second_cond: &ParticleBatch,
    p_cond: &ParticleBatch,
    p_uncond: &ParticleBatch,
    spec: &SinkhornSpec,
    w: f64,
) -> Result<VelocityBatch> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidInput(format!("guidance weight must be >= 0, got {w}")));
    }
    check_dims(&[q_cond, q_second_cond, p_cond, p_uncond])?;
    let cross = sinkhorn_map(q_cond, p_cond, spec, false)?;
    let own = sinkhorn_map(q_cond, q_second_cond, spec, false)?;
    let base = &cross - &own;
    if w == 0.0 {
        return VelocityBatch::new(base);
    }
    let uncond = sinkhorn_map(q_cond, p_uncond, spec, false)?;
    VelocityBatch::new(base + (cross - uncond) * w)
}

/// Evaluates a configured field, including its guidance mode.
pub fn evaluate(spec: &VelocityFieldSpec, inputs: &VelocityInputs<'_>) -> Result<VelocityBatch> {
    let VelocityInputs {
        q,
        q_second,
        p,
        p_uncond,
    } = *inputs;
    nonempty(q, "source")?;
    let w = spec.guidance.weight();
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::config("velocity.guidance.w", format!("must be >= 0, got {w}")));
    }
    let uncond = || p_uncond.ok_or_else(|| Error::InvalidInput("guidance needs an unconditional target batch".into()));

    if let VelocityKind::KlAnalytic {
        score_p,
        score_q,
        score_p_uncond,
    } = &spec.kind
    {
        return kl_analytic_guided(
            q,
            q_second,
            p_uncond,
            score_p,
            score_q,
            score_p_uncond.as_ref(),
            spec.guidance,
        );
    }

    nonempty(p, "target")?;
    let (self_batch, masked) = match &spec.kind {
        VelocityKind::Sinkhorn { self_estimator, .. } => match self_estimator {
            SelfEstimator::TwoBatch => (q_second, false),
            SelfEstimator::OneBatch => (q, false),
            SelfEstimator::OneBatchMasked => (q, true),
        },
        _ => (q_second, false),
    };
    nonempty(self_batch, "self")?;
    let self_batch = match spec.guidance {
        Guidance::Distribution { w, .. } if w > 0.0 => {
            Cow::Owned(apply_distribution_guidance(self_batch, uncond()?, w)?)
        }
        _ => Cow::Borrowed(self_batch),
    };
    check_dims(&[q, &self_batch, p])?;

    let attraction = |target: &ParticleBatch| -> Result<Array2<f64>> {
        match &spec.kind {
            VelocityKind::Sinkhorn { sinkhorn, .. } => sinkhorn_map(q, target, sinkhorn, false),
            VelocityKind::Mmd { bandwidth } => {
                check_sigma(*bandwidth)?;
                Ok(mmd_attraction(q, target, *bandwidth))
            }
            VelocityKind::KlKde { bandwidth } => {
                check_sigma(*bandwidth)?;
                kde_attraction(q, target, *bandwidth)
            }
            VelocityKind::KlAnalytic { .. } => unreachable!("handled above"),
        }
    };
    let cross = attraction(p)?;
    let own = match &spec.kind {
        VelocityKind::Sinkhorn { sinkhorn, .. } => sinkhorn_map(q, &self_batch, sinkhorn, masked)?,
        _ => attraction(&self_batch)?,
    };
    let base = &cross - &own;
    match spec.guidance {
        Guidance::Velocity { w, .. } if w > 0.0 => {
            let u = uncond()?;
            check_dims(&[q, u])?;
            let toward_uncond = attraction(u)?;
            VelocityBatch::new(base + (cross - toward_uncond) * w)
        }
        _ => VelocityBatch::new(base),
    }
}

fn kl_analytic_guided(
    q: &ParticleBatch,
    q_second: &ParticleBatch,
    p_uncond: Option<&ParticleBatch>,
    score_p: &DistributionSpec,
    score_q: &ScoreSource,
    score_p_uncond: Option<&DistributionSpec>,
    guidance: Guidance,
) -> Result<VelocityBatch> {
    let target = score_p.build()?;
    let sq = match score_q {
        ScoreSource::Fixed { distribution } => {
            if matches!(guidance, Guidance::Distribution { w, .. } if w > 0.0) {
                return Err(Error::UnsupportedInstance(
                    "distribution guidance needs a moment-matched score_q".into(),
                ));
            }
            distribution.build()?
        }
        ScoreSource::MomentMatched => {
            let repulsive = match guidance {
                Guidance::Distribution { w, .. } if w > 0.0 => {
                    let u = p_uncond.ok_or_else(|| {
                        Error::InvalidInput("distribution guidance needs an unconditional batch".into())
                    })?;
                    apply_distribution_guidance(q_second, u, w)?
                }
                _ => q_second.clone(),
            };
            moment_matched_gaussian(&repulsive)?
        }
    };
    let sp = score_rows(&target, q)?;
    let base = &sp - &score_rows(&sq, q)?;
    match guidance {
        Guidance::Velocity { w, .. } if w > 0.0 => {
            let u = score_p_uncond
                .ok_or_else(|| Error::config("velocity.score_p_uncond", "velocity guidance needs it"))?
                .build()?;
            VelocityBatch::new(base + (sp - score_rows(&u, q)?) * w)
        }
        _ => VelocityBatch::new(base),
    }
}
