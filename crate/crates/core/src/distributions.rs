//! Toy source and target distributions: seeded sampling, analytic scores and
//! log-densities, closed-form moments, and the named catalog.

use std::f64::consts::{PI, TAU};

use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::ParticleBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;

const CATALOG_SOURCE: &str = include_str!("../catalog/toy_catalog.toml");
const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Curve {
    Circle { radius: f64 },
    Oval { semi_axes: [f64; 2] },
}

impl Curve {
    /// Curve point at parameter `theta`.
    pub fn point(&self, theta: f64) -> [f64; 2] {
        match self {
            Curve::Circle { radius } => [radius * theta.cos(), radius * theta.sin()],
            Curve::Oval { semi_axes: [a, b] } => [a * theta.cos(), b * theta.sin()],
        }
    }

    /// Radius of the curve point at angle `theta`.
    pub fn radius_at(&self, theta: f64) -> f64 {
        let [x, y] = self.point(theta);
        x.hypot(y)
    }

    fn second_moments(&self) -> [f64; 2] {
        match self {
            Curve::Circle { radius } => [radius * radius / 2.0; 2],
            Curve::Oval { semi_axes: [a, b] } => [a * a / 2.0, b * b / 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// Serializable description of a distribution over `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    StandardNormal { dim: usize },
    Gaussian { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    GaussianMixture { components: Vec<MixtureComponent> },
    ParametricCurve { curve: Curve, noise_sigma: f64 },
}

impl DistributionSpec {
    /// `N(mean, sigma^2 I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Self {
        let d = mean.len();
        let covariance = (0..d)
            .map(|i| (0..d).map(|j| if i == j { sigma * sigma } else { 0.0 }).collect())
            .collect();
        DistributionSpec::Gaussian { mean, covariance }
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Self {
        let d = mean.len();
        let covariance = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variances[i] } else { 0.0 }).collect())
            .collect();
        DistributionSpec::Gaussian { mean, covariance }
    }

    pub fn build(&self) -> Result<Distribution> {
        Distribution::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Gaussian {
    mean: Array1<f64>,
    covariance: Array2<f64>,
    chol: Array2<f64>,
    precision: Array2<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: &[f64], covariance: &[Vec<f64>], field: &str) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::config(field, "mean must have dimension >= 1"));
        }
        if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
            return Err(Error::config(field, format!("covariance must be {d}x{d}")));
        }
        if mean.iter().chain(covariance.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::config(field, "non-finite parameter"));
        }
        let cov = Array2::from_shape_fn((d, d), |(i, j)| covariance[i][j]);
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * (1.0 + cov[[i, j]].abs()) {
                    return Err(Error::config(field, "covariance is not symmetric"));
                }
            }
        }
        let chol = cholesky(&cov).ok_or_else(|| Error::config(field, "covariance is not SPD"))?;
        let precision = spd_inverse(&chol);
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[[i, i]].ln()).sum::<f64>();
        Ok(Self {
            mean: Array1::from(mean.to_vec()),
            covariance: cov,
            chol,
            precision,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.mean[i] + (0..=i).map(|j| self.chol[[i, j]] * z[j]).sum::<f64>();
        }
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let diff = &x - &self.mean;
        self.log_norm - 0.5 * diff.dot(&self.precision.dot(&diff))
    }

    fn score(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.precision.dot(&(&self.mean - &x))
    }
}

fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let mut l = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = a[[i, i]] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[[i, i]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// `(L L^T)^{-1}` by forward and back substitution on unit vectors.
fn spd_inverse(l: &Array2<f64>) -> Array2<f64> {
    let d = l.nrows();
    let mut inv = Array2::zeros((d, d));
    for c in 0..d {
        let mut y = vec![0.0; d];
        for i in 0..d {
            let rhs = if i == c { 1.0 } else { 0.0 };
            y[i] = (rhs - (0..i).map(|k| l[[i, k]] * y[k]).sum::<f64>()) / l[[i, i]];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            x[i] = (y[i] - (i + 1..d).map(|k| l[[k, i]] * x[k]).sum::<f64>()) / l[[i, i]];
        }
        for i in 0..d {
            inv[[i, c]] = x[i];
        }
    }
    inv
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Gaussian(Gaussian),
    Mixture {
        weights: Vec<f64>,
        components: Vec<Gaussian>,
    },
    Curve {
        curve: Curve,
        noise_sigma: f64,
    },
}

/// A validated distribution, ready for sampling and score evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    spec: DistributionSpec,
    dim: usize,
    kind: Kind,
}

impl Distribution {
    pub fn new(spec: DistributionSpec) -> Result<Self> {
        let (dim, kind) = match &spec {
            DistributionSpec::StandardNormal { dim } => {
                if *dim == 0 {
                    return Err(Error::config("distribution.dim", "must be >= 1"));
                }
                let s = DistributionSpec::isotropic(vec![0.0; *dim], 1.0);
                let DistributionSpec::Gaussian { mean, covariance } = s else {
                    unreachable!()
                };
                (*dim, Kind::Gaussian(Gaussian::new(&mean, &covariance, "distribution")?))
            }
            DistributionSpec::Gaussian { mean, covariance } => (
                mean.len(),
                Kind::Gaussian(Gaussian::new(mean, covariance, "distribution")?),
            ),
            DistributionSpec::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(Error::config("distribution.components", "must be non-empty"));
                }
                let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
                if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                    return Err(Error::config("distribution.components.weight", "weights must be > 0"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        "distribution.components.weight",
                        format!("weights sum to {total}, expected 1"),
                    ));
                }
                let gs = components
                    .iter()
                    .map(|c| Gaussian::new(&c.mean, &c.covariance, "distribution.components"))
                    .collect::<Result<Vec<_>>>()?;
                let d = gs[0].mean.len();
                if gs.iter().any(|g| g.mean.len() != d) {
                    return Err(Error::config(
                        "distribution.components",
                        "components differ in dimension",
                    ));
                }
                (
                    d,
                    Kind::Mixture {
                        weights,
                        components: gs,
                    },
                )
            }
            DistributionSpec::ParametricCurve { curve, noise_sigma } => {
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return Err(Error::config("distribution.noise_sigma", "must be >= 0"));
                }
                let ok = match curve {
                    Curve::Circle { radius } => *radius > 0.0 && radius.is_finite(),
                    Curve::Oval { semi_axes } => semi_axes.iter().all(|a| *a > 0.0 && a.is_finite()),
                };
                if !ok {
                    return Err(Error::config("distribution.curve", "lengths must be > 0"));
                }
                (
                    2,
                    Kind::Curve {
                        curve: curve.clone(),
                        noise_sigma: *noise_sigma,
                    },
                )
            }
        };
        Ok(Self { spec, dim, kind })
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of mixture components (1 for a single Gaussian, 0 for curves).
    pub fn num_components(&self) -> usize {
        match &self.kind {
            Kind::Gaussian(_) => 1,
            Kind::Mixture { components, .. } => components.len(),
            Kind::Curve { .. } => 0,
        }
    }

    /// I.i.d. draws. Mixture samples carry their component index as label.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> ParticleBatch {
        if count == 0 {
            return ParticleBatch::empty(self.dim);
        }
        let d = self.dim;
        let mut pos = Array2::zeros((count, d));
        let mut labels = None;
        match &self.kind {
            Kind::Gaussian(g) => {
                for mut row in pos.outer_iter_mut() {
                    g.sample_into(rng, row.as_slice_mut().expect("row-major"));
                }
            }
            Kind::Mixture { weights, components } => {
                let pick = WeightedIndex::new(weights).expect("weights validated");
                let mut l = Vec::with_capacity(count);
                for mut row in pos.outer_iter_mut() {
                    let k = pick.sample(rng);
                    components[k].sample_into(rng, row.as_slice_mut().expect("row-major"));
                    l.push(k);
                }
                labels = Some(l);
            }
            Kind::Curve { curve, noise_sigma } => {
                for mut row in pos.outer_iter_mut() {
                    let theta = rng.random::<f64>() * TAU;
                    let [x, y] = curve.point(theta);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    row[0] = x + noise_sigma * nx;
                    row[1] = y + noise_sigma * ny;
                }
            }
        }
        let batch = ParticleBatch::uniform(pos).expect("finite samples");
        match labels {
            Some(l) => batch.with_labels(l).expect("label length"),
            None => batch,
        }
    }

    /// Draws from a single mixture component (class-conditional sampling).
    pub fn sample_component(&self, component: usize, count: usize, rng: &mut Rng) -> Result<ParticleBatch> {
        let g = self.component(component)?;
        let mut pos = Array2::zeros((count, self.dim));
        for mut row in pos.outer_iter_mut() {
            g.sample_into(rng, row.as_slice_mut().expect("row-major"));
        }
        if count == 0 {
            return Ok(ParticleBatch::empty(self.dim));
        }
        ParticleBatch::uniform(pos)?.with_labels(vec![component; count])
    }

    fn component(&self, k: usize) -> Result<&Gaussian> {
        match &self.kind {
            Kind::Gaussian(g) if k == 0 => Ok(g),
            Kind::Mixture { components, .. } if k < components.len() => Ok(&components[k]),
            _ => Err(Error::InvalidInput(format!(
                "component {k} out of range ({} components)",
                self.num_components()
            ))),
        }
    }

    /// `grad log p(x)`.
    pub fn score(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_point(x)?;
        match &self.kind {
            Kind::Gaussian(g) => Ok(g.score(x)),
            Kind::Mixture { weights, components } => {
                let resp = responsibilities(weights, components, x);
                let mut s = Array1::zeros(self.dim);
                for (r, g) in resp.iter().zip(components) {
                    if *r > 0.0 {
                        s.scaled_add(*r, &g.score(x));
                    }
                }
                Ok(s)
            }
            Kind::Curve { .. } => Err(Error::UnsupportedScore("parametric curve".into())),
        }
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_point(x)?;
        match &self.kind {
            Kind::Gaussian(g) => Ok(g.log_density(x)),
            Kind::Mixture { weights, components } => {
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(components)
                    .map(|(w, g)| w.ln() + g.log_density(x))
                    .collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
            }
            Kind::Curve { .. } => Err(Error::UnsupportedScore("parametric curve".into())),
        }
    }

    fn check_point(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "point of dimension {} for a d={} distribution",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Gaussian(g) => g.mean.to_vec(),
            Kind::Mixture { weights, components } => {
                let mut m = Array1::zeros(self.dim);
                for (w, g) in weights.iter().zip(components) {
                    m.scaled_add(*w, &g.mean);
                }
                m.to_vec()
            }
            Kind::Curve { .. } => vec![0.0; 2],
        }
    }

    pub fn covariance(&self) -> Array2<f64> {
        match &self.kind {
            Kind::Gaussian(g) => g.covariance.clone(),
            Kind::Mixture { weights, components } => {
                let m = Array1::from(self.mean());
                let mut c = Array2::zeros((self.dim, self.dim));
                for (w, g) in weights.iter().zip(components) {
                    let dm = &g.mean - &m;
                    let outer = Array2::from_shape_fn((self.dim, self.dim), |(i, j)| dm[i] * dm[j]);
                    c.scaled_add(*w, &(&g.covariance + &outer));
                }
                c
            }
            Kind::Curve { curve, noise_sigma } => {
                let [sx, sy] = curve.second_moments();
                let n2 = noise_sigma * noise_sigma;
                Array2::from_shape_vec((2, 2), vec![sx + n2, 0.0, 0.0, sy + n2]).expect("2x2")
            }
        }
    }

    /// Component centres with their spread `sqrt(max_i Sigma_ii)`.
    pub fn modes(&self) -> Vec<(Vec<f64>, f64)> {
        let describe = |g: &Gaussian| {
            let s = g.covariance.diag().iter().copied().fold(0.0, f64::max).sqrt();
            (g.mean.to_vec(), s)
        };
        match &self.kind {
            Kind::Gaussian(g) => vec![describe(g)],
            Kind::Mixture { components, .. } => components.iter().map(describe).collect(),
            Kind::Curve { .. } => Vec::new(),
        }
    }

    pub fn component_weights(&self) -> Vec<f64> {
        match &self.kind {
            Kind::Gaussian(_) => vec![1.0],
            Kind::Mixture { weights, .. } => weights.clone(),
            Kind::Curve { .. } => Vec::new(),
        }
    }

    pub fn curve(&self) -> Option<&Curve> {
        match &self.kind {
            Kind::Curve { curve, .. } => Some(curve),
            _ => None,
        }
    }
}

fn responsibilities(weights: &[f64], components: &[Gaussian], x: ArrayView1<f64>) -> Vec<f64> {
    let logs: Vec<f64> = weights
        .iter()
        .zip(components)
        .map(|(w, g)| w.ln() + g.log_density(x))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub name: String,
    pub description: String,
    pub distribution: DistributionSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    version: u32,
    entry: Vec<CatalogEntry>,
}

/// Version of the bundled catalog file.
pub fn catalog_version() -> u32 {
    CATALOG_VERSION
}

/// The named toy distributions, in catalog order.
pub fn standard_toy_suite() -> Vec<CatalogEntry> {
    let file: CatalogFile = toml::from_str(CATALOG_SOURCE).expect("bundled catalog parses");
    assert_eq!(file.version, CATALOG_VERSION, "bundled catalog version");
    file.entry
}

pub fn catalog_entry(name: &str) -> Result<DistributionSpec> {
    standard_toy_suite()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| e.distribution)
        .ok_or_else(|| Error::Catalog(format!("no entry named `{name}`")))
}
