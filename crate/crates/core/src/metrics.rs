//! Evaluation oracles, kept independent of the Sinkhorn solver.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::batch::ParticleBatch;
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::generator::{Conditioning, GeneratorParams};
use crate::ot::{sinkhorn_divergence, SinkhornSpec};
use crate::rng::stream;

/// Optimal assignment for a square cost matrix (Hungarian method with
/// potentials, `O(n^3)`). Returns `assignment[row] = column` and the total cost.
pub fn min_cost_assignment(cost: ArrayView2<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::UnsupportedInstance(format!(
            "assignment needs a square cost, got {}x{}",
            n,
            cost.ncols()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("non-finite assignment cost".into()));
    }
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((assignment, total))
}

fn squared_distances(q: &ParticleBatch, p: &ParticleBatch) -> Array2<f64> {
    let (x, y) = (q.positions(), p.positions());
    Array2::from_shape_fn((q.len(), p.len()), |(i, j)| {
        x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

/// Exact `W2` between two equal-size, uniformly weighted batches.
pub fn exact_w2(q: &ParticleBatch, p: &ParticleBatch) -> Result<f64> {
    if q.len() != p.len() || q.is_empty() {
        return Err(Error::UnsupportedInstance(format!(
            "exact W2 needs N = M >= 1, got {} and {}",
            q.len(),
            p.len()
        )));
    }
    if !q.is_uniform() || !p.is_uniform() {
        return Err(Error::UnsupportedInstance("exact W2 needs uniform weights".into()));
    }
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!("d={} vs d={}", q.dim(), p.dim())));
    }
    let (_, total) = min_cost_assignment(squared_distances(q, p).view())?;
    Ok((total / q.len() as f64).max(0.0).sqrt())
}

/// Exact `W2` between a 1D empirical measure with uniform weights and
/// `N(mean, std^2)`, by integrating the quantile functions bin by bin.
pub fn w2_to_normal_1d(samples: &[f64], mean: f64, std: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidInput(format!("std must be > 0, got {std}")));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let normal = Normal::standard();
    let phi = |z: f64| {
        if z.is_finite() {
            (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
        } else {
            0.0
        }
    };
    let quantile = |u: f64| {
        if u <= 0.0 {
            f64::NEG_INFINITY
        } else if u >= 1.0 {
            f64::INFINITY
        } else {
            normal.inverse_cdf(u)
        }
    };
    // Per bin [a, b]: int z du = phi(z_a) - phi(z_b); int z^2 du = (b - a) + z_a phi(z_a) - z_b phi(z_b).
    let zphi = |z: f64| if z.is_finite() { z * phi(z) } else { 0.0 };
    let mut total = 0.0;
    let mut z_lo = f64::NEG_INFINITY;
    for (i, x) in xs.iter().enumerate() {
        let b = (i + 1) as f64 / n;
        let z_hi = quantile(b);
        let c = x - mean;
        let first = phi(z_lo) - phi(z_hi);
        let second = 1.0 / n + zphi(z_lo) - zphi(z_hi);
        total += c * c / n - 2.0 * c * std * first + std * std * second;
        z_lo = z_hi;
    }
    Ok(total.max(0.0).sqrt())
}

fn gaussian_kernel_sum(x: &ParticleBatch, y: &ParticleBatch, sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (px, py) = (x.positions(), y.positions());
    let mut total = 0.0;
    for (xi, wi) in px.outer_iter().zip(x.weights()) {
        let mut row = 0.0;
        for (yj, wj) in py.outer_iter().zip(y.weights()) {
            let d2: f64 = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            row += wj * (-d2 * inv).exp();
        }
        total += wi * row;
    }
    total
}

/// Weighted V-statistic of `MMD^2` under the Gaussian kernel of bandwidth `sigma`.
pub fn mmd_squared(q: &ParticleBatch, p: &ParticleBatch, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be > 0, got {sigma}")));
    }
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(format!("d={} vs d={}", q.dim(), p.dim())));
    }
    let qq = gaussian_kernel_sum(q, q, sigma);
    let pp = gaussian_kernel_sum(p, p, sigma);
    let qp = gaussian_kernel_sum(q, p, sigma);
    Ok(qq + pp - 2.0 * qp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mode {
    pub center: Vec<f64>,
    pub radius: f64,
    pub minority: bool,
}

/// Modes of a mixture with radius `radius_sigmas * sigma`; components under
/// half the heaviest weight are flagged as minority.
pub fn modes_of(dist: &Distribution, radius_sigmas: f64) -> Vec<Mode> {
    let weights = dist.component_weights();
    let heaviest = weights.iter().copied().fold(0.0, f64::max);
    dist.modes()
        .into_iter()
        .zip(weights)
        .map(|((center, sigma), w)| Mode {
            center,
            radius: radius_sigmas * sigma,
            minority: w < 0.5 * heaviest,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub counts: Vec<usize>,
    pub radii: Vec<f64>,
    pub covered: Vec<bool>,
    pub total: usize,
    /// Share of all samples that landed in minority modes.
    pub minority_mass_fraction: f64,
}

impl CoverageReport {
    pub fn all_covered(&self) -> bool {
        self.covered.iter().all(|&c| c)
    }

    pub fn fraction(&self, mode: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[mode] as f64 / self.total as f64
        }
    }
}

/// Each sample counts toward its nearest mode when inside that mode's radius.
pub fn mode_coverage(samples: &ParticleBatch, modes: &[Mode], min_fraction: f64) -> Result<CoverageReport> {
    if let Some(m) = modes.iter().find(|m| !(m.radius > 0.0)) {
        return Err(Error::InvalidInput(format!("mode radius {} must be > 0", m.radius)));
    }
    if let Some(m) = modes.iter().find(|m| m.center.len() != samples.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "mode centre of dimension {} for d={} samples",
            m.center.len(),
            samples.dim()
        )));
    }
    let mut counts = vec![0usize; modes.len()];
    for x in samples.positions().outer_iter() {
        let nearest = modes
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let d2: f64 = x.iter().zip(&m.center).map(|(a, b)| (a - b) * (a - b)).sum();
                (k, d2.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, d)) = nearest {
            if d <= modes[k].radius {
                counts[k] += 1;
            }
        }
    }
    let total = samples.len();
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let covered = counts.iter().map(|&c| c > 0 && frac(c) >= min_fraction).collect();
    let minority: usize = counts
        .iter()
        .zip(modes)
        .filter(|(_, m)| m.minority)
        .map(|(c, _)| *c)
        .sum();
    Ok(CoverageReport {
        radii: modes.iter().map(|m| m.radius).collect(),
        covered,
        total,
        minority_mass_fraction: frac(minority),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentErrors {
    /// `|mean_hat - mean|_2`
    pub mean_error: f64,
    /// `|Sigma_hat - Sigma|_F / |Sigma|_F`
    pub covariance_error: f64,
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn moment_errors(samples: &ParticleBatch, reference: &Distribution) -> Result<MomentErrors> {
    if samples.dim() != reference.dim() {
        return Err(Error::DimensionMismatch(format!(
            "samples d={} vs reference d={}",
            samples.dim(),
            reference.dim()
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mean_error = samples
        .mean()
        .iter()
        .zip(reference.mean())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let sigma = reference.covariance();
    let covariance_error = frobenius(&(&samples.covariance() - &sigma)) / frobenius(&sigma);
    Ok(MomentErrors {
        mean_error,
        covariance_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportDistances {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-row displacement `|generated_i - source_i|`.
pub fn transport_distance_histogram(source: &ParticleBatch, generated: &ParticleBatch) -> Result<TransportDistances> {
    if source.positions().dim() != generated.positions().dim() {
        return Err(Error::DimensionMismatch(format!(
            "source {:?} vs generated {:?}",
            source.positions().dim(),
            generated.positions().dim()
        )));
    }
    let distances: Vec<f64> = source
        .positions()
        .outer_iter()
        .zip(generated.positions().outer_iter())
        .map(|(z, x)| z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = if distances.is_empty() {
        f64::NAN
    } else {
        distances.iter().sum::<f64>() / distances.len() as f64
    };
    Ok(TransportDistances {
        mean,
        p10: quantile_sorted(&sorted, 0.1),
        median: quantile_sorted(&sorted, 0.5),
        p90: quantile_sorted(&sorted, 0.9),
        max: sorted.last().copied().unwrap_or(f64::NAN),
        distances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: (usize, usize),
}

/// Fixed inputs at which every grid parameter point is scored.
#[derive(Debug, Clone)]
pub struct LandscapeEval {
    pub inputs: Array2<f64>,
    pub target: ParticleBatch,
    pub sinkhorn: SinkhornSpec,
}

/// Plane through the flattened checkpoint trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePlane {
    checkpoints: Vec<Vec<f64>>,
    displacements: Vec<Vec<f64>>,
    transverse: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SlicePlane {
    pub fn new(checkpoints: &[GeneratorParams], transverse_seed: u64) -> Result<Self> {
        if checkpoints.len() < 2 {
            return Err(Error::DegenerateTrajectory(format!(
                "need at least 2 checkpoints, got {}",
                checkpoints.len()
            )));
        }
        let flat: Vec<Vec<f64>> = checkpoints.iter().map(GeneratorParams::to_flat).collect();
        let n = flat[0].len();
        if flat.iter().any(|f| f.len() != n) {
            return Err(Error::DimensionMismatch("checkpoints differ in architecture".into()));
        }
        let displacements: Vec<Vec<f64>> = flat
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
            .collect();
        if displacements.iter().all(|d| d.iter().all(|&x| x == 0.0)) {
            return Err(Error::DegenerateTrajectory(
                "all checkpoint displacements are zero".into(),
            ));
        }

        // Orthonormal basis of span{d_k}, then v orthogonal to it.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for d in &displacements {
            let norm0 = dot(d, d).sqrt();
            let mut e = d.clone();
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&e, b);
                    e.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-10 * norm0.max(f64::MIN_POSITIVE) {
                e.iter_mut().for_each(|x| *x /= norm);
                basis.push(e);
            }
        }
        let mut rng = stream(transverse_seed, "landscape/transverse");
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > 0.0) {
            return Err(Error::DegenerateTrajectory(
                "checkpoint displacements span every direction".into(),
            ));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self {
            checkpoints: flat,
            displacements,
            transverse: v,
        })
    }

    pub fn transverse(&self) -> &[f64] {
        &self.transverse
    }

    pub fn displacements(&self) -> &[Vec<f64>] {
        &self.displacements
    }

    /// Index of the last checkpoint, `K`.
    pub fn last_index(&self) -> usize {
        self.displacements.len()
    }

    /// Flattened parameters at plane coordinate `(x, y)`.
    pub fn point(&self, x: f64, y: f64) -> Vec<f64> {
        let k_max = self.last_index();
        let (base, dir, offset) = if x < 0.0 {
            (0, 0, x)
        } else if x >= k_max as f64 {
            (k_max, k_max - 1, x - k_max as f64)
        } else {
            let k = x.floor() as usize;
            (k, k, x - k as f64)
        };
        let theta = &self.checkpoints[base];
        let d = &self.displacements[dir];
        if offset == 0.0 && y == 0.0 {
            return theta.clone();
        }
        theta
            .iter()
            .zip(d)
            .zip(&self.transverse)
            .map(|((t, d), v)| t + offset * d + y * v)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeSlice {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `energy[[iy, ix]]` at `(xs[ix], ys[iy])`.
    pub energy: Array2<f64>,
    /// `(k, 0)` for each checkpoint.
    pub trajectory: Vec<(f64, f64)>,
    pub trajectory_energy: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn energy_at(template: &GeneratorParams, flat: &[f64], eval: &LandscapeEval) -> Result<f64> {
    let params = template.with_flat(flat)?;
    let generated = params.forward(eval.inputs.view(), &Conditioning::none())?;
    let q = match ParticleBatch::uniform(generated) {
        Ok(q) => q,
        Err(_) => return Ok(f64::NAN),
    };
    match sinkhorn_divergence(&q, &eval.target, &eval.sinkhorn) {
        Ok(s) => Ok(s),
        Err(e) if e.is_numerical() => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Sinkhorn-divergence energy over the plane spanned by the training path
/// and one random transverse direction.
pub fn landscape_slice(
    checkpoints: &[GeneratorParams],
    transverse_seed: u64,
    grid: &LandscapeGrid,
    eval: &LandscapeEval,
) -> Result<LandscapeSlice> {
    let (nx, ny) = grid.resolution;
    if nx == 0 || ny == 0 {
        return Err(Error::config("landscape.resolution", "must be >= 1 in each axis"));
    }
    let plane = SlicePlane::new(checkpoints, transverse_seed)?;
    let template = &checkpoints[0];
    let xs = linspace(grid.x_range.0, grid.x_range.1, nx);
    let ys = linspace(grid.y_range.0, grid.y_range.1, ny);
    let cells: Vec<f64> = (0..nx * ny)
        .into_par_iter()
        .map(|c| energy_at(template, &plane.point(xs[c % nx], ys[c / nx]), eval))
        .collect::<Result<_>>()?;
    let energy = Array2::from_shape_vec((ny, nx), cells).expect("ny * nx cells");
    let trajectory: Vec<(f64, f64)> = (0..checkpoints.len()).map(|k| (k as f64, 0.0)).collect();
    let trajectory_energy = trajectory
        .iter()
        .map(|&(x, y)| energy_at(template, &plane.point(x, y), eval))
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeSlice {
        xs,
        ys,
        energy,
        trajectory,
        trajectory_energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{catalog_entry, DistributionSpec};
    use crate::rng::stream;
    use ndarray::array;
    use proptest::prelude::*;

    fn batch(rows: &[&[f64]]) -> ParticleBatch {
        ParticleBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_w2(q: &ParticleBatch, p: &ParticleBatch) -> f64 {
        let c = squared_distances(q, p);
        permutations(q.len())
            .into_iter()
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / q.len() as f64
    }

    #[test]
    fn exact_w2_examples() {
        let q = batch(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(exact_w2(&q, &q).unwrap(), 0.0);
        let p = batch(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(exact_w2(&q, &p).unwrap(), 0.0);
        let a = batch(&[&[0.0, 0.0]]);
        let b = batch(&[&[3.0, 4.0]]);
        assert!((exact_w2(&a, &b).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn exact_w2_rejects_unsupported_instances() {
        let a = batch(&[&[0.0], &[1.0]]);
        let b = batch(&[&[0.0]]);
        assert!(matches!(exact_w2(&a, &b), Err(Error::UnsupportedInstance(_))));
        let w = ParticleBatch::with_weights(array![[0.0], [1.0]], vec![0.25, 0.75]).unwrap();
        assert!(matches!(exact_w2(&w, &a), Err(Error::UnsupportedInstance(_))));
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let d = DistributionSpec::StandardNormal { dim: 2 }.build().unwrap();
        let mut rng = stream(0, "hungarian");
        for n in 1..=6 {
            for _ in 0..20 {
                let q = d.sample(n, &mut rng);
                let p = d.sample(n, &mut rng);
                let got = exact_w2(&q, &p).unwrap().powi(2);
                let want = brute_force_w2(&q, &p);
                assert!((got - want).abs() <= 1e-12 * (1.0 + want), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn hungarian_handles_ties_and_rectangular_rejection() {
        let (a, c) = min_cost_assignment(Array2::zeros((4, 4)).view()).unwrap();
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(c, 0.0);
        assert!(min_cost_assignment(Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn w2_is_a_metric_on_random_triples() {
        let d = DistributionSpec::StandardNormal { dim: 2 }.build().unwrap();
        let mut rng = stream(1, "w2-metric");
        for _ in 0..100 {
            let a = d.sample(8, &mut rng);
            let b = d.sample(8, &mut rng);
            let c = d.sample(8, &mut rng);
            let ab = exact_w2(&a, &b).unwrap();
            let ba = exact_w2(&b, &a).unwrap();
            let bc = exact_w2(&b, &c).unwrap();
            let ac = exact_w2(&a, &c).unwrap();
            assert!((ab - ba).abs() <= 1e-12);
            assert!(ac <= ab + bc + 1e-9);
            assert!(ab > 0.0);
        }
    }

    #[test]
    fn w2_lower_bounds_random_permutations() {
        use rand::seq::SliceRandom;
        let d = DistributionSpec::StandardNormal { dim: 2 }.build().unwrap();
        let mut rng = stream(2, "w2-perm");
        let q = d.sample(32, &mut rng);
        let p = d.sample(32, &mut rng);
        let best = exact_w2(&q, &p).unwrap().powi(2) * 32.0;
        let c = squared_distances(&q, &p);
        let mut perm: Vec<usize> = (0..32).collect();
        for _ in 0..20 {
            perm.shuffle(&mut rng);
            let v: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
            assert!(v >= best - 1e-9);
        }
    }

    #[test]
    fn zero_iff_identical_multisets() {
        let q = batch(&[&[0.0], &[1.0], &[1.0]]);
        let p = batch(&[&[1.0], &[0.0], &[1.0]]);
        let r = batch(&[&[1.0], &[0.0], &[0.0]]);
        assert_eq!(exact_w2(&q, &p).unwrap(), 0.0);
        assert!(exact_w2(&q, &r).unwrap() > 0.0);
    }

    #[test]
    fn w2_to_normal_matches_quadrature() {
        // Oracle: midpoint quadrature over u of (F_emp^-1(u) - F^-1(u))^2
        let xs = [-1.3, 0.2, 0.4, 2.5, 3.1];
        let (mu, sd) = (0.5, 1.5);
        let normal = Normal::new(mu, sd).unwrap();
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let steps = 2_000_000;
        let mut acc = 0.0;
        for k in 0..steps {
            let u = (k as f64 + 0.5) / steps as f64;
            let x = sorted[((u * 5.0) as usize).min(4)];
            let y = normal.inverse_cdf(u);
            acc += (x - y) * (x - y);
        }
        let want = (acc / steps as f64).sqrt();
        let got = w2_to_normal_1d(&xs, mu, sd).unwrap();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn w2_to_normal_single_sample_at_mean() {
        // One atom at the mean: W2^2 = Var = std^2
        let got = w2_to_normal_1d(&[2.0], 2.0, 3.0).unwrap();
        assert!((got - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_examples() {
        let q = batch(&[&[0.0, 0.0], &[1.0, 2.0]]);
        assert!(mmd_squared(&q, &q, 1.0).unwrap().abs() < 1e-15);
        let x = batch(&[&[0.0, 0.0]]);
        let y = batch(&[&[1.0, 1.0]]);
        let want = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((mmd_squared(&x, &y, 1.0).unwrap() - want).abs() < 1e-14);
        assert!((want - 1.26424).abs() < 1e-5);
        let p = batch(&[&[0.5, 0.1], &[3.0, 0.0], &[-1.0, 1.0]]);
        let a = mmd_squared(&q, &p, 0.7).unwrap();
        let b = mmd_squared(&p, &q, 0.7).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mmd_is_nonnegative(
            xs in proptest::collection::vec(-3.0f64..3.0, 2..12),
            ys in proptest::collection::vec(-3.0f64..3.0, 2..12),
            sigma in 0.1f64..3.0,
        ) {
            let q = ParticleBatch::from_rows(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
            let p = ParticleBatch::from_rows(&ys.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap();
            prop_assert!(mmd_squared(&q, &p, sigma).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn coverage_examples() {
        let modes = vec![
            Mode {
                center: vec![0.0, 0.0],
                radius: 1.0,
                minority: false,
            },
            Mode {
                center: vec![5.0, 0.0],
                radius: 1.0,
                minority: true,
            },
        ];
        let at_one = ParticleBatch::uniform(Array2::zeros((10, 2))).unwrap();
        let r = mode_coverage(&at_one, &modes, 0.01).unwrap();
        assert_eq!(r.covered, vec![true, false]);
        assert_eq!(r.minority_mass_fraction, 0.0);

        let empty = ParticleBatch::empty(2);
        let r = mode_coverage(&empty, &modes, 0.01).unwrap();
        assert_eq!(r.covered, vec![false, false]);
        assert_eq!(r.counts.iter().sum::<usize>(), 0);
    }

    #[test]
    fn ground_truth_covers_all_imbalanced_modes() {
        let d = catalog_entry("imbalanced-6+2").unwrap().build().unwrap();
        let s = d.sample(10_000, &mut stream(3, "coverage"));
        let r = mode_coverage(&s, &modes_of(&d, 3.0), 0.01).unwrap();
        assert!(r.all_covered(), "{r:?}");
        assert!(r.counts.iter().sum::<usize>() <= r.total);
        assert!((0.08..=0.12).contains(&r.minority_mass_fraction));
        assert_eq!(modes_of(&d, 3.0).iter().filter(|m| m.minority).count(), 2);
    }

    #[test]
    fn moment_error_examples() {
        let d = DistributionSpec::diagonal(vec![1.0, -1.0], &[1.0, 4.0])
            .build()
            .unwrap();
        let s = d.sample(100_000, &mut stream(4, "moments"));
        assert!(moment_errors(&s, &d).unwrap().covariance_error <= 0.02);

        let at_mean = ParticleBatch::uniform(Array2::from_shape_fn((5, 2), |(_, j)| [1.0, -1.0][j])).unwrap();
        let e = moment_errors(&at_mean, &d).unwrap();
        assert_eq!(e.covariance_error, 1.0);
        assert_eq!(e.mean_error, 0.0);

        let scaled = s.with_positions(s.positions().mapv(|v| 2.0 * v)).unwrap();
        let c1 = s.covariance();
        let c2 = scaled.covariance();
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn transport_distance_examples() {
        let z = batch(&[&[0.0, 0.0], &[1.0, 1.0], &[-2.0, 0.5]]);
        let r = transport_distance_histogram(&z, &z).unwrap();
        assert!(r.distances.iter().all(|&d| d == 0.0));
        let shifted = z.with_positions(z.positions().mapv(|v| v) + &array![3.0, 4.0]).unwrap();
        let r = transport_distance_histogram(&z, &shifted).unwrap();
        assert!(r.distances.iter().all(|&d| (d - 5.0).abs() < 1e-12));
        assert!((r.mean - 5.0).abs() < 1e-12);
        let other = batch(&[&[0.0]]);
        assert!(transport_distance_histogram(&z, &other).is_err());
    }
}
