//! Entropic optimal transport between weighted particle clouds.
//!
//! Sinkhorn-Knopp runs a fixed number of alternating scaling updates
//! (`u` first, then `v`, with `v` starting at all-ones). The kernel-domain path
//! is the plain matrix-scaling loop; the log-domain path runs the same
//! iteration on log-scalings with log-sum-exp reductions and is the one to use
//! when `exp(-C/eps)` would underflow.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::batch::{compensated_sum, ParticleBatch};
use crate::error::{Axis, Error, Result};

/// Denominator floor in kernel-domain scaling updates.
pub const DIVISION_FLOOR: f64 = 1e-300;
/// Plan entries below this are treated as exact zeros in the entropy term.
pub const ENTROPY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    /// `c(x, y) = |x - y|^2 / 2`
    #[default]
    HalfSquaredEuclidean,
    /// `c(x, y) = |x - y|`
    Euclidean,
}

impl CostKind {
    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            CostKind::HalfSquaredEuclidean => 0.5 * sq,
            CostKind::Euclidean => sq.sqrt(),
        }
    }
}

/// Dense `N x M` cost matrix. `+inf` entries mark forbidden pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    kind: CostKind,
}

impl CostMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Wraps an arbitrary nonnegative matrix.
    pub fn from_values(values: Array2<f64>, kind: CostKind) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("cost entry {v} is not >= 0")));
        }
        Ok(Self { values, kind })
    }

    /// Sets `C_ii = +inf`, so the Gibbs kernel vanishes exactly on the diagonal.
    pub fn with_masked_diagonal(mut self) -> Result<Self> {
        let (n, m) = self.shape();
        if n != m {
            return Err(Error::DimensionMismatch(format!(
                "diagonal mask needs a square cost, got {n}x{m}"
            )));
        }
        for i in 0..n {
            self.values[[i, i]] = f64::INFINITY;
        }
        Ok(self)
    }

    /// Sets `C_ii = +inf` for `i < min(N, M)`: the source batch is the leading
    /// block of the target batch.
    pub(crate) fn with_masked_leading_diagonal(mut self) -> Self {
        let (n, m) = self.shape();
        for i in 0..n.min(m) {
            self.values[[i, i]] = f64::INFINITY;
        }
        self
    }

    fn mean_finite(&self) -> f64 {
        let (sum, count) = self
            .values
            .iter()
            .filter(|v| v.is_finite())
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornSpec {
    pub epsilon: f64,
    pub iterations: usize,
    pub cost_kind: CostKind,
    pub log_domain: bool,
    /// Divide the cost by its mean before scaling (equivalently scale epsilon).
    pub cost_normalization: bool,
    /// Optional early stop on the row-marginal error. Off by default.
    pub marginal_tolerance: Option<f64>,
}

impl Default for SinkhornSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iterations: 100,
            cost_kind: CostKind::HalfSquaredEuclidean,
            log_domain: false,
            cost_normalization: false,
            marginal_tolerance: None,
        }
    }
}

impl SinkhornSpec {
    pub fn new(epsilon: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            iterations,
            ..Self::default()
        }
    }

    pub fn log_domain(mut self) -> Self {
        self.log_domain = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(
                "sinkhorn.epsilon",
                format!("must be > 0, got {}", self.epsilon),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("sinkhorn.iterations", "must be >= 1"));
        }
        if let Some(tol) = self.marginal_tolerance {
            if !(tol > 0.0) {
                return Err(Error::config("sinkhorn.marginal_tolerance", "must be > 0 when set"));
            }
        }
        Ok(())
    }
}

/// Dual scaling factors of a Sinkhorn coupling.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalings {
    Kernel {
        u: Vec<f64>,
        v: Vec<f64>,
    },
    /// `log u`, `log v`: used by the log-domain solver where `u, v` can overflow.
    Log {
        log_u: Vec<f64>,
        log_v: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub plan: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub scalings: Scalings,
    /// Effective regularisation (after optional cost normalisation).
    pub epsilon: f64,
    pub iterations_run: usize,
}

impl Coupling {
    pub fn scalings_u(&self) -> Vec<f64> {
        match &self.scalings {
            Scalings::Kernel { u, .. } => u.clone(),
            Scalings::Log { log_u, .. } => log_u.iter().map(|x| x.exp()).collect(),
        }
    }

    pub fn scalings_v(&self) -> Vec<f64> {
        match &self.scalings {
            Scalings::Kernel { v, .. } => v.clone(),
            Scalings::Log { log_v, .. } => log_v.iter().map(|x| x.exp()).collect(),
        }
    }

    /// Max absolute deviation of plan row sums and column sums from the marginals.
    pub fn marginal_violation(&self) -> (f64, f64) {
        let rows = self
            .plan
            .outer_iter()
            .zip(&self.row_marginal)
            .map(|(r, a)| (r.sum() - a).abs())
            .fold(0.0, f64::max);
        let cols = self
            .plan
            .columns()
            .into_iter()
            .zip(&self.col_marginal)
            .map(|(c, b)| (c.sum() - b).abs())
            .fold(0.0, f64::max);
        (rows, cols)
    }
}

/// Pairwise cost between source and target particles.
pub fn build_cost_matrix(source: &ParticleBatch, target: &ParticleBatch, kind: CostKind) -> Result<CostMatrix> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "source d={} vs target d={}",
            source.dim(),
            target.dim()
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("cost matrix needs N, M >= 1".into()));
    }
    Ok(CostMatrix {
        values: pairwise_cost(source.positions(), target.positions(), kind),
        kind,
    })
}

pub(crate) fn pairwise_cost(x: ArrayView2<f64>, y: ArrayView2<f64>, kind: CostKind) -> Array2<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    let mut c = Array2::zeros((n, m));
    for i in 0..n {
        let xi = x.row(i);
        let xi = xi.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| xi.to_vec());
        for j in 0..m {
            let yj = y.row(j);
            c[[i, j]] = match yj.as_slice() {
                Some(s) => kind.eval(&xi, s),
                None => kind.eval(&xi, &yj.to_vec()),
            };
        }
    }
    c
}

fn check_simplex(w: &[f64], name: &str) -> Result<()> {
    if w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "marginal {name} must be strictly positive"
        )));
    }
    let total = compensated_sum(w);
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("marginal {name} sums to {total}")));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s: f64 = values.map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Sinkhorn-Knopp matrix scaling of `exp(-C/eps)` onto marginals `a`, `b`.
pub fn sinkhorn_scaling(cost: &CostMatrix, a: &[f64], b: &[f64], spec: &SinkhornSpec) -> Result<Coupling> {
    spec.validate()?;
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "cost {n}x{m} with marginals of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_simplex(a, "a")?;
    check_simplex(b, "b")?;

    let mut epsilon = spec.epsilon;
    if spec.cost_normalization {
        let mean = cost.mean_finite();
        if mean > 0.0 {
            epsilon *= mean;
        }
    }
    if spec.log_domain {
        sinkhorn_log(cost, a, b, epsilon, spec)
    } else {
        sinkhorn_kernel(cost, a, b, epsilon, spec)
    }
}

fn raw_row_major(values: Array2<f64>) -> Vec<f64> {
    values.as_standard_layout().into_owned().into_raw_vec_and_offset().0
}

fn degenerate_line(kernel: &[f64], n: usize, m: usize, is_zero: impl Fn(f64) -> bool) -> Result<()> {
    for i in 0..n {
        if kernel[i * m..(i + 1) * m].iter().all(|&k| is_zero(k)) {
            return Err(Error::DegenerateKernel {
                axis: Axis::Row,
                index: i,
            });
        }
    }
    for j in 0..m {
        if (0..n).all(|i| is_zero(kernel[i * m + j])) {
            return Err(Error::DegenerateKernel {
                axis: Axis::Column,
                index: j,
            });
        }
    }
    Ok(())
}

/// One Sinkhorn update `u = a / (K v)`, then `v = b / (K^T u)`, on a dense
/// row-major kernel with `m` columns.
fn scaling_step(
    kernel: &[f64],
    m: usize,
    a: &[f64],
    b: &[f64],
    u: &mut [f64],
    v: &mut [f64],
    ktu: &mut [f64],
) -> Result<()> {
    // K^T u is accumulated in the same pass over row i that produces u_i
    ktu.iter_mut().for_each(|x| *x = 0.0);
    for (i, ui) in u.iter_mut().enumerate() {
        let row = &kernel[i * m..(i + 1) * m];
        let s = dot(row, v);
        if !(s >= DIVISION_FLOOR) {
            return Err(Error::DegenerateKernel {
                axis: Axis::Row,
                index: i,
            });
        }
        *ui = a[i] / s;
        axpy(*ui, row, ktu);
    }
    for j in 0..m {
        if !(ktu[j] >= DIVISION_FLOOR) {
            return Err(Error::DegenerateKernel {
                axis: Axis::Column,
                index: j,
            });
        }
        v[j] = b[j] / ktu[j];
    }
    Ok(())
}

fn row_marginal_error(kernel: &[f64], m: usize, a: &[f64], u: &[f64], v: &[f64]) -> f64 {
    (0..a.len())
        .map(|i| (u[i] * dot(&kernel[i * m..(i + 1) * m], v) - a[i]).abs())
        .fold(0.0, f64::max)
}

fn scaled_plan(kernel: &[f64], n: usize, m: usize, u: &[f64], v: &[f64]) -> Array2<f64> {
    let mut plan = Array2::zeros((n, m));
    for (i, mut pr) in plan.rows_mut().into_iter().enumerate() {
        let k = &kernel[i * m..(i + 1) * m];
        for j in 0..m {
            pr[j] = u[i] * k[j] * v[j];
        }
    }
    plan
}

fn sinkhorn_kernel(cost: &CostMatrix, a: &[f64], b: &[f64], epsilon: f64, spec: &SinkhornSpec) -> Result<Coupling> {
    let (n, m) = cost.shape();
    let kernel = raw_row_major(cost.values.mapv(|c| (-c / epsilon).exp()));
    degenerate_line(&kernel, n, m, |k| k == 0.0)?;

    let mut u = vec![0.0; n];
    let mut v = vec![1.0; m];
    let mut ktu = vec![0.0; m];
    let mut iterations_run = 0;
    for it in 0..spec.iterations {
        scaling_step(&kernel, m, a, b, &mut u, &mut v, &mut ktu)?;
        iterations_run = it + 1;
        if let Some(tol) = spec.marginal_tolerance {
            if row_marginal_error(&kernel, m, a, &u, &v) <= tol {
                break;
            }
        }
    }

    Ok(Coupling {
        plan: scaled_plan(&kernel, n, m, &u, &v),
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        scalings: Scalings::Kernel { u, v },
        epsilon,
        iterations_run,
    })
}

/// Scaling factors outside `[1/ABSORB_BOUND, ABSORB_BOUND]` are folded into the
/// log potentials and the kernel is rebuilt.
const ABSORB_BOUND: f64 = 1e50;

/// State of the absorbed log-domain iteration. The true scalings are
/// `exp(log_u) * u` and `exp(log_v) * v`, and `kernel` holds
/// `exp(log_u_i + log_k_ij + log_v_j)`.
struct Absorbed<'a> {
    log_k: &'a [f64],
    n: usize,
    m: usize,
    log_u: Vec<f64>,
    log_v: Vec<f64>,
    kernel: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Absorbed<'_> {
    fn absorb(&mut self) {
        for (lu, u) in self.log_u.iter_mut().zip(&mut self.u) {
            *lu += u.ln();
            *u = 1.0;
        }
        for (lv, v) in self.log_v.iter_mut().zip(&mut self.v) {
            *lv += v.ln();
            *v = 1.0;
        }
        let m = self.m;
        for i in 0..self.n {
            let lk = &self.log_k[i * m..(i + 1) * m];
            let kr = &mut self.kernel[i * m..(i + 1) * m];
            let lu = self.log_u[i];
            for j in 0..m {
                kr[j] = (lu + lk[j] + self.log_v[j]).exp();
            }
        }
    }

    /// Exact log-sum-exp update of both potentials from the absorbed state.
    fn lse_step(&mut self, log_a: &[f64], log_b: &[f64]) -> Result<()> {
        let m = self.m;
        for (lv, v) in self.log_v.iter_mut().zip(&mut self.v) {
            *lv += v.ln();
            *v = 1.0;
        }
        for i in 0..self.n {
            let row = &self.log_k[i * m..(i + 1) * m];
            let lse = log_sum_exp(row.iter().zip(&self.log_v).map(|(k, lv)| k + lv));
            self.log_u[i] = log_a[i] - lse;
            self.u[i] = 1.0;
            if !self.log_u[i].is_finite() {
                return Err(Error::DegenerateKernel {
                    axis: Axis::Row,
                    index: i,
                });
            }
        }
        for j in 0..m {
            let col = (0..self.n).map(|i| self.log_k[i * m + j] + self.log_u[i]);
            self.log_v[j] = log_b[j] - log_sum_exp(col);
            if !self.log_v[j].is_finite() {
                return Err(Error::DegenerateKernel {
                    axis: Axis::Column,
                    index: j,
                });
            }
        }
        self.absorb();
        Ok(())
    }

    fn needs_absorption(&self) -> bool {
        let out = |x: &f64| !(*x <= ABSORB_BOUND && *x >= 1.0 / ABSORB_BOUND);
        self.u.iter().any(out) || self.v.iter().any(out)
    }
}

/// Log-domain solver. Multiplicative iterations run on a stabilized kernel
/// whose scale is carried by log potentials, with an exact log-sum-exp step
/// whenever a stabilized row or column sum underflows. In exact arithmetic the
/// iterates equal those of the kernel-domain solver.
fn sinkhorn_log(cost: &CostMatrix, a: &[f64], b: &[f64], epsilon: f64, spec: &SinkhornSpec) -> Result<Coupling> {
    let (n, m) = cost.shape();
    let log_k = raw_row_major(cost.values.mapv(|c| -c / epsilon));
    degenerate_line(&log_k, n, m, |x| x == f64::NEG_INFINITY)?;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();

    let mut state = Absorbed {
        log_k: &log_k,
        n,
        m,
        log_u: vec![0.0; n],
        log_v: vec![0.0; m],
        kernel: vec![0.0; n * m],
        u: vec![1.0; n],
        v: vec![1.0; m],
    };
    state.lse_step(&log_a, &log_b)?;
    let mut ktu = vec![0.0; m];
    let mut u_prev = vec![0.0; n];
    let mut v_prev = vec![0.0; m];
    let mut iterations_run = 1;
    let mut it = 1;
    loop {
        if let Some(tol) = spec.marginal_tolerance {
            if row_marginal_error(&state.kernel, m, a, &state.u, &state.v) <= tol {
                break;
            }
        }
        if it >= spec.iterations {
            break;
        }
        u_prev.copy_from_slice(&state.u);
        v_prev.copy_from_slice(&state.v);
        let Absorbed { kernel, u, v, .. } = &mut state;
        if scaling_step(kernel, m, a, b, u, v, &mut ktu).is_err() {
            state.u.copy_from_slice(&u_prev);
            state.v.copy_from_slice(&v_prev);
            state.lse_step(&log_a, &log_b)?;
        } else if state.needs_absorption() {
            state.absorb();
        }
        it += 1;
        iterations_run = it;
    }

    let plan = scaled_plan(&state.kernel, n, m, &state.u, &state.v);
    let log_u = state.log_u.iter().zip(&state.u).map(|(l, u)| l + u.ln()).collect();
    let log_v = state.log_v.iter().zip(&state.v).map(|(l, v)| l + v.ln()).collect();
    Ok(Coupling {
        plan,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        scalings: Scalings::Log { log_u, log_v },
        epsilon,
        iterations_run,
    })
}

/// Conditional mean of the plan: row `i` is `(1/a_i) sum_j plan_ij y_j`.
pub fn barycentric_projection(
    coupling: &Coupling,
    target_positions: ArrayView2<f64>,
    a: &[f64],
) -> Result<Array2<f64>> {
    let (n, m) = coupling.plan.dim();
    if target_positions.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "plan has {m} columns, target has {} points",
            target_positions.nrows()
        )));
    }
    if a.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "plan has {n} rows, a has length {}",
            a.len()
        )));
    }
    if let Some(i) = a.iter().position(|&x| !(x > 0.0)) {
        return Err(Error::InvalidInput(format!("a_{i} must be > 0")));
    }
    let mut out = coupling.plan.dot(&target_positions);
    for (mut row, &ai) in out.outer_iter_mut().zip(a) {
        row.mapv_inplace(|x| x / ai);
    }
    Ok(out)
}

/// Entropic objective `<C, pi> + eps * sum pi (log pi - 1)`, with `0 log 0 = 0`.
pub fn eot_cost(cost: &CostMatrix, coupling: &Coupling, epsilon: f64) -> Result<f64> {
    if cost.shape() != coupling.plan.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cost {:?} vs plan {:?}",
            cost.shape(),
            coupling.plan.dim()
        )));
    }
    let mut transport = 0.0;
    let mut entropy = 0.0;
    for (c, &p) in cost.values.iter().zip(coupling.plan.iter()) {
        if p < 0.0 {
            return Err(Error::InvalidInput(format!("negative plan entry {p}")));
        }
        if p < ENTROPY_FLOOR {
            continue;
        }
        transport += c * p;
        entropy += p * (p.ln() - 1.0);
    }
    Ok(transport + epsilon * entropy)
}

/// `OT_eps(q, p)` computed with a fresh Sinkhorn solve.
pub fn entropic_ot(q: &ParticleBatch, p: &ParticleBatch, spec: &SinkhornSpec) -> Result<f64> {
    let cost = build_cost_matrix(q, p, spec.cost_kind)?;
    let coupling = sinkhorn_scaling(&cost, q.weights(), p.weights(), spec)?;
    eot_cost(&cost, &coupling, coupling.epsilon)
}

/// Debiased Sinkhorn divergence `OT(q,p) - OT(q,q)/2 - OT(p,p)/2`.
pub fn sinkhorn_divergence(q: &ParticleBatch, p: &ParticleBatch, spec: &SinkhornSpec) -> Result<f64> {
    let cross = entropic_ot(q, p, spec)?;
    let self_q = entropic_ot(q, q, spec)?;
    let self_p = entropic_ot(p, p, spec)?;
    Ok(cross - 0.5 * self_q - 0.5 * self_p)
}
