//! Diagonal-covariance Gaussian mixtures: densities, posteriors and EM fitting.


use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum variance allowed for any component and dimension.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-3;

/// Posteriors below this are zeroed when encoding.
pub const DEFAULT_POSTERIOR_THRESHOLD: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per work unit in the E-step. Partial statistics are reduced in chunk
/// order, so the result does not depend on the number of worker threads.
const CHUNK_ROWS: usize = 1024;

/// `K` weighted diagonal Gaussians over `N`-dimensional vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

impl GaussianMixture {
    /// Weights must be positive and sum to one within `1e-9`; they are
    /// rescaled to sum to one exactly (up to rounding).
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture has no components"));
        }
        if means.nrows() != k {
            return Err(Error::DimensionMismatch {
                context: "mixture means (rows)",
                expected: k,
                actual: means.nrows(),
            });
        }
        if means.ncols() == 0 {
            return Err(Error::Empty("mixture has zero dimensions"));
        }
        if variances.dim() != means.dim() {
            return Err(Error::DimensionMismatch {
                context: "mixture variances",
                expected: means.len(),
                actual: variances.len(),
            });
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::InvalidParameter(
                "mixture weights must be positive and finite".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("mixture means must be finite".into()));
        }
        if variances.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidParameter(
                "mixture variances must be positive and finite".into(),
            ));
        }
        Ok(Self {
            weights: weights / total,
            means,
            variances,
        })
    }

    /// Number of components `K`.
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Feature dimensionality `N`.
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn variances(&self) -> ArrayView2<'_, f64> {
        self.variances.view()
    }

    pub fn min_variance(&self) -> f64 {
        self.variances.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Raises every variance to at least `floor`.
    pub fn with_variance_floor(mut self, floor: f64) -> Self {
        self.variances.mapv_inplace(|v| v.max(floor));
        self
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "feature vector",
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `log u_k(x)` for component `k`.
    pub fn component_log_density(&self, k: usize, x: ArrayView1<'_, f64>) -> Result<f64> {
        if k >= self.components() {
            return Err(Error::InvalidParameter(format!(
                "component index {k} out of range for K = {}",
                self.components()
            )));
        }
        self.check_dim(x.len())?;
        let mut log_det = 0.0;
        let mut quad = 0.0;
        for ((&xi, &mu), &var) in x.iter().zip(self.means.row(k)).zip(self.variances.row(k)) {
            let d = xi - mu;
            log_det += var.ln();
            quad += d * d / var;
        }
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + log_det + quad))
    }

    /// Responsibilities `gamma(k)` of every component for `x`.
    pub fn posteriors(&self, x: ArrayView1<'_, f64>) -> Result<PosteriorRow> {
        self.check_dim(x.len())?;
        let eval = Evaluator::new(self);
        let mut row = vec![0.0; self.components()];
        eval.posteriors_into(x, &mut row);
        Ok(PosteriorRow(row))
    }

    /// `sum_t log u_lambda(x_t)` over the rows of `data`.
    pub fn log_likelihood(&self, data: ArrayView2<'_, f64>) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::Empty("log-likelihood of empty data"));
        }
        self.check_dim(data.ncols())?;
        let eval = Evaluator::new(self);
        let mut scratch = vec![0.0; self.components()];
        Ok(data
            .rows()
            .into_iter()
            .map(|x| eval.log_density_into(x, &mut scratch))
            .sum())
    }
}

/// Per-component constants for repeated evaluation.
pub(crate) struct Evaluator<'a> {
    gmm: &'a GaussianMixture,
    log_const: Vec<f64>,
    inv_var: Array2<f64>,
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(gmm: &'a GaussianMixture) -> Self {
        let n = gmm.dim() as f64;
        let log_const = gmm
            .weights
            .iter()
            .zip(gmm.variances.rows())
            .map(|(w, var)| w.ln() - 0.5 * (n * LN_2PI + var.iter().map(|v| v.ln()).sum::<f64>()))
            .collect();
        Self {
            gmm,
            log_const,
            inv_var: gmm.variances.mapv(|v| 1.0 / v),
        }
    }

    /// Fills `out` with `log w_k + log u_k(x)`.
    pub(crate) fn weighted_log_densities(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let mut quad = 0.0;
            for ((&xi, &mu), &iv) in x
                .iter()
                .zip(self.gmm.means.row(k))
                .zip(self.inv_var.row(k))
            {
                let d = xi - mu;
                quad += d * d * iv;
            }
            *slot = self.log_const[k] - 0.5 * quad;
        }
    }

    /// Returns `log u_lambda(x)`, leaving scratch holding the shifted
    /// exponentials `exp(l_k - max)`.
    fn log_density_into(&self, x: ArrayView1<'_, f64>, scratch: &mut [f64]) -> f64 {
        self.weighted_log_densities(x, scratch);
        let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in scratch.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        max + sum.ln()
    }

    /// Writes posteriors into `out` and returns `log u_lambda(x)`.
    pub(crate) fn posteriors_into(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) -> f64 {
        let ll = self.log_density_into(x, out);
        let sum: f64 = out.iter().sum();
        for v in out.iter_mut() {
            *v /= sum;
        }
        ll
    }
}

/// Component responsibilities for a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow(pub Vec<f64>);

impl PosteriorRow {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Zeroes responsibilities strictly below `threshold`. The survivors are not
/// renormalized.
pub fn sparsify_posteriors(row: &PosteriorRow, threshold: f64) -> PosteriorRow {
    PosteriorRow(
        row.0
            .iter()
            .map(|&g| if g < threshold { 0.0 } else { g })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the per-point log-likelihood improvement drops below this.
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
    /// Fit on a seeded uniform subset of this fraction of the rows.
    pub subsample: Option<f64>,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-6,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            seed: 0,
            subsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Log-likelihood of the initial mixture followed by one entry per
    /// completed iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, component)` pairs that were re-seeded.
    pub reseeded: Vec<(usize, usize)>,
    /// Whether the floor raised any variance in the final M-step.
    pub floored_last_step: bool,
}

/// Seeds a mixture for EM.
///
/// Means are picked from the data with D²-weighted greedy seeding, variances
/// start at the global per-dimension variance, weights at `1/K`.
pub fn init_gmm(
    data: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    variance_floor: f64,
) -> Result<GaussianMixture> {
    check_fit_args(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = seed_indices(data, k, &mut rng);
    let mut means = Array2::zeros((k, data.ncols()));
    for (row, &idx) in chosen.iter().enumerate() {
        means.row_mut(row).assign(&data.row(idx));
    }
    let global = global_variance(data, variance_floor);
    let variances = Array2::from_shape_fn((k, data.ncols()), |(_, j)| global[j]);
    GaussianMixture::new(Array1::from_elem(k, 1.0 / k as f64), means, variances)
}

/// Indices of the data rows chosen as initial means, in selection order.
pub(crate) fn seed_indices(data: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = data.nrows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();

    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // every remaining point coincides with a chosen one
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    chosen
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn global_variance(data: ArrayView2<'_, f64>, floor: f64) -> Array1<f64> {
    let mean = data.mean_axis(Axis(0)).expect("non-empty data");
    let n = data.nrows() as f64;
    let mut var = Array1::zeros(data.ncols());
    for row in data.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.mapv(|v: f64| (v / n).max(floor))
}

fn check_fit_args(data: ArrayView2<'_, f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if data.ncols() == 0 {
        return Err(Error::Empty("data has zero dimensions"));
    }
    if data.nrows() < k {
        return Err(Error::InvalidParameter(format!(
            "K = {k} exceeds the number of data points ({})",
            data.nrows()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "data".into(),
            context: "EM input".into(),
        });
    }
    Ok(())
}

/// Posterior-weighted statistics for one E-step, with the data shifted by
/// its global mean to keep the variance update well conditioned.
struct EStep {
    s0: Array1<f64>,
    s1: Array2<f64>,
    s2: Array2<f64>,
    log_likelihood: f64,
    worst_point: (f64, usize),
}

impl EStep {
    fn zeros(k: usize, n: usize) -> Self {
        Self {
            s0: Array1::zeros(k),
            s1: Array2::zeros((k, n)),
            s2: Array2::zeros((k, n)),
            log_likelihood: 0.0,
            worst_point: (f64::INFINITY, usize::MAX),
        }
    }

    fn merge(mut self, other: EStep) -> Self {
        self.s0 += &other.s0;
        self.s1 += &other.s1;
        self.s2 += &other.s2;
        self.log_likelihood += other.log_likelihood;
        if other.worst_point.0 < self.worst_point.0 {
            self.worst_point = other.worst_point;
        }
        self
    }
}

fn e_step(gmm: &GaussianMixture, data: ArrayView2<'_, f64>, shift: ArrayView1<'_, f64>) -> EStep {
    let (k, n) = (gmm.components(), gmm.dim());
    let eval = Evaluator::new(gmm);
    let chunks: Vec<usize> = (0..data.nrows()).step_by(CHUNK_ROWS).collect();
    let partials: Vec<EStep> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_ROWS).min(data.nrows());
            let mut acc = EStep::zeros(k, n);
            let mut gamma = vec![0.0; k];
            for t in start..end {
                let x = data.row(t);
                let ll = eval.posteriors_into(x, &mut gamma);
                acc.log_likelihood += ll;
                if ll < acc.worst_point.0 {
                    acc.worst_point = (ll, t);
                }
                for (c, &g) in gamma.iter().enumerate() {
                    acc.s0[c] += g;
                    for j in 0..n {
                        let d = x[j] - shift[j];
                        acc.s1[[c, j]] += g * d;
                        acc.s2[[c, j]] += g * d * d;
                    }
                }
            }
            acc
        })
        .collect();
    partials
        .into_iter()
        .fold(EStep::zeros(k, n), EStep::merge)
}

/// Closed-form weight, mean and variance updates. Returns the new mixture,
/// whether any variance was floored, and which components were re-seeded.
fn m_step(
    stats: &EStep,
    data: ArrayView2<'_, f64>,
    shift: ArrayView1<'_, f64>,
    global_var: ArrayView1<'_, f64>,
    floor: f64,
) -> Result<(GaussianMixture, bool, Vec<usize>)> {
    let k = stats.s0.len();
    let n = shift.len();
    let total = data.nrows() as f64;
    let mut weights = Array1::zeros(k);
    let mut means = Array2::zeros((k, n));
    let mut variances = Array2::zeros((k, n));
    let mut floored = false;
    let mut reseeded = Vec::new();

    for c in 0..k {
        let mass = stats.s0[c];
        if mass < 1e-8 * total {
            reseeded.push(c);
            weights[c] = 1.0 / k as f64;
            means.row_mut(c).assign(&data.row(stats.worst_point.1));
            variances.row_mut(c).assign(&global_var);
            continue;
        }
        weights[c] = mass / total;
        for j in 0..n {
            let centered_mean = stats.s1[[c, j]] / mass;
            let var = stats.s2[[c, j]] / mass - centered_mean * centered_mean;
            means[[c, j]] = centered_mean + shift[j];
            if var < floor {
                floored = true;
            }
            variances[[c, j]] = var.max(floor);
        }
    }
    let sum = weights.sum();
    weights /= sum;
    Ok((GaussianMixture::new(weights, means, variances)?, floored, reseeded))
}

/// Fits a `K`-component mixture to the rows of `data` with EM.
pub fn fit_em(
    data: ArrayView2<'_, f64>,
    k: usize,
    config: &EmConfig,
) -> Result<(GaussianMixture, EmTrace)> {
    check_fit_args(data, k)?;
    if !(config.variance_floor > 0.0) {
        return Err(Error::InvalidParameter("variance floor must be positive".into()));
    }
    let subset;
    let data = match config.subsample {
        Some(rate) if rate < 1.0 => {
            if !(rate > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "subsample rate must lie in (0, 1], got {rate}"
                )));
            }
            subset = subsample_rows(data, rate, k, config.seed);
            subset.view()
        }
        _ => data,
    };

    let total = data.nrows() as f64;
    let shift = data.mean_axis(Axis(0)).expect("non-empty data");
    let global_var = global_variance(data, config.variance_floor);
    let mut gmm = init_gmm(data, k, config.seed, config.variance_floor)?;
    let mut stats = e_step(&gmm, data, shift.view());
    let mut trace = EmTrace {
        log_likelihoods: vec![stats.log_likelihood],
        iterations: 0,
        converged: false,
        reseeded: Vec::new(),
        floored_last_step: false,
    };

    for iter in 1..=config.max_iters {
        let (next, floored, reseeded) = m_step(
            &stats,
            data,
            shift.view(),
            global_var.view(),
            config.variance_floor,
        )?;
        trace
            .reseeded
            .extend(reseeded.into_iter().map(|c| (iter, c)));
        let next_stats = e_step(&next, data, shift.view());
        if !next_stats.log_likelihood.is_finite() {
            return Err(Error::NonFinite {
                tensor: "log-likelihood".into(),
                context: format!("EM iteration {iter}"),
            });
        }
        let improvement = (next_stats.log_likelihood - stats.log_likelihood) / total;
        gmm = next;
        stats = next_stats;
        trace.log_likelihoods.push(stats.log_likelihood);
        trace.iterations = iter;
        trace.floored_last_step = floored;
        if improvement < config.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((gmm, trace))
}

fn subsample_rows(data: ArrayView2<'_, f64>, rate: f64, k: usize, seed: u64) -> Array2<f64> {
    let n = data.nrows();
    let keep = ((n as f64 * rate).round() as usize).clamp(k, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ab5);
    let mut picked = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    data.select(Axis(0), &picked)
}
