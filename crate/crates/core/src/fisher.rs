//! Fisher-vector encoding of frame sequences against a Gaussian mixture.
//!
//! A sequence of `T` frames is summarized by the posterior-weighted
//! statistics `S0_k = sum_t g_t(k)`, `S1_k = sum_t g_t(k) x_t` and
//! `S2_k = sum_t g_t(k) x_t^2`. From these the gradient blocks are
//!
//! ```text
//! G_w(k)     = (S0_k - T w_k) / sqrt(w_k)
//! G_mu(k)    = (S1_k - mu_k S0_k) / (sqrt(w_k) sigma_k)
//! G_sigma(k) = (S2_k - 2 mu_k S1_k + (mu_k^2 - sigma_k^2) S0_k) / (sqrt(2 w_k) sigma_k^2)
//! ```
//!
//! stacked as `[G_w(1..K) | G_mu(1..K) | G_sigma(1..K)]`, a vector of length
//! `K(2N + 1)` regardless of `T`. The encoded descriptor is then power
//! normalized (signed square root) and L2 normalized.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{Evaluator, GaussianMixture, DEFAULT_POSTERIOR_THRESHOLD};
use crate::model::ExpressionSequence;

/// Zeroth, first and second order posterior statistics of a frame set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub s0: Array1<f64>,
    pub s1: Array2<f64>,
    pub s2: Array2<f64>,
    pub frames: usize,
}

impl SufficientStats {
    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            s0: Array1::zeros(k),
            s1: Array2::zeros((k, n)),
            s2: Array2::zeros((k, n)),
            frames: 0,
        }
    }

    /// Statistics of the union of two frame sets.
    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats> {
        if self.s1.dim() != other.s1.dim() {
            return Err(Error::DimensionMismatch {
                context: "sufficient statistics",
                expected: self.s1.len(),
                actual: other.s1.len(),
            });
        }
        Ok(SufficientStats {
            s0: &self.s0 + &other.s0,
            s1: &self.s1 + &other.s1,
            s2: &self.s2 + &other.s2,
            frames: self.frames + other.frames,
        })
    }
}

/// Accumulates statistics over the rows of `frames`, zeroing posteriors
/// below `sparsify_threshold` first. Frames are visited in order.
pub fn accumulate_stats(
    frames: ArrayView2<'_, f64>,
    gmm: &GaussianMixture,
    sparsify_threshold: f64,
) -> Result<SufficientStats> {
    let (k, n) = (gmm.components(), gmm.dim());
    if frames.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "frame dimensionality",
            expected: n,
            actual: frames.ncols(),
        });
    }
    if frames.nrows() == 0 {
        return Err(Error::Empty("no frames to accumulate"));
    }
    let eval = Evaluator::new(gmm);
    let mut stats = SufficientStats::zeros(k, n);
    stats.frames = frames.nrows();
    let mut gamma = vec![0.0; k];
    for x in frames.rows() {
        eval.posteriors_into(x, &mut gamma);
        for (c, &g) in gamma.iter().enumerate() {
            if g < sparsify_threshold || g == 0.0 {
                continue;
            }
            stats.s0[c] += g;
            for j in 0..n {
                stats.s1[[c, j]] += g * x[j];
                stats.s2[[c, j]] += g * x[j] * x[j];
            }
        }
    }
    Ok(stats)
}

/// A stacked Fisher vector, `[w blocks | mu blocks | sigma blocks]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherVector {
    values: Array1<f64>,
    components: usize,
    dim: usize,
    normalized: bool,
}

impl FisherVector {
    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_block(&self) -> ArrayView1<'_, f64> {
        self.values.slice(s![..self.components])
    }

    /// Mean gradient of component `k` (length `N`).
    pub fn mean_block(&self, k: usize) -> ArrayView1<'_, f64> {
        let start = self.components + k * self.dim;
        self.values.slice(s![start..start + self.dim])
    }

    /// Standard-deviation gradient of component `k` (length `N`).
    pub fn sigma_block(&self, k: usize) -> ArrayView1<'_, f64> {
        let start = self.components * (1 + self.dim) + k * self.dim;
        self.values.slice(s![start..start + self.dim])
    }

    /// Power then L2 normalization.
    pub fn normalized(&self) -> FisherVector {
        FisherVector {
            values: l2_normalize(power_normalize(self.values.view()).view()),
            normalized: true,
            ..self.clone()
        }
    }
}

/// Length of the Fisher vector for `k` components in `n` dimensions.
pub fn fisher_vector_len(k: usize, n: usize) -> usize {
    k * (2 * n + 1)
}

/// Gradient blocks from precomputed statistics, without normalization.
pub fn fv_unnormalized(stats: &SufficientStats, gmm: &GaussianMixture) -> Result<FisherVector> {
    let (k, n) = (gmm.components(), gmm.dim());
    if stats.s1.dim() != (k, n) || stats.s0.len() != k || stats.s2.dim() != (k, n) {
        return Err(Error::DimensionMismatch {
            context: "statistics vs mixture",
            expected: k * n,
            actual: stats.s1.len(),
        });
    }
    let t = stats.frames as f64;
    let mut values = Array1::zeros(fisher_vector_len(k, n));
    let (w, mu, var) = (gmm.weights(), gmm.means(), gmm.variances());
    for c in 0..k {
        let sqrt_w = w[c].sqrt();
        let sqrt_2w = (2.0 * w[c]).sqrt();
        let s0 = stats.s0[c];
        values[c] = (s0 - t * w[c]) / sqrt_w;
        for j in 0..n {
            let (m, v) = (mu[[c, j]], var[[c, j]]);
            let (s1, s2) = (stats.s1[[c, j]], stats.s2[[c, j]]);
            values[k + c * n + j] = (s1 - m * s0) / (sqrt_w * v.sqrt());
            values[k * (1 + n) + c * n + j] = (s2 - 2.0 * m * s1 + (m * m - v) * s0) / (sqrt_2w * v);
        }
    }
    Ok(FisherVector {
        values,
        components: k,
        dim: n,
        normalized: false,
    })
}

/// Elementwise `sign(z) sqrt(|z|)`.
pub fn power_normalize(v: ArrayView1<'_, f64>) -> Array1<f64> {
    v.mapv(|z| z.signum() * z.abs().sqrt())
        .mapv(|z| if z == 0.0 { 0.0 } else { z })
}

/// Scales `v` to unit Euclidean norm; a zero vector is returned unchanged.
pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v.to_owned()
    } else {
        v.mapv(|z| z / norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub sparsify_threshold: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            sparsify_threshold: DEFAULT_POSTERIOR_THRESHOLD,
        }
    }
}

/// Encodes a normalized sequence as a power- and L2-normalized Fisher vector.
pub fn encode(
    seq: &ExpressionSequence,
    gmm: &GaussianMixture,
    config: &EncodeConfig,
) -> Result<FisherVector> {
    if !seq.is_normalized() {
        return Err(Error::InvalidParameter(format!(
            "sequence `{}` must be mean-normalized before encoding",
            seq.video_id()
        )));
    }
    let stats = accumulate_stats(seq.frames(), gmm, config.sparsify_threshold)?;
    Ok(fv_unnormalized(&stats, gmm)?.normalized())
}
