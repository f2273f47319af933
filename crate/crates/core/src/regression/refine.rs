//! Joint discriminative refinement of mixture, Fisher-vector and FC1 layers.
//!
//! The trainable state is kept unconstrained: mixture weights as logits
//! (softmax), variances as logs (exp, then floored), and the dense layer's
//! weights and biases. The loss is the mean over videos of the per-symptom
//! mean squared error of `relu(W f + b)`, where `f` is the power- and
//! L2-normalized Fisher vector of the video's frames. Gradients are carried
//! back through the normalizations, the gradient blocks, the posterior
//! statistics and the softmax over component log-densities.
//!
//! Posterior sparsification and the variance floor are treated as identity
//! where inactive and as constants where active.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer};
use super::optim::MomentumSgd;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::fisher::{fisher_vector_len, fv_unnormalized, l2_normalize, power_normalize, SufficientStats};
use crate::gmm::{Evaluator, GaussianMixture};
use crate::model::SymptomScaleSpec;

/// Mixture, Fisher-vector and FC1 parameters trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinableStack {
    weight_logits: Array1<f64>,
    means: Array2<f64>,
    log_variances: Array2<f64>,
    fc1: DenseLayer,
    scale: SymptomScaleSpec,
    posterior_threshold: f64,
    variance_floor: f64,
}

/// Named slices of the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    WeightLogits,
    Means,
    LogVariances,
    Fc1Weights,
    Fc1Biases,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub components: usize,
    pub dim: usize,
    pub outputs: usize,
}

impl ParamLayout {
    pub fn fv_len(&self) -> usize {
        fisher_vector_len(self.components, self.dim)
    }

    pub fn len(&self) -> usize {
        self.components * (1 + 2 * self.dim) + self.outputs * (self.fv_len() + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, group: ParamGroup) -> Range<usize> {
        let (k, kn) = (self.components, self.components * self.dim);
        let fc_w = self.outputs * self.fv_len();
        let bounds = [k, kn, kn, fc_w, self.outputs];
        let idx = match group {
            ParamGroup::WeightLogits => 0,
            ParamGroup::Means => 1,
            ParamGroup::LogVariances => 2,
            ParamGroup::Fc1Weights => 3,
            ParamGroup::Fc1Biases => 4,
        };
        let start: usize = bounds[..idx].iter().sum();
        start..start + bounds[idx]
    }

    pub fn groups(&self) -> [(ParamGroup, Range<usize>); 5] {
        [
            ParamGroup::WeightLogits,
            ParamGroup::Means,
            ParamGroup::LogVariances,
            ParamGroup::Fc1Weights,
            ParamGroup::Fc1Biases,
        ]
        .map(|g| (g, self.range(g)))
    }
}

impl RefinableStack {
    pub fn new(
        gmm: &GaussianMixture,
        fc1: DenseLayer,
        scale: SymptomScaleSpec,
        posterior_threshold: f64,
        variance_floor: f64,
    ) -> Result<Self> {
        let fv_len = fisher_vector_len(gmm.components(), gmm.dim());
        if fc1.in_dim() != fv_len {
            return Err(Error::DimensionMismatch {
                context: "FC1 input vs Fisher vector length",
                expected: fv_len,
                actual: fc1.in_dim(),
            });
        }
        if fc1.out_dim() != scale.len() {
            return Err(Error::DimensionMismatch {
                context: "FC1 outputs vs symptom count",
                expected: scale.len(),
                actual: fc1.out_dim(),
            });
        }
        if !(variance_floor > 0.0) || !(posterior_threshold >= 0.0) {
            return Err(Error::InvalidParameter(
                "variance floor must be positive and posterior threshold nonnegative".into(),
            ));
        }
        Ok(Self {
            weight_logits: gmm.weights().mapv(f64::ln),
            means: gmm.means().to_owned(),
            log_variances: gmm.variances().mapv(|v| v.max(variance_floor).ln()),
            fc1,
            scale,
            posterior_threshold,
            variance_floor,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            components: self.means.nrows(),
            dim: self.means.ncols(),
            outputs: self.fc1.out_dim(),
        }
    }

    pub fn fc1(&self) -> &DenseLayer {
        &self.fc1
    }

    pub fn scale(&self) -> &SymptomScaleSpec {
        &self.scale
    }

    pub fn posterior_threshold(&self) -> f64 {
        self.posterior_threshold
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    /// The constrained mixture described by the current parameters.
    pub fn gmm(&self) -> GaussianMixture {
        let max = self
            .weight_logits
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let e = self.weight_logits.mapv(|a| (a - max).exp());
        let weights = &e / e.sum();
        let ln_floor = self.variance_floor.ln();
        let variances = self
            .log_variances
            .mapv(|s| s.max(ln_floor).exp().max(self.variance_floor));
        GaussianMixture::new(weights, self.means.clone(), variances)
            .expect("reparameterized mixture is always valid")
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        out.extend(self.weight_logits.iter());
        out.extend(self.means.iter());
        out.extend(self.log_variances.iter());
        out.extend(self.fc1.weights().iter());
        out.extend(self.fc1.biases().iter());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.layout();
        if flat.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                context: "flattened stack parameters",
                expected: layout.len(),
                actual: flat.len(),
            });
        }
        let copy = |dst: &mut dyn Iterator<Item = &mut f64>, src: &[f64]| {
            for (d, s) in dst.zip(src) {
                *d = *s;
            }
        };
        copy(
            &mut self.weight_logits.iter_mut(),
            &flat[layout.range(ParamGroup::WeightLogits)],
        );
        copy(&mut self.means.iter_mut(), &flat[layout.range(ParamGroup::Means)]);
        copy(
            &mut self.log_variances.iter_mut(),
            &flat[layout.range(ParamGroup::LogVariances)],
        );
        let (w, b) = self.fc1.params_mut();
        copy(&mut w.iter_mut(), &flat[layout.range(ParamGroup::Fc1Weights)]);
        copy(&mut b.iter_mut(), &flat[layout.range(ParamGroup::Fc1Biases)]);
        Ok(())
    }

    /// Raw FC1 outputs for already-normalized frames.
    pub fn predict_raw(&self, frames: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let ctx = Context::new(self);
        let fwd = ctx.forward(frames, "prediction")?;
        Ok(fwd.outputs)
    }
}

/// One video's normalized frames and its symptom targets.
#[derive(Debug, Clone, Copy)]
pub struct RefineSample<'a> {
    pub id: &'a str,
    pub frames: ArrayView2<'a, f64>,
    pub targets: &'a [f64],
}

struct Context<'a> {
    stack: &'a RefinableStack,
    gmm: GaussianMixture,
    var_active: Array2<bool>,
}

struct Forward {
    gamma: Array2<f64>,
    stats: SufficientStats,
    fv: Array1<f64>,
    powered: Array1<f64>,
    norm: f64,
    features: Array1<f64>,
    pre: Array1<f64>,
    outputs: Array1<f64>,
}

fn first_non_finite(name: &str, values: impl IntoIterator<Item = f64>, context: &str) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            context: context.to_string(),
        });
    }
    Ok(())
}

impl<'a> Context<'a> {
    fn new(stack: &'a RefinableStack) -> Self {
        let ln_floor = stack.variance_floor.ln();
        Self {
            stack,
            gmm: stack.gmm(),
            var_active: stack.log_variances.mapv(|s| s >= ln_floor),
        }
    }

    fn forward(&self, frames: ArrayView2<'_, f64>, context: &str) -> Result<Forward> {
        let (k, n) = (self.gmm.components(), self.gmm.dim());
        if frames.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "frame dimensionality",
                expected: n,
                actual: frames.ncols(),
            });
        }
        if frames.nrows() == 0 {
            return Err(Error::Empty("video has no frames"));
        }
        let threshold = self.stack.posterior_threshold;
        let eval = Evaluator::new(&self.gmm);
        let mut gamma = Array2::zeros((frames.nrows(), k));
        let mut stats = SufficientStats::zeros(k, n);
        stats.frames = frames.nrows();
        for (x, mut row) in frames.rows().into_iter().zip(gamma.rows_mut()) {
            let row = row.as_slice_mut().expect("standard layout");
            eval.posteriors_into(x, row);
            for (c, &g) in row.iter().enumerate() {
                if g < threshold || g == 0.0 {
                    continue;
                }
                stats.s0[c] += g;
                for j in 0..n {
                    stats.s1[[c, j]] += g * x[j];
                    stats.s2[[c, j]] += g * x[j] * x[j];
                }
            }
        }
        first_non_finite("posteriors", gamma.iter().copied(), context)?;
        first_non_finite(
            "sufficient statistics",
            stats.s1.iter().chain(stats.s2.iter()).copied(),
            context,
        )?;
        let fv = fv_unnormalized(&stats, &self.gmm)?.into_values();
        first_non_finite("fisher vector", fv.iter().copied(), context)?;
        let powered = power_normalize(fv.view());
        let norm = powered.dot(&powered).sqrt();
        let features = l2_normalize(powered.view());
        let fc1 = &self.stack.fc1;
        let pre = fc1.pre_activation(features.view())?;
        let act = fc1.activation();
        let outputs = pre.mapv(|z| act.apply(z));
        first_non_finite("FC1 outputs", outputs.iter().copied(), context)?;
        Ok(Forward {
            gamma,
            stats,
            fv,
            powered,
            norm,
            features,
            pre,
            outputs,
        })
    }

    /// Loss contribution of one video, scaled by `weight`, and optionally its
    /// gradient with respect to the flattened parameters.
    fn video_pass(
        &self,
        sample: &RefineSample<'_>,
        weight: f64,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let fwd = self.forward(sample.frames, sample.id)?;
        if sample.targets.len() != fwd.outputs.len() {
            return Err(Error::DimensionMismatch {
                context: "symptom targets",
                expected: fwd.outputs.len(),
                actual: sample.targets.len(),
            });
        }
        let residual: Array1<f64> = fwd
            .outputs
            .iter()
            .zip(sample.targets)
            .map(|(p, t)| p - t)
            .collect();
        let loss = weight * residual.dot(&residual);
        if !want_grad {
            return Ok((loss, None));
        }
        Ok((loss, Some(self.backward(sample.frames, &fwd, &residual, weight))))
    }

    fn backward(
        &self,
        frames: ArrayView2<'_, f64>,
        fwd: &Forward,
        residual: &Array1<f64>,
        weight: f64,
    ) -> Vec<f64> {
        let layout = self.stack.layout();
        let (k, n) = (layout.components, layout.dim);
        let mut grad = vec![0.0; layout.len()];
        let fc1 = &self.stack.fc1;

        // dense layer
        let act = fc1.activation();
        let dz: Array1<f64> = residual
            .iter()
            .zip(&fwd.pre)
            .map(|(r, &z)| 2.0 * weight * r * act.derivative(z))
            .collect();
        {
            let fc_w = &mut grad[layout.range(ParamGroup::Fc1Weights)];
            let d = layout.fv_len();
            for (i, &dzi) in dz.iter().enumerate() {
                for (j, &fj) in fwd.features.iter().enumerate() {
                    fc_w[i * d + j] = dzi * fj;
                }
            }
        }
        grad[layout.range(ParamGroup::Fc1Biases)].copy_from_slice(dz.as_slice().unwrap());
        let dfeat = fc1.weights().t().dot(&dz);

        // L2 then power normalization
        let dpow = if fwd.norm > 0.0 {
            let proj = fwd.features.dot(&dfeat);
            (&dfeat - &(&fwd.features * proj)) / fwd.norm
        } else {
            Array1::zeros(dfeat.len())
        };
        let dfv: Array1<f64> = dpow
            .iter()
            .zip(&fwd.powered)
            .map(|(&d, &h)| if h != 0.0 { d / (2.0 * h.abs()) } else { 0.0 })
            .collect();

        // gradient blocks -> statistics and direct parameter partials
        let (w, mu, var) = (self.gmm.weights(), self.gmm.means(), self.gmm.variances());
        let st = &fwd.stats;
        let t_len = st.frames as f64;
        let mut d_s0 = Array1::<f64>::zeros(k);
        let mut d_s1 = Array2::<f64>::zeros((k, n));
        let mut d_s2 = Array2::<f64>::zeros((k, n));
        let mut d_w = Array1::<f64>::zeros(k);
        let mut d_mu = Array2::<f64>::zeros((k, n));
        let mut d_var = Array2::<f64>::zeros((k, n));
        for c in 0..k {
            let wc = w[c];
            let sqrt_w = wc.sqrt();
            let s0 = st.s0[c];
            let dg = dfv[c];
            d_s0[c] += dg / sqrt_w;
            d_w[c] += dg * (-t_len / sqrt_w - 0.5 * (s0 - t_len * wc) / (wc * sqrt_w));
            for j in 0..n {
                let (m, v) = (mu[[c, j]], var[[c, j]]);
                let sd = v.sqrt();
                let s1 = st.s1[[c, j]];

                let mu_idx = k + c * n + j;
                let dg = dfv[mu_idx];
                let g = fwd.fv[mu_idx];
                let den = sqrt_w * sd;
                d_s1[[c, j]] += dg / den;
                d_s0[c] -= dg * m / den;
                d_mu[[c, j]] -= dg * s0 / den;
                d_w[c] -= 0.5 * dg * g / wc;
                d_var[[c, j]] -= 0.5 * dg * g / v;

                let sig_idx = k * (1 + n) + c * n + j;
                let dg = dfv[sig_idx];
                let g = fwd.fv[sig_idx];
                let den = (2.0 * wc).sqrt() * v;
                d_s2[[c, j]] += dg / den;
                d_s1[[c, j]] -= 2.0 * m * dg / den;
                d_s0[c] += (m * m - v) * dg / den;
                d_mu[[c, j]] += dg * (2.0 * m * s0 - 2.0 * s1) / den;
                d_var[[c, j]] -= dg * (s0 / den + g / v);
                d_w[c] -= 0.5 * dg * g / wc;
            }
        }

        // statistics -> posteriors -> component log-densities
        let threshold = self.stack.posterior_threshold;
        let mut d_logw = Array1::<f64>::zeros(k);
        let mut dgamma = vec![0.0; k];
        for (x, gamma) in frames.rows().into_iter().zip(fwd.gamma.rows()) {
            let mut inner = 0.0;
            for c in 0..k {
                let g = gamma[c];
                dgamma[c] = if g < threshold || g == 0.0 {
                    0.0
                } else {
                    let mut acc = d_s0[c];
                    for j in 0..n {
                        acc += x[j] * (d_s1[[c, j]] + x[j] * d_s2[[c, j]]);
                    }
                    acc
                };
                inner += g * dgamma[c];
            }
            for c in 0..k {
                let dl = gamma[c] * (dgamma[c] - inner);
                if dl == 0.0 {
                    continue;
                }
                d_logw[c] += dl;
                for j in 0..n {
                    let v = var[[c, j]];
                    let diff = x[j] - mu[[c, j]];
                    d_mu[[c, j]] += dl * diff / v;
                    d_var[[c, j]] += 0.5 * dl * (diff * diff / (v * v) - 1.0 / v);
                }
            }
        }

        // reparameterization
        for c in 0..k {
            d_logw[c] += w[c] * d_w[c];
        }
        let total: f64 = d_logw.sum();
        for (c, slot) in grad[layout.range(ParamGroup::WeightLogits)]
            .iter_mut()
            .enumerate()
        {
            *slot = d_logw[c] - w[c] * total;
        }
        for (slot, d) in grad[layout.range(ParamGroup::Means)].iter_mut().zip(&d_mu) {
            *slot = *d;
        }
        for (((slot, d), &v), &active) in grad[layout.range(ParamGroup::LogVariances)]
            .iter_mut()
            .zip(&d_var)
            .zip(var)
            .zip(&self.var_active)
        {
            *slot = if active { d * v } else { 0.0 };
        }
        grad
    }
}

fn evaluate(
    stack: &RefinableStack,
    samples: &[RefineSample<'_>],
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if samples.is_empty() {
        return Err(Error::Empty("no training videos"));
    }
    let ctx = Context::new(stack);
    let weight = 1.0 / (samples.len() * stack.fc1.out_dim()) as f64;
    let parts: Vec<(f64, Option<Vec<f64>>)> = samples
        .par_iter()
        .map(|s| ctx.video_pass(s, weight, want_grad))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; stack.layout().len()]);
    for (l, g) in parts {
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean squared error of the stack over `samples`.
pub fn stack_loss(stack: &RefinableStack, samples: &[RefineSample<'_>]) -> Result<f64> {
    Ok(evaluate(stack, samples, false)?.0)
}

/// Loss and its gradient with respect to [`RefinableStack::to_flat`].
pub fn loss_and_gradient(
    stack: &RefinableStack,
    samples: &[RefineSample<'_>],
) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = evaluate(stack, samples, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub stack: RefinableStack,
    /// Loss before each epoch's update, followed by the final loss.
    pub loss_trace: Vec<f64>,
}

/// Full-batch SGD with momentum over all stack parameters.
pub fn refine_end_to_end(
    stack: &RefinableStack,
    samples: &[RefineSample<'_>],
    config: &TrainConfig,
) -> Result<RefineOutcome> {
    config.check()?;
    let mut stack = stack.clone();
    let mut flat = stack.to_flat();
    let mut opt = MomentumSgd::new(flat.len(), config.learning_rate, config.momentum);
    let log_var_range = stack.layout().range(ParamGroup::LogVariances);
    let ln_floor = stack.variance_floor.ln();
    let mut loss_trace = Vec::with_capacity(config.epochs + 1);

    for epoch in 0..config.epochs {
        let (loss, grad) = loss_and_gradient(&stack, samples).map_err(|e| at_epoch(e, epoch))?;
        check_loss(loss, &grad, epoch)?;
        loss_trace.push(loss);
        opt.step(&mut flat, &grad)?;
        for s in &mut flat[log_var_range.clone()] {
            if *s < ln_floor {
                *s = ln_floor;
            }
        }
        stack.set_flat(&flat)?;
    }
    let final_loss = stack_loss(&stack, samples).map_err(|e| at_epoch(e, config.epochs))?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
            context: format!("after epoch {}", config.epochs),
        });
    }
    loss_trace.push(final_loss);
    Ok(RefineOutcome { stack, loss_trace })
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { tensor, context } => Error::NonFinite {
            tensor,
            context: format!("epoch {epoch}, video {context}"),
        },
        other => other,
    }
}

fn check_loss(loss: f64, grad: &[f64], epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
            context: format!("epoch {epoch}"),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "gradient".into(),
            context: format!("epoch {epoch}"),
        });
    }
    Ok(())
}

/// Fresh FC1 for a mixture: Glorot weights, ReLU, biases set by the caller.
pub fn init_fc1(
    gmm: &GaussianMixture,
    outputs: usize,
    rng: &mut impl rand::Rng,
) -> DenseLayer {
    DenseLayer::glorot(
        fisher_vector_len(gmm.components(), gmm.dim()),
        outputs,
        Activation::Relu,
        rng,
    )
}

/// Normalized Fisher vector the stack feeds to FC1 for `frames`.
pub fn stack_features(stack: &RefinableStack, frames: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    Ok(Context::new(stack).forward(frames, "features")?.features)
}
