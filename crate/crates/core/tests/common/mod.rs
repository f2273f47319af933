#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symptom_fv::fisher::{accumulate_stats, fv_unnormalized};
use symptom_fv::gmm::GaussianMixture;
use symptom_fv::model::{normalize_sequence, ExpressionSequence, SymptomScaleSpec};
use symptom_fv::regression::{init_fc1, RefinableStack};

pub struct GradInstance {
    pub stack: RefinableStack,
    pub frames: Vec<Array2<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub ids: Vec<String>,
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("e{i}")).collect()
}

/// Small random stack with soft posteriors, live ReLUs and no binding floor.
pub fn gradient_instance(seed: u64, k: usize, n: usize, t: usize, w: usize, videos: usize) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    for v in 0..videos {
        let raw = Array2::from_shape_simple_fn((t, n), || rng.random_range(0.0..1.0));
        let seq = ExpressionSequence::new(format!("v{v}"), raw, names(n), 25.0).unwrap();
        frames.push(normalize_sequence(&seq).unwrap().frames().to_owned());
    }
    let raw_w: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..1.0)).collect();
    let sum: f64 = raw_w.iter().sum();
    let means = Array2::from_shape_simple_fn((k, n), || rng.random_range(-0.3..0.3));
    let variances = Array2::from_shape_simple_fn((k, n), || rng.random_range(0.05..0.2));
    let gmm = GaussianMixture::new(Array1::from_iter(raw_w.iter().map(|x| x / sum)), means, variances)
        .unwrap();
    let fc1 = init_fc1(&gmm, w, &mut rng)
        .with_biases(Array1::from_elem(w, 3.0))
        .unwrap();
    let scale = SymptomScaleSpec::new(
        "test",
        (0..w).map(|i| format!("s{i}")).collect(),
        (0, 10),
        (0, 10 * w as i32),
    )
    .unwrap();
    let stack = RefinableStack::new(&gmm, fc1, scale, 0.0, 1e-3).unwrap();
    let targets = (0..videos)
        .map(|_| (0..w).map(|_| rng.random_range(0.0..6.0)).collect())
        .collect();
    GradInstance {
        stack,
        frames,
        targets,
        ids: (0..videos).map(|v| format!("v{v}")).collect(),
    }
}

/// Smallest `|z|` over the unnormalized Fisher vectors of an instance. The
/// signed square root has unbounded curvature at zero, so finite differences
/// are only meaningful when this stays away from zero.
pub fn min_abs_fv_entry(inst: &GradInstance) -> f64 {
    let gmm = inst.stack.gmm();
    inst.frames
        .iter()
        .map(|f| {
            let stats = accumulate_stats(f.view(), &gmm, 0.0).unwrap();
            fv_unnormalized(&stats, &gmm)
                .unwrap()
                .values()
                .iter()
                .fold(f64::INFINITY, |m, z| m.min(z.abs()))
        })
        .fold(f64::INFINITY, f64::min)
}
