#![allow(dead_code)]

use knowgrade::models::{Model, ModelConfig, ModelKind, PredictionContext, PriorCourse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Euclidean projection onto the simplex by enumerating every candidate
/// support and keeping the closest feasible point.
pub fn simplex_projection(z: &[f64]) -> Vec<f64> {
    let k = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let mut p = vec![0.0; k];
        let mut feasible = true;
        for &i in &members {
            p[i] = z[i] - tau;
            if p[i] < 0.0 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is feasible").1
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const N_COURSES: usize = 9;
pub const N_STUDENTS: usize = 3;

/// A model with every parameter drawn from `[-1, 1]` and a context with one
/// to five prior and zero to three concurrent courses.
pub fn random_instance(
    kind: ModelKind,
    dim: usize,
    attn_dim: usize,
    rng: &mut ChaCha8Rng,
) -> (Model, PredictionContext, f64) {
    let mut cfg = ModelConfig::new(kind, dim);
    cfg.attn_dim = attn_dim;
    cfg.decay = rng.random_range(0.0..1.0);
    cfg.gamma = rng.random_range(0.0..0.9);
    cfg.grade_weighted_attention = rng.random_bool(0.5);
    let mut model = Model::zeros(cfg, N_COURSES, N_STUDENTS).unwrap();
    for p in &mut model.params {
        *p = rng.random_range(-1.0..1.0);
    }
    let mut courses: Vec<usize> = (0..N_COURSES).collect();
    for i in (1..courses.len()).rev() {
        courses.swap(i, rng.random_range(0..=i));
    }
    let target = courses[0];
    let n_prior = rng.random_range(1..=5);
    let n_conc = rng.random_range(0..=3);
    let prior = courses[1..1 + n_prior]
        .iter()
        .map(|&course| PriorCourse {
            course,
            grade: rng.random_range(-1.5..1.5),
            gap: rng.random_range(1..=4),
        })
        .collect();
    let concurrent = courses[1 + n_prior..1 + n_prior + n_conc].to_vec();
    let ctx = PredictionContext {
        student: Some(rng.random_range(0..N_STUDENTS)),
        target,
        prior,
        concurrent,
    };
    (model, ctx, rng.random_range(-1.5..1.5))
}

/// Largest relative error between the analytic gradient of the per-record
/// objective and central differences. The denominator is floored so that
/// near-zero derivatives are judged on absolute error.
pub fn gradient_error(
    model: &Model,
    ctx: &PredictionContext,
    actual: f64,
    l2: f64,
    include_biases: bool,
    step: f64,
    floor: f64,
) -> f64 {
    let (_, analytic) = model
        .objective_gradient(ctx, actual, l2, include_biases)
        .unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, (&base, &grad)) in model.params.iter().zip(&analytic).enumerate() {
        probe.params[i] = base + step;
        let up = probe
            .objective_gradient(ctx, actual, l2, include_biases)
            .unwrap()
            .0;
        probe.params[i] = base - step;
        let down = probe
            .objective_gradient(ctx, actual, l2, include_biases)
            .unwrap()
            .0;
        probe.params[i] = base;
        let numeric = (up - down) / (2.0 * step);
        let err = (grad - numeric).abs() / grad.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Draws instances until one sits at least `margin` away from every kink.
pub fn smooth_instance(
    kind: ModelKind,
    dim: usize,
    attn_dim: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> (Model, PredictionContext, f64) {
    loop {
        let (model, ctx, actual) = random_instance(kind, dim, attn_dim, rng);
        if model.forward(&ctx).unwrap().kink_margin() > margin {
            return (model, ctx, actual);
        }
    }
}
