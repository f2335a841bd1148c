//! Shared oracles for the integration suites. The finite-difference
//! machinery here is deliberately independent of the autodiff path it
//! checks: it only ever calls a black-box loss closure.

#![allow(dead_code)]

use mozoo_core::data::{generate_triplet, SceneSpec, TripletSample};
use mozoo_core::flow::TrainSample;
use mozoo_core::model::{Checkpoint, ModelConfig};
use mozoo_core::rope::{RefModality, RopeConfig};
use mozoo_core::tensor::Tensor;
use rand::Rng;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f32]) -> f64, x: &[f32], step: f32) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * step as f64));
    }
    grad
}

/// Gradient-check comparison in the usual atol/rtol form:
/// `|analytic - numeric| <= atol + rtol * |numeric|` per element.
/// Returns the worst violation margin (<= 1 passes).
pub fn grad_check_margin(analytic: &[f32], numeric: &[f64], atol: f64, rtol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (atol + rtol * n.abs()))
        .fold(0.0, f64::max)
}

pub fn assert_grads_match(analytic: &[f32], numeric: &[f64], what: &str) {
    let margin = grad_check_margin(analytic, numeric, 1e-4, 1e-3);
    assert!(
        margin <= 1.0,
        "{what}: finite-difference mismatch, worst margin {margin:.3}"
    );
}

/// Tiny model used by gradient and behavior checks: 2 layers, dim 16,
/// 2 heads, patch (1,4,4).
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(
        2,
        2,
        16,
        2,
        (1, 4, 4),
        RopeConfig::for_head_dim(8, 4).unwrap(),
    )
    .unwrap()
}

/// A checkpoint whose every parameter is non-zero, so gradients flow
/// through all branches from the first step.
pub fn randomized_checkpoint(config: ModelConfig, seed: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::init(config, seed).unwrap();
    let mut rng = mozoo_core::rng::substream(seed, "test-randomize");
    for tensor in ckpt.params.values_mut() {
        for v in tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05f32);
        }
    }
    ckpt
}

/// Small procedural triplet as a training sample (2 frames, 16x16). An
/// ellipse always fits this frame size, so the fixture is built by hand.
pub fn tiny_sample(seed: u64) -> (TripletSample, TrainSample) {
    use mozoo_core::data::{Rgb, ShapeKind, TextureKind, Trajectory};
    let spec = SceneSpec {
        seed,
        frames: 2,
        height: 16,
        width: 16,
        shape: ShapeKind::Ellipse,
        texture: TextureKind::Stripes,
        palette: [Rgb(220, 60, 40), Rgb(40, 200, 90), Rgb(245, 230, 70)],
        trajectory: Trajectory {
            start: (8.0, 8.0),
            velocity: (0.5, 0.3),
            bob: None,
        },
        background: (Rgb(20, 30, 90), Rgb(40, 110, 50)),
    };
    let triplet = generate_triplet(&spec, RefModality::Video).unwrap();
    let train = triplet.to_train_sample().unwrap();
    (triplet, train)
}

/// Deterministic random tensor helper for test fixtures.
pub fn randn(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = mozoo_core::rng::substream(seed, name);
    Tensor::randn(shape, &mut rng)
}
