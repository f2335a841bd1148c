//! Rectified flow: linear noise interpolation, the velocity-regression
//! loss over the target segment, Euler ODE sampling, and the training loop.

use crate::error::{Error, Result};
use crate::model::{forward_graph, patchify, Checkpoint, ConditioningBundle};
use crate::rng::substream_indexed;
use crate::tensor::{Gradients, OptimState, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::time::Instant;

/// One point on the linear noise schedule; `z_t = (1 - t) z0 + t eps`.
#[derive(Debug, Clone)]
pub struct NoiseSchedulePoint {
    pub t: f64,
    pub z_t: Tensor,
    pub epsilon: Tensor,
}

impl NoiseSchedulePoint {
    pub fn new(z0: &Tensor, epsilon: Tensor, t: f64) -> Result<Self> {
        let z_t = interpolate(z0, &epsilon, t)?;
        Ok(Self { t, z_t, epsilon })
    }

    /// Check the construction invariant against the generating `z0`.
    pub fn consistent_with(&self, z0: &Tensor) -> Result<bool> {
        let expect = interpolate(z0, &self.epsilon, self.t)?;
        Ok(expect.data() == self.z_t.data())
    }
}

/// Exact linear interpolation between data and noise.
pub fn interpolate(z0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "interpolate shapes differ: {:?} vs {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
        .collect();
    Tensor::new(z0.shape(), data)
}

/// Mean squared error of a velocity prediction against `eps - z0`.
pub fn fm_loss(pred_v: &Tensor, z0: &Tensor, eps: &Tensor) -> Result<f32> {
    if pred_v.shape() != z0.shape() || pred_v.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "fm_loss shapes differ: {:?} / {:?} / {:?}",
            pred_v.shape(),
            z0.shape(),
            eps.shape()
        )));
    }
    let mut acc = 0.0f64;
    for ((&p, &a), &b) in pred_v.data().iter().zip(z0.data()).zip(eps.data()) {
        let d = (p - (b - a)) as f64;
        acc += d * d;
    }
    Ok((acc / pred_v.numel() as f64) as f32)
}

/// Step schedule for Euler sampling: a strictly decreasing grid from 1
/// to 0.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
}

impl SamplerConfig {
    /// Uniform grid `t_k = 1 - k / steps`.
    pub fn uniform(steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let grid = (0..=steps)
            .map(|k| 1.0 - k as f64 / steps as f64)
            .collect();
        let cfg = Self { steps, seed, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.steps + 1 {
            return Err(Error::Config(format!(
                "grid carries {} points for {} steps",
                self.grid.len(),
                self.steps
            )));
        }
        if self.grid.first() != Some(&1.0) || self.grid.last() != Some(&0.0) {
            return Err(Error::Config("grid must run from 1 to 0".into()));
        }
        if self.grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("grid must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// Integrate `dz = v(z, t) dt` from t=1 to t=0 starting at seeded standard
/// normal noise.
pub fn euler_sample(
    mut velocity_fn: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    sampler: &SamplerConfig,
    target_shape: &[usize],
) -> Result<Tensor> {
    sampler.validate()?;
    let mut rng = crate::rng::substream(sampler.seed, "noise");
    let mut z = Tensor::randn(target_shape, &mut rng);
    for k in 0..sampler.steps {
        let t = sampler.grid[k];
        let dt = sampler.grid[k] - sampler.grid[k + 1];
        let v = velocity_fn(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "velocity shape {:?} does not match state {:?}",
                v.shape(),
                z.shape()
            )));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi = (*zi as f64 - *vi as f64 * dt) as f32;
        }
        if !z.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite state after sampling step {k}"
            )));
        }
    }
    Ok(z)
}

/// One training example: the clean target video (normalized pixels) and
/// its conditioning.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub target: Tensor,
    pub cond: ConditioningBundle,
}

/// One row of the loss trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub t: f64,
    pub loss: f32,
    pub wall_ms: f64,
}

/// Loss trace emitted by the training loop.
#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,t,loss,wall_ms")?;
        for row in &self.rows {
            writeln!(w, "{},{},{},{}", row.step, row.t, row.loss, row.wall_ms)?;
        }
        Ok(())
    }

    /// The deterministic columns (step, t, loss), for trace comparison;
    /// wall-clock excluded.
    pub fn deterministic_view(&self) -> Vec<(u64, f64, f32)> {
        self.rows.iter().map(|r| (r.step, r.t, r.loss)).collect()
    }
}

/// The seeded draws of one training step: sample index and timestep.
/// Exposed so any step of a run can be reproduced in isolation.
pub fn step_draws(seed: u64, step: u64, dataset_len: usize) -> (usize, f64) {
    let mut rng = step_rng(seed, step);
    let idx = rng.gen_range(0..dataset_len);
    let t: f64 = rng.gen();
    (idx, t)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    // stateless per-step stream; resuming at step k replays exactly
    let mut rng = substream_indexed(seed, "train-step", step);
    ChaCha8Rng::seed_from_u64(rng.gen())
}

/// Scalar objective for one (sample, t, eps) triple, as the training loop
/// sees it: velocity regression over the patchified target tokens.
pub fn loss_value(
    ckpt: &Checkpoint,
    sample: &TrainSample,
    t: f64,
    eps: &Tensor,
) -> Result<f32> {
    let (graph, loss) = build_loss(ckpt, sample, t, eps)?;
    graph.value(loss).item()
}

/// Same objective, plus gradients for every parameter.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    sample: &TrainSample,
    t: f64,
    eps: &Tensor,
) -> Result<(f32, Gradients)> {
    let (graph, loss) = build_loss(ckpt, sample, t, eps)?;
    let value = graph.value(loss).item()?;
    let grads = graph.backward(loss)?;
    Ok((value, grads))
}

fn build_loss(
    ckpt: &Checkpoint,
    sample: &TrainSample,
    t: f64,
    eps: &Tensor,
) -> Result<(crate::tensor::Graph, crate::tensor::NodeId)> {
    let z0 = &sample.target;
    let z_t = interpolate(z0, eps, t)?;
    let mut fg = forward_graph(ckpt, &z_t, &sample.cond, t)?;
    // u = eps - z0, compared in token space; the token map is a bijection,
    // so the mean square matches the pixel-space loss
    let u = {
        let data = eps
            .data()
            .iter()
            .zip(z0.data())
            .map(|(&e, &z)| e - z)
            .collect();
        Tensor::new(z0.shape(), data)?
    };
    let (u_tok, _) = patchify(&u, ckpt.config.patch)?;
    let u_leaf = fg.graph.leaf(u_tok);
    let diff = fg.graph.sub(fg.pred_tokens, u_leaf)?;
    let sq = fg.graph.mul(diff, diff)?;
    let loss = fg.graph.mean(sq);
    Ok((fg.graph, loss))
}

/// Run `steps` optimizer updates over the dataset.
///
/// Per step: draw a sample and a uniform timestep, noise the target, run
/// the model, regress the velocity, update. All draws key off
/// `(seed, global step)`, so a resumed run continues the exact stream.
pub fn train_loop(
    ckpt: &mut Checkpoint,
    dataset: &[TrainSample],
    steps: u64,
    optim: &mut OptimState,
    seed: u64,
) -> Result<LossTrace> {
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let mut trace = LossTrace::default();
    for _ in 0..steps {
        let begin = Instant::now();
        let global = ckpt.train_steps;
        let mut rng = step_rng(seed, global);
        let idx = rng.gen_range(0..dataset.len());
        let t: f64 = rng.gen();
        let sample = &dataset[idx];
        let eps = Tensor::randn(sample.target.shape(), &mut rng);

        let (loss, grads) = loss_and_grads(ckpt, sample, t, &eps)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {global}"
            )));
        }
        optim.step(&mut ckpt.params, &grads)?;
        ckpt.train_steps += 1;
        trace.rows.push(TraceRow {
            step: ckpt.train_steps,
            t,
            loss,
            wall_ms: begin.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_hits_both_endpoints_exactly() {
        let mut rng = crate::rng::substream(0, "interp");
        let z0 = Tensor::randn(&[2, 3], &mut rng);
        let eps = Tensor::randn(&[2, 3], &mut rng);
        assert_eq!(interpolate(&z0, &eps, 0.0).unwrap().data(), z0.data());
        assert_eq!(interpolate(&z0, &eps, 1.0).unwrap().data(), eps.data());
    }

    #[test]
    fn interpolate_midpoint() {
        let z0 = Tensor::zeros(&[4]);
        let eps = Tensor::full(&[4], 2.0);
        let mid = interpolate(&z0, &eps, 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn fm_loss_zero_iff_perfect_prediction() {
        let mut rng = crate::rng::substream(1, "fm");
        let z0 = Tensor::randn(&[8], &mut rng);
        let eps = Tensor::randn(&[8], &mut rng);
        let perfect = Tensor::new(
            &[8],
            eps.data().iter().zip(z0.data()).map(|(&e, &z)| e - z).collect(),
        )
        .unwrap();
        assert_eq!(fm_loss(&perfect, &z0, &eps).unwrap(), 0.0);
        let off = perfect.map(|v| v + 0.1);
        assert!(fm_loss(&off, &z0, &eps).unwrap() > 0.0);
    }

    #[test]
    fn fm_loss_constant_field() {
        let zeros = Tensor::zeros(&[5]);
        let eps = Tensor::full(&[5], 2.0);
        assert_eq!(fm_loss(&zeros, &zeros, &eps).unwrap(), 4.0);
    }

    #[test]
    fn noise_schedule_point_invariant_holds() {
        let mut rng = crate::rng::substream(2, "nsp");
        let z0 = Tensor::randn(&[6], &mut rng);
        let eps = Tensor::randn(&[6], &mut rng);
        let point = NoiseSchedulePoint::new(&z0, eps, 0.3).unwrap();
        assert!(point.consistent_with(&z0).unwrap());
    }

    #[test]
    fn sampler_grid_validation() {
        assert!(SamplerConfig::uniform(0, 0).is_err());
        let mut cfg = SamplerConfig::uniform(4, 0).unwrap();
        cfg.grid[2] = cfg.grid[1]; // not strictly decreasing
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn euler_exact_under_constant_oracle_velocity() {
        let mut rng = crate::rng::substream(3, "euler");
        let z0 = Tensor::randn(&[3, 4], &mut rng);
        for steps in [1usize, 4, 10] {
            let sampler = SamplerConfig::uniform(steps, 11).unwrap();
            // reconstruct the oracle's eps: the sampler starts from its own
            // seeded noise, so the constant velocity is (z1 - z0) over dt=1
            let mut noise_rng = crate::rng::substream(11, "noise");
            let z1 = Tensor::randn(&[3, 4], &mut noise_rng);
            let u = Tensor::new(
                &[3, 4],
                z1.data().iter().zip(z0.data()).map(|(&e, &z)| e - z).collect(),
            )
            .unwrap();
            let out = euler_sample(|_, _| Ok(u.clone()), &sampler, &[3, 4]).unwrap();
            assert!(out.max_abs_diff(&z0).unwrap() < 1e-6, "steps={steps}");
        }
    }

    #[test]
    fn single_step_equals_closed_form() {
        let sampler = SamplerConfig::uniform(1, 5).unwrap();
        let mut noise_rng = crate::rng::substream(5, "noise");
        let z1 = Tensor::randn(&[4], &mut noise_rng);
        let v = Tensor::full(&[4], 0.25);
        let out = euler_sample(|_, _| Ok(v.clone()), &sampler, &[4]).unwrap();
        for (o, z) in out.data().iter().zip(z1.data()) {
            assert!((o - (z - 0.25)).abs() < 1e-7);
        }
    }

    #[test]
    fn nan_velocity_aborts_with_step_index() {
        let sampler = SamplerConfig::uniform(3, 0).unwrap();
        let err = euler_sample(
            |_, _| Ok(Tensor::full(&[2], f32::NAN)),
            &sampler,
            &[2],
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
    }

    #[test]
    fn timestep_draws_cover_every_decile() {
        let mut seen = [false; 10];
        for step in 0..1000u64 {
            let (_, t) = step_draws(123, step, 4);
            seen[((t * 10.0) as usize).min(9)] = true;
        }
        assert!(seen.iter().all(|&s| s), "deciles hit: {seen:?}");
    }
}
