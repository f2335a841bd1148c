//! Training-loop behavior: smoke convergence, determinism, null updates,
//! resume continuity.

mod common;

use common::{tiny_config, tiny_sample};
use mozoo_core::flow::{train_loop, LossTrace};
use mozoo_core::model::Checkpoint;
use mozoo_core::tensor::OptimState;

fn mean(loss: &[f32]) -> f64 {
    loss.iter().map(|&v| v as f64).sum::<f64>() / loss.len() as f64
}

#[test]
fn two_hundred_steps_strictly_improve_the_smoke_loss() {
    let (_, sample) = tiny_sample(21);
    let dataset = vec![sample];
    let mut ckpt = Checkpoint::init(tiny_config(), 0).unwrap();
    let mut optim = OptimState::new(1e-3).unwrap();
    let trace = train_loop(&mut ckpt, &dataset, 200, &mut optim, 5).unwrap();
    let losses: Vec<f32> = trace.rows.iter().map(|r| r.loss).collect();
    let head = mean(&losses[..20]);
    let tail = mean(&losses[180..]);
    assert!(tail < head, "first-20 mean {head} vs last-20 mean {tail}");
}

#[test]
fn fixed_seed_reproduces_the_loss_trace_bit_for_bit() {
    let (_, sample) = tiny_sample(22);
    let run = || {
        let dataset = vec![sample.clone()];
        let mut ckpt = Checkpoint::init(tiny_config(), 3).unwrap();
        let mut optim = OptimState::new(1e-3).unwrap();
        train_loop(&mut ckpt, &dataset, 25, &mut optim, 7).unwrap()
    };
    let a: LossTrace = run();
    let b: LossTrace = run();
    assert_eq!(a.deterministic_view(), b.deterministic_view());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let (_, sample) = tiny_sample(23);
    let dataset = vec![sample];
    let mut ckpt = Checkpoint::init(tiny_config(), 4).unwrap();
    let before = ckpt.params.clone();
    let mut optim = OptimState::new(0.0).unwrap();
    train_loop(&mut ckpt, &dataset, 10, &mut optim, 9).unwrap();
    for (name, tensor) in &before {
        assert_eq!(tensor.data(), ckpt.params[name].data(), "{name}");
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let (_, sample) = tiny_sample(24);
    let dataset = vec![sample];
    let seed = 11;

    // uninterrupted: 40 steps
    let mut full = Checkpoint::init(tiny_config(), 6).unwrap();
    let mut full_optim = OptimState::new(1e-3).unwrap();
    train_loop(&mut full, &dataset, 40, &mut full_optim, seed).unwrap();

    // split: 25 steps, checkpoint through disk, 15 more
    let mut half = Checkpoint::init(tiny_config(), 6).unwrap();
    let mut half_optim = OptimState::new(1e-3).unwrap();
    train_loop(&mut half, &dataset, 25, &mut half_optim, seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.mzoo");
    half.save(&path, Some(&half_optim)).unwrap();
    let (mut resumed, resumed_optim) = Checkpoint::load(&path).unwrap();
    let mut resumed_optim = resumed_optim.unwrap();
    train_loop(&mut resumed, &dataset, 15, &mut resumed_optim, seed).unwrap();

    assert_eq!(full.train_steps, resumed.train_steps);
    for (name, tensor) in &full.params {
        assert_eq!(tensor.data(), resumed.params[name].data(), "{name}");
    }

    // byte-level equality of the final checkpoints
    let full_path = dir.path().join("full.mzoo");
    let resumed_path = dir.path().join("resumed.mzoo");
    full.save(&full_path, Some(&full_optim)).unwrap();
    resumed.save(&resumed_path, Some(&resumed_optim)).unwrap();
    assert_eq!(
        std::fs::read(&full_path).unwrap(),
        std::fs::read(&resumed_path).unwrap()
    );
}

#[test]
fn empty_dataset_is_a_contract_error() {
    let mut ckpt = Checkpoint::init(tiny_config(), 0).unwrap();
    let mut optim = OptimState::new(1e-3).unwrap();
    assert!(matches!(
        train_loop(&mut ckpt, &[], 1, &mut optim, 0),
        Err(mozoo_core::Error::Contract(_))
    ));
}

#[test]
fn trace_csv_has_the_expected_columns() {
    let (_, sample) = tiny_sample(25);
    let dataset = vec![sample];
    let mut ckpt = Checkpoint::init(tiny_config(), 8).unwrap();
    let mut optim = OptimState::new(1e-3).unwrap();
    let trace = train_loop(&mut ckpt, &dataset, 3, &mut optim, 13).unwrap();
    let mut csv = Vec::new();
    trace.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,t,loss,wall_ms"));
    assert_eq!(lines.count(), 3);
}
