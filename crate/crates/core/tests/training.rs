//! Optimizer arithmetic, schedules and short training runs.

use dial::attack::AttackSpec;
use dial::checkpoint::{load_checkpoint, save_checkpoint};
use dial::data::{gen_synthetic, SyntheticKind};
use dial::eval::{evaluate, NamedAttack};
use dial::loss::{DialConfig, Objective};
use dial::model::Param;
use dial::train::{lr_at, sgd_momentum_step, OptimizerState, TrainConfig, Trainer};
use dial::{ArchSpec, Error, ModelParams, Partition, Tape, Tensor};

fn param(name: &str, v: Vec<f64>) -> Param<f64> {
    Param {
        name: name.into(),
        partition: Partition::Feature,
        value: Tensor::from_vec(v),
    }
}

#[test]
fn single_step_matches_hand_gradient() {
    // ℓ(w) = (w·x - t)², ∇ℓ = 2(w·x - t)x
    let (x, t) = ([0.5, -1.5], 2.0);
    let mut params = vec![param("w.weight", vec![0.3, 0.8])];
    let mut tape = Tape::new();
    let w = tape.param("w.weight", params[0].value.clone());
    let xv = tape.constant(Tensor::from_vec(x.to_vec()));
    let wx = tape.mul(w, xv).unwrap();
    let s = tape.sum(wx).unwrap();
    let r = tape.add_scalar(s, -t).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let g = tape.backward(sq).unwrap().wrt(w).cloned();
    let mut state = OptimizerState::new(&params);
    sgd_momentum_step(&mut params, &[g], &mut state, 0.1, 0.0, 0.0).unwrap();
    let resid = 0.3 * 0.5 + 0.8 * -1.5 - t;
    let expect = [0.3 - 0.1 * 2.0 * resid * x[0], 0.8 - 0.1 * 2.0 * resid * x[1]];
    for (a, b) in params[0].value.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_momentum_steps_follow_the_recursion() {
    let (lr, m, g) = (0.05, 0.9, 0.7);
    let mut params = vec![param("p.weight", vec![1.0])];
    let mut state = OptimizerState::new(&params);
    let grad = || Some(Tensor::from_vec(vec![g]));
    sgd_momentum_step(&mut params, &[grad()], &mut state, lr, m, 0.0).unwrap();
    let after_one = params[0].value.data()[0];
    sgd_momentum_step(&mut params, &[grad()], &mut state, lr, m, 0.0).unwrap();
    let delta1 = -lr * g;
    let delta2 = -lr * (m * g + g);
    assert!((after_one - (1.0 + delta1)).abs() < 1e-15);
    assert!((params[0].value.data()[0] - (1.0 + delta1 + delta2)).abs() < 1e-15);
    assert!((delta2 - (-lr * (1.0 + m) * g)).abs() < 1e-15);
    assert_eq!(state.steps, 2);
}

#[test]
fn mnist_learning_rate_schedule() {
    let cfg = TrainConfig::mnist();
    for e in 0..55 {
        assert_eq!(lr_at(e, &cfg), 0.01);
    }
    assert!((lr_at(60, &cfg) - 0.001).abs() < 1e-15);
    assert!((lr_at(95, &cfg) - 1e-5).abs() < 1e-15);
}

fn moons_config(objective: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        lr0: 0.05,
        lr_milestones: vec![],
        attack: AttackSpec {
            lo: -4.0,
            hi: 4.0,
            ..AttackSpec::linf(0.1, 0.03, 10)
        },
        objective,
        seed: 5,
        ..TrainConfig::mnist()
    }
}

#[test]
fn two_moons_dial_ce_regression() {
    let data = gen_synthetic::<f32>(SyntheticKind::TwoMoons, 1000, 0.1, 1).unwrap();
    let arch = ArchSpec::toy_mlp(2);
    let untrained = ModelParams::build(&arch, 5).unwrap();
    let mut trainer = Trainer::new(moons_config(Objective::Dial(DialConfig::ce()), 60), untrained.clone()).unwrap();
    trainer.run(&data.train, &data.val).unwrap();
    assert_eq!(trainer.history.len(), 60);
    let last = trainer.history.last().unwrap();
    assert!(last.train_nat_acc >= 0.95, "{last:?}");
    let pgd20 = [NamedAttack::new(
        "pgd20",
        AttackSpec {
            lo: -4.0,
            hi: 4.0,
            ..AttackSpec::linf(0.1, 0.01, 20)
        },
    )];
    let trained = evaluate(&trainer.model, &data.test, &pgd20, 0, 256).unwrap();
    let baseline = evaluate(&untrained, &data.test, &pgd20, 0, 256).unwrap();
    assert!(trained.attacks[0].robust_acc > baseline.attacks[0].robust_acc);
    // r_t follows the ramp and the loss identity holds row by row
    for r in &trainer.history {
        assert!((r.loss.total - r.loss.recomputed_total()).abs() <= 1e-6);
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let data = gen_synthetic::<f32>(SyntheticKind::TwoMoons, 400, 0.1, 2).unwrap();
    let arch = ArchSpec::toy_mlp(2);
    let cfg = moons_config(Objective::Trades { lambda: 6.0 }, 5);
    let mut straight = Trainer::new(cfg.clone(), ModelParams::build(&arch, 0).unwrap()).unwrap();
    straight.run(&data.train, &data.val).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), ModelParams::build(&arch, 0).unwrap()).unwrap();
    for _ in 0..3 {
        first.run_epoch(&data.train, &data.val).unwrap();
    }
    let path = dir.path().join("e3.ckpt");
    save_checkpoint(&first.model, Some(&first.optimizer), first.epoch, &path).unwrap();
    let (model, opt, epoch) = load_checkpoint::<f32>(&path, &arch).unwrap();
    assert_eq!(epoch, 3);
    let mut second = Trainer::resume(cfg, model, opt.unwrap(), epoch).unwrap();
    second.run(&data.train, &data.val).unwrap();
    let resumed: Vec<_> = first.history.iter().chain(&second.history).collect();
    assert_eq!(resumed.len(), 5);
    for (a, b) in straight.history.iter().zip(resumed) {
        assert!((a.loss.total - b.loss.total).abs() <= 1e-6);
    }
    assert_eq!(straight.model, second.model);
}

#[test]
fn diverging_run_reports_epoch_and_batch() {
    let data = gen_synthetic::<f32>(SyntheticKind::TwoMoons, 200, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        lr0: 1e30,
        ..moons_config(Objective::At, 3)
    };
    let mut trainer = Trainer::new(cfg, ModelParams::build(&ArchSpec::toy_mlp(2), 0).unwrap()).unwrap();
    let err = trainer.run(&data.train, &data.val).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    assert!(err.is_numerical());
}
