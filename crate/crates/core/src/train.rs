//! Mini-batch adversarial training with SGD + momentum.
//!
//! Each batch: craft adversarial twins against the current parameters,
//! record the objective on a fresh tape, back-propagate once, step.
//! Randomness for epoch `e` comes from its own ChaCha stream, so stopping
//! after any epoch and resuming from a checkpoint replays the same run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{pgd_attack, AttackSpec, InnerLoss};
use crate::autodiff::Tape;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::{self, DialConfig, DialVariant, LossBreakdown, Objective, ADVERSARIAL_DOMAIN, NATURAL_DOMAIN};
use crate::model::{ModelParams, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub attack: AttackSpec,
    pub objective: Objective,
    pub seed: u64,
    /// Training-attack budget grows linearly from 0 to `attack.eps` (step
    /// scaled alike) over this many epochs; 0 disables the warm-up.
    pub eps_warmup_epochs: usize,
}

impl TrainConfig {
    /// MNIST settings: 100 epochs, batch 128, lr 0.01 decayed at 55/75/90,
    /// momentum 0.9, ε = 0.3 with 40 steps of 0.01, DIAL_KL with λ = 6, r = 0.1.
    pub fn mnist() -> Self {
        let objective = Objective::Dial(DialConfig::kl());
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_milestones: vec![55, 75, 90],
            attack: AttackSpec {
                inner_loss: default_inner_loss(&objective),
                ..AttackSpec::linf(0.3, 0.01, 40)
            },
            objective,
            seed: 0,
            eps_warmup_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_milestones must be strictly increasing, got {:?}", self.lr_milestones));
        }
        self.attack.validate()?;
        if let Objective::Dial(cfg) = &self.objective {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// KL for the KL-regularized objectives, CE otherwise.
pub fn default_inner_loss(objective: &Objective) -> InnerLoss {
    match objective {
        Objective::Dial(DialConfig {
            variant: DialVariant::Kl,
            ..
        })
        | Objective::Trades { .. } => InnerLoss::Kl,
        _ => InnerLoss::Ce,
    }
}

/// `lr0 / 10^k` where `k` counts the milestones at or before `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = config.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    config.lr0 / 10f64.powi(k as i32)
}

/// Training attack at fractional epoch `at` (epoch + batch fraction).
pub fn attack_at(at: f64, config: &TrainConfig) -> AttackSpec {
    if config.eps_warmup_epochs == 0 {
        return config.attack;
    }
    let f = (at / config.eps_warmup_epochs as f64).min(1.0);
    AttackSpec {
        eps: config.attack.eps * f,
        step: config.attack.step * f,
        ..config.attack
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocities: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        OptimizerState {
            velocities: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            steps: 0,
        }
    }
}

/// `v ← m·v + g + wd·θ` (no decay on biases), `θ ← θ - lr·v`. Missing
/// gradients count as zero.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocities.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer step over {} parameters with {} gradients and {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    let (lr, m) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        p.value.expect_same_shape(v, "sgd velocity")?;
        if let Some(g) = g {
            p.value.expect_same_shape(g, "sgd gradient")?;
        }
        let wd = if p.is_bias() { T::zero() } else { T::from_f64_lossy(weight_decay) };
        let theta = p.value.data_mut();
        let vel = v.data_mut();
        for i in 0..theta.len() {
            let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
            vel[i] = m * vel[i] + gi + wd * theta[i];
            theta[i] = theta[i] - lr * vel[i];
        }
    }
    state.steps += 1;
    Ok(())
}

/// Per-epoch means plus held-out metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub r_t: f64,
    pub loss: LossBreakdown,
    pub train_nat_acc: f64,
    pub train_rob_acc: f64,
    /// Domain-head accuracy on the validation (natural, adversarial) pairs.
    pub domain_acc: f64,
    pub val_nat_acc: f64,
    pub val_rob_acc: f64,
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const VAL_STREAM: u64 = 1 << 40;

/// Training state that can be advanced one epoch at a time.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f32> {
    pub config: TrainConfig,
    pub model: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Parameters of the epoch with the highest validation robust accuracy.
    pub best: Option<(usize, f64, ModelParams<T>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, model: ModelParams<T>) -> Result<Self> {
        let optimizer = OptimizerState::new(model.params());
        Self::resume(config, model, optimizer, 0)
    }

    /// Continues from `epoch` completed epochs.
    pub fn resume(config: TrainConfig, model: ModelParams<T>, optimizer: OptimizerState<T>, epoch: usize) -> Result<Self> {
        config.validate()?;
        if optimizer.velocities.len() != model.params().len() {
            return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
        }
        if epoch > config.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {epoch}, beyond the configured {} epochs",
                config.epochs
            )));
        }
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn check_data(&self, data: &Split<T>) -> Result<()> {
        let arch = self.model.arch();
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if data.x.shape()[1..] != arch.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "train",
                lhs: data.x.shape()[1..].to_vec(),
                rhs: arch.input_shape.clone(),
            });
        }
        if let Some(&label) = data.y.iter().find(|&&l| l >= arch.num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: arch.num_classes,
            });
        }
        Ok(())
    }

    /// Runs one epoch over `train` and scores `val`; returns its record.
    pub fn run_epoch(&mut self, train: &Split<T>, val: &Split<T>) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::InvalidArgument("all configured epochs are complete".into()));
        }
        self.check_data(train)?;
        let epoch = self.epoch;
        let cfg = self.config.clone();
        let progress = epoch as f64 / cfg.epochs as f64;
        let lr = lr_at(epoch, &cfg);
        let mut rng = stream(cfg.seed, epoch as u64 + 1);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let (mut nat_correct, mut rob_correct) = (0usize, 0usize);
        let mut r_t = 0.0;
        let num_batches = train.len().div_ceil(cfg.batch_size);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let b = train.select(idx)?;
            let x_adv = if cfg.objective.needs_adversary() {
                let spec = attack_at(epoch as f64 + (batch + 1) as f64 / num_batches as f64, &cfg);
                pgd_attack(&self.model, &b.x, &b.y, &spec, &mut rng).map_err(|e| match e {
                    Error::AttackNonFinite { .. } | Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                    other => other,
                })?
            } else {
                b.x.clone()
            };
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, true);
            let numeric = |e: Error| if e.is_numerical() { Error::NonFiniteLoss { epoch, batch } } else { e };
            let graph = loss::assemble(&cfg.objective, &mut tape, &self.model, &bound, &b.x, &b.y, &x_adv, progress)
                .map_err(numeric)?;
            if !graph.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let grads = tape.backward(graph.objective).map_err(numeric)?;
            let g: Vec<Option<Tensor<T>>> = bound.vars().iter().map(|v| grads.wrt(*v).cloned()).collect();
            sgd_momentum_step(self.model.params_mut(), &g, &mut self.optimizer, lr, cfg.momentum, cfg.weight_decay)?;

            let w = b.len() as f64;
            let l = graph.breakdown;
            sums.nat_label += w * l.nat_label;
            sums.rob += w * l.rob;
            sums.nat_domain += w * l.nat_domain;
            sums.adv_domain += w * l.adv_domain;
            sums.lambda = l.lambda;
            r_t = l.r_t;
            if let Some(z) = graph.nat_logits {
                nat_correct += count_correct(tape.value(z)?, &b.y);
            }
            if let Some(z) = graph.adv_logits {
                rob_correct += count_correct(tape.value(z)?, &b.y);
            }
        }
        let n = train.len() as f64;
        let mut mean = LossBreakdown {
            nat_label: sums.nat_label / n,
            rob: sums.rob / n,
            nat_domain: sums.nat_domain / n,
            adv_domain: sums.adv_domain / n,
            lambda: sums.lambda,
            r_t,
            total: 0.0,
        };
        mean.total = mean.recomputed_total();

        let (val_nat_acc, val_rob_acc, domain_acc) = self.validate_split(val, epoch)?;
        self.epoch += 1;
        if !val.is_empty() && self.best.as_ref().is_none_or(|(_, acc, _)| val_rob_acc > *acc) {
            self.best = Some((epoch, val_rob_acc, self.model.clone()));
        }
        self.history.push(EpochRecord {
            epoch,
            lr,
            r_t,
            loss: mean,
            train_nat_acc: nat_correct as f64 / n,
            train_rob_acc: rob_correct as f64 / n,
            domain_acc,
            val_nat_acc,
            val_rob_acc,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Natural and robust accuracy on `val` under the training attack, and
    /// the domain head's accuracy at telling the two apart.
    fn validate_split(&self, val: &Split<T>, epoch: usize) -> Result<(f64, f64, f64)> {
        if val.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }
        let mut rng = stream(self.config.seed, VAL_STREAM + epoch as u64);
        let (mut nat, mut rob, mut dom) = (0usize, 0usize, 0usize);
        for start in (0..val.len()).step_by(self.config.batch_size.max(1)) {
            let end = (start + self.config.batch_size).min(val.len());
            let b = val.range(start, end)?;
            let x_adv = pgd_attack(&self.model, &b.x, &b.y, &self.config.attack, &mut rng)?;
            let nat_out = self.model.outputs(&b.x)?;
            let adv_out = self.model.outputs(&x_adv)?;
            nat += count_correct(&nat_out.logits, &b.y);
            rob += count_correct(&adv_out.logits, &b.y);
            dom += nat_out.domain.argmax_rows().iter().filter(|&&d| d == NATURAL_DOMAIN).count();
            dom += adv_out.domain.argmax_rows().iter().filter(|&&d| d == ADVERSARIAL_DOMAIN).count();
        }
        let n = val.len() as f64;
        Ok((nat as f64 / n, rob as f64 / n, dom as f64 / (2.0 * n)))
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &Split<T>, val: &Split<T>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(y).filter(|(p, t)| p == t).count()
}

/// Accuracy of `model` on a split, batched.
pub fn natural_accuracy<T: Scalar>(model: &ModelParams<T>, split: &Split<T>, batch: usize) -> Result<f64> {
    let mut pred = Vec::with_capacity(split.len());
    for start in (0..split.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(split.len());
        pred.extend(model.predict(&split.x.slice_batch(start, end)?)?.argmax_rows());
    }
    Ok(accuracy(&pred, &split.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Partition;

    fn param(name: &str, v: &[f64]) -> Param<f64> {
        Param {
            name: name.into(),
            partition: Partition::Label,
            value: Tensor::from_vec(v.to_vec()),
        }
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = vec![param("w.weight", &[1.0, -2.0])];
        let mut s = OptimizerState::new(&p);
        let g = vec![Some(Tensor::from_vec(vec![0.5, 0.25]))];
        sgd_momentum_step(&mut p, &g, &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].value.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn velocity_decay() {
        let mut p = vec![param("w.weight", &[0.0])];
        let mut s = OptimizerState {
            velocities: vec![Tensor::from_vec(vec![1.0])],
            steps: 0,
        };
        sgd_momentum_step(&mut p, &[Some(Tensor::from_vec(vec![0.0]))], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert!((s.velocities[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((p[0].value.data()[0] + 0.09).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = vec![param("a.weight", &[2.0]), param("a.bias", &[2.0])];
        let mut s = OptimizerState::new(&p);
        sgd_momentum_step(&mut p, &[None, None], &mut s, 0.5, 0.0, 0.1).unwrap();
        assert_eq!(p[0].value.data(), &[2.0 - 0.5 * 0.2]);
        assert_eq!(p[1].value.data(), &[2.0]);
        assert!(sgd_momentum_step(&mut p, &[None], &mut s, 0.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn milestone_schedule() {
        let cfg = TrainConfig::mnist();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(54, &cfg), 0.01);
        assert!((lr_at(60, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_at(95, &cfg) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::mnist();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr_milestones: vec![5, 5], ..ok }.validate().is_err());
    }
}
