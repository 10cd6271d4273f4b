//! Training objectives: natural/robust label losses, domain losses, the
//! DIAL composite and the AT / TRADES / MART baselines. All terms are batch
//! means.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// Domain label of natural inputs.
pub const NATURAL_DOMAIN: usize = 0;
/// Domain label of adversarial inputs.
pub const ADVERSARIAL_DOMAIN: usize = 1;

/// Guard inside `log(1 - p)` so a saturated probability stays finite.
const LOG_GUARD: f64 = 1e-12;

fn class_count<T: Scalar>(tape: &Tape<T>, logits: Var, op: &'static str) -> Result<usize> {
    match tape.value(logits)?.shape() {
        [_, k] if *k >= 2 => Ok(*k),
        other => Err(Error::InvalidShape {
            op,
            msg: format!("need [batch, classes >= 2] logits, got {other:?}"),
        }),
    }
}

/// `-log softmax(logits)[y]` per example, shape `[n]`.
pub fn cross_entropy_per_example<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    class_count(tape, logits, "cross_entropy")?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, labels)?;
    tape.neg(picked)
}

pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_example(tape, logits, labels)?;
    tape.mean(per)
}

/// `KL(softmax(adv) ‖ softmax(nat))` per example, shape `[n]`.
pub fn kl_div_per_example<T: Scalar>(tape: &mut Tape<T>, adv_logits: Var, nat_logits: Var) -> Result<Var> {
    let (a, n) = (tape.value(adv_logits)?.shape(), tape.value(nat_logits)?.shape());
    if a != n {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: a.to_vec(),
            rhs: n.to_vec(),
        });
    }
    class_count(tape, adv_logits, "kl_div")?;
    let log_adv = tape.log_softmax(adv_logits)?;
    let log_nat = tape.log_softmax(nat_logits)?;
    let p_adv = tape.softmax(adv_logits)?;
    let diff = tape.sub(log_adv, log_nat)?;
    let terms = tape.mul(p_adv, diff)?;
    tape.sum_rows(terms)
}

pub fn kl_div<T: Scalar>(tape: &mut Tape<T>, adv_logits: Var, nat_logits: Var) -> Result<Var> {
    let per = kl_div_per_example(tape, adv_logits, nat_logits)?;
    tape.mean(per)
}

/// Boosted cross-entropy: `-log p_y - log(1 - max_{i≠y} p_i)`, batch mean.
pub fn boosted_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let nll = cross_entropy_per_example(tape, logits, labels)?;
    let probs = tape.softmax(logits)?;
    let runner_up = tape.max_other(probs, labels)?;
    let neg = tape.neg(runner_up)?;
    let complement = tape.add_scalar(neg, T::one())?;
    let guarded = tape.add_scalar(complement, T::from_f64_lossy(LOG_GUARD))?;
    let log_c = tape.log(guarded)?;
    let per = tape.sub(nll, log_c)?;
    tape.mean(per)
}

/// `max_{i≠y} z_i - z_y` per example, shape `[n]`. Positive iff misclassified
/// (ties aside).
pub fn cw_margin_per_example<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    class_count(tape, logits, "cw_margin")?;
    let other = tape.max_other(logits, labels)?;
    let own = tape.pick(logits, labels)?;
    tape.sub(other, own)
}

/// Off-tape margin of one logit row.
pub fn cw_margin(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cw_margin needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(other - logits[label])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DialVariant {
    Ce,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// `r_max · (2 / (1 + e^{-10p}) - 1)`.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DialConfig {
    pub variant: DialVariant,
    /// Weight of the robust label term.
    pub lambda: f64,
    pub r_max: f64,
    pub schedule: Schedule,
}

impl DialConfig {
    pub fn ce() -> Self {
        DialConfig {
            variant: DialVariant::Ce,
            lambda: 1.0,
            r_max: 0.1,
            schedule: Schedule::Ramp,
        }
    }

    pub fn kl() -> Self {
        DialConfig {
            variant: DialVariant::Kl,
            lambda: 6.0,
            ..Self::ce()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.r_max >= 0.0 && self.r_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reversal ratio must be >= 0, got {}",
                self.r_max
            )));
        }
        Ok(())
    }
}

/// Reversal ratio at training progress `p ∈ [0, 1]`.
pub fn reversal_schedule(progress: f64, cfg: &DialConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::InvalidArgument(format!("progress {progress} outside [0, 1]")));
    }
    Ok(match cfg.schedule {
        Schedule::Constant => cfg.r_max,
        Schedule::Ramp => cfg.r_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
    })
}

/// Scalar values of the objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nat_label: f64,
    pub rob: f64,
    pub nat_domain: f64,
    pub adv_domain: f64,
    pub lambda: f64,
    pub r_t: f64,
    /// `nat_label + lambda·rob - r_t·(nat_domain + adv_domain)`.
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(nat_label: f64, rob: f64, nat_domain: f64, adv_domain: f64, lambda: f64, r_t: f64) -> Self {
        LossBreakdown {
            nat_label,
            rob,
            nat_domain,
            adv_domain,
            lambda,
            r_t,
            total: nat_label + lambda * rob - r_t * (nat_domain + adv_domain),
        }
    }

    /// Recomputes `total` from the stored terms.
    pub fn recomputed_total(&self) -> f64 {
        self.nat_label + self.lambda * self.rob - self.r_t * (self.nat_domain + self.adv_domain)
    }
}

/// A recorded objective: `objective` is the node to back-propagate; the
/// logits are kept for accuracy bookkeeping.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub objective: Var,
    pub breakdown: LossBreakdown,
    pub nat_logits: Option<Var>,
    pub adv_logits: Option<Var>,
    pub nat_domain_logits: Var,
    pub adv_domain_logits: Var,
}

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    Ok(tape.value(v)?.item().to_f64().unwrap_or(f64::NAN))
}

fn check_batch<T: Scalar>(x: &Tensor<T>, x_adv: &Tensor<T>, labels: &[usize]) -> Result<()> {
    x.expect_same_shape(x_adv, "adversarial batch")?;
    if x.batch_len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Domain cross-entropies on precomputed features, each behind a reversal
/// node with ratio `r_t`. Returns `(natural, adversarial)` mean losses and
/// the two domain-logit nodes.
pub fn domain_loss_from_features<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    nat_features: Var,
    adv_features: Var,
    r_t: f64,
) -> Result<[Var; 4]> {
    let r = T::from_f64_lossy(r_t);
    let dn = model.forward_domain(tape, bound, nat_features, r)?;
    let da = model.forward_domain(tape, bound, adv_features, r)?;
    let n_nat = tape.value(dn)?.batch_len();
    let n_adv = tape.value(da)?.batch_len();
    let nat = cross_entropy(tape, dn, &vec![NATURAL_DOMAIN; n_nat])?;
    let adv = cross_entropy(tape, da, &vec![ADVERSARIAL_DOMAIN; n_adv])?;
    Ok([nat, adv, dn, da])
}

/// Natural (label 0) and adversarial (label 1) domain losses.
pub fn domain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x_nat: &Tensor<T>,
    x_adv: &Tensor<T>,
    r_t: f64,
) -> Result<(Var, Var)> {
    x_nat.expect_same_shape(x_adv, "domain_loss")?;
    let xn = tape.constant(x_nat.clone());
    let xa = tape.constant(x_adv.clone());
    let fnat = model.forward_features(tape, bound, xn)?;
    let fadv = model.forward_features(tape, bound, xa)?;
    let [nat, adv, ..] = domain_loss_from_features(tape, model, bound, fnat, fadv, r_t)?;
    Ok((nat, adv))
}

/// Label logits for a batch placed on the tape.
pub fn label_logits<T: Scalar>(tape: &mut Tape<T>, model: &ModelParams<T>, bound: &Bound, x: &Tensor<T>) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let f = model.forward_features(tape, bound, xv)?;
    model.forward_label(tape, bound, f)
}

/// AT: `CE(G(x'), y)`.
pub fn at_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x_adv: &Tensor<T>,
    labels: &[usize],
) -> Result<Var> {
    let za = label_logits(tape, model, bound, x_adv)?;
    cross_entropy(tape, za, labels)
}

/// TRADES: `CE(G(x), y) + λ·KL(G(x') ‖ G(x))`.
pub fn trades_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x: &Tensor<T>,
    labels: &[usize],
    x_adv: &Tensor<T>,
    lambda: f64,
) -> Result<Var> {
    check_batch(x, x_adv, labels)?;
    let zn = label_logits(tape, model, bound, x)?;
    let za = label_logits(tape, model, bound, x_adv)?;
    let ce = cross_entropy(tape, zn, labels)?;
    let kl = kl_div(tape, za, zn)?;
    let kl = tape.scale(kl, T::from_f64_lossy(lambda))?;
    tape.add(ce, kl)
}

/// MART: `BCE(G(x'), y) + λ·KL(G(x') ‖ G(x))·(1 - G(x)_y)`.
pub fn mart_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x: &Tensor<T>,
    labels: &[usize],
    x_adv: &Tensor<T>,
    lambda: f64,
) -> Result<Var> {
    check_batch(x, x_adv, labels)?;
    let zn = label_logits(tape, model, bound, x)?;
    let za = label_logits(tape, model, bound, x_adv)?;
    let (bce, weighted) = mart_terms(tape, zn, za, labels)?;
    let weighted = tape.scale(weighted, T::from_f64_lossy(lambda))?;
    tape.add(bce, weighted)
}

/// `(BCE(adv), mean(KL·(1 - p_nat_y)))`.
fn mart_terms<T: Scalar>(tape: &mut Tape<T>, zn: Var, za: Var, labels: &[usize]) -> Result<(Var, Var)> {
    let bce = boosted_cross_entropy(tape, za, labels)?;
    let kl = kl_div_per_example(tape, za, zn)?;
    let p_nat = tape.softmax(zn)?;
    let p_true = tape.pick(p_nat, labels)?;
    let neg = tape.neg(p_true)?;
    let weight = tape.add_scalar(neg, T::one())?;
    let weighted = tape.mul(kl, weight)?;
    let weighted = tape.mean(weighted)?;
    Ok((bce, weighted))
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Dial(DialConfig),
    At,
    Trades { lambda: f64 },
    Mart { lambda: f64 },
    Natural,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Dial(c) if c.variant == DialVariant::Ce => "dial_ce",
            Objective::Dial(_) => "dial_kl",
            Objective::At => "at",
            Objective::Trades { .. } => "trades",
            Objective::Mart { .. } => "mart",
            Objective::Natural => "natural",
        }
    }

    pub fn needs_adversary(&self) -> bool {
        !matches!(self, Objective::Natural)
    }
}

/// DIAL composite. The recorded objective is
/// `nat + λ·rob + nat_domain + adv_domain` with the domain terms behind
/// reversal nodes of ratio `r_t`: the domain head descends the domain loss
/// while the feature extractor receives `-r_t` times its gradient, which is
/// the minimization of `nat + λ·rob - r_t·(nat_domain + adv_domain)` with
/// respect to the label path.
#[allow(clippy::too_many_arguments)]
pub fn dial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x: &Tensor<T>,
    labels: &[usize],
    x_adv: &Tensor<T>,
    cfg: &DialConfig,
    progress: f64,
) -> Result<LossGraph> {
    cfg.validate()?;
    check_batch(x, x_adv, labels)?;
    let r_t = reversal_schedule(progress, cfg)?;
    let xn = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let fnat = model.forward_features(tape, bound, xn)?;
    let fadv = model.forward_features(tape, bound, xa)?;
    let zn = model.forward_label(tape, bound, fnat)?;
    let za = model.forward_label(tape, bound, fadv)?;
    let nat = cross_entropy(tape, zn, labels)?;
    let rob = match cfg.variant {
        DialVariant::Ce => cross_entropy(tape, za, labels)?,
        DialVariant::Kl => kl_div(tape, za, zn)?,
    };
    let [nd, ad, dn, da] = domain_loss_from_features(tape, model, bound, fnat, fadv, r_t)?;

    let weighted = tape.scale(rob, T::from_f64_lossy(cfg.lambda))?;
    let label_part = tape.add(nat, weighted)?;
    let domain_part = tape.add(nd, ad)?;
    let objective = tape.add(label_part, domain_part)?;
    let breakdown = LossBreakdown::assemble(
        scalar(tape, nat)?,
        scalar(tape, rob)?,
        scalar(tape, nd)?,
        scalar(tape, ad)?,
        cfg.lambda,
        r_t,
    );
    Ok(LossGraph {
        objective,
        breakdown,
        nat_logits: Some(zn),
        adv_logits: Some(za),
        nat_domain_logits: dn,
        adv_domain_logits: da,
    })
}

/// Records `objective` for one batch. Non-DIAL objectives still train the
/// domain head, on detached features, so its accuracy can be tracked as a
/// probe without touching the feature extractor.
#[allow(clippy::too_many_arguments)]
pub fn assemble<T: Scalar>(
    objective: &Objective,
    tape: &mut Tape<T>,
    model: &ModelParams<T>,
    bound: &Bound,
    x: &Tensor<T>,
    labels: &[usize],
    x_adv: &Tensor<T>,
    progress: f64,
) -> Result<LossGraph> {
    let (lambda, lam) = match *objective {
        Objective::Dial(cfg) => return dial_loss(tape, model, bound, x, labels, x_adv, &cfg, progress),
        Objective::Trades { lambda } | Objective::Mart { lambda } => (lambda, T::from_f64_lossy(lambda)),
        Objective::At | Objective::Natural => (1.0, T::one()),
    };
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    check_batch(x, x_adv, labels)?;
    let xn = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let fnat = model.forward_features(tape, bound, xn)?;
    let fadv = model.forward_features(tape, bound, xa)?;
    let zn = model.forward_label(tape, bound, fnat)?;
    let za = model.forward_label(tape, bound, fadv)?;
    let (first, rob) = match objective {
        Objective::At => (None, cross_entropy(tape, za, labels)?),
        Objective::Natural => (Some(cross_entropy(tape, zn, labels)?), tape.constant(Tensor::scalar(T::zero()))),
        Objective::Trades { .. } => (Some(cross_entropy(tape, zn, labels)?), kl_div(tape, za, zn)?),
        Objective::Mart { .. } => {
            let (bce, weighted) = mart_terms(tape, zn, za, labels)?;
            (Some(bce), weighted)
        }
        Objective::Dial(_) => unreachable!(),
    };
    let weighted = tape.scale(rob, lam)?;
    let label_part = match first {
        Some(f) => tape.add(f, weighted)?,
        None => weighted,
    };
    let fnat_probe = tape.constant(tape.value(fnat)?.clone());
    let fadv_probe = tape.constant(tape.value(fadv)?.clone());
    let [nd, ad, dn, da] = domain_loss_from_features(tape, model, bound, fnat_probe, fadv_probe, 0.0)?;
    let domain_part = tape.add(nd, ad)?;
    let total = tape.add(label_part, domain_part)?;
    let breakdown = LossBreakdown::assemble(
        match first {
            Some(f) => scalar(tape, f)?,
            None => 0.0,
        },
        scalar(tape, rob)?,
        scalar(tape, nd)?,
        scalar(tape, ad)?,
        lambda,
        0.0,
    );
    Ok(LossGraph {
        objective: total,
        breakdown,
        nat_logits: Some(zn),
        adv_logits: Some(za),
        nat_domain_logits: dn,
        adv_domain_logits: da,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ce_of(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![logits.len() / k, k], logits.to_vec()).unwrap());
        let l = cross_entropy(&mut tape, z, labels).unwrap();
        tape.value(l).unwrap().item()
    }

    #[test]
    fn cross_entropy_examples() {
        assert_abs_diff_eq!(ce_of(&[0.0; 10], 10, &[3]), 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ce_of(&[10.0, -10.0], 2, &[0]), 2.061e-9, epsilon = 1e-12);
        // -log(e^3 / (e + e^2 + e^3))
        assert_abs_diff_eq!(ce_of(&[1.0, 2.0, 3.0], 3, &[2]), 0.407606, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            cross_entropy(&mut tape, z, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let one = tape.constant(Tensor::zeros(&[2, 1]));
        assert!(cross_entropy(&mut tape, one, &[0, 0]).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap());
        let n = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let kl = kl_div(&mut tape, a, n).unwrap();
        assert_abs_diff_eq!(tape.value(kl).unwrap().item(), 0.130812, epsilon = 1e-6);
        let same = kl_div(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).unwrap().item(), 0.0);
    }

    #[test]
    fn boosted_cross_entropy_examples() {
        let bce = |logits: Vec<f64>, y: usize| {
            let mut tape = Tape::<f64>::new();
            let k = logits.len();
            let z = tape.constant(Tensor::new(vec![1, k], logits).unwrap());
            let l = boosted_cross_entropy(&mut tape, z, &[y]).unwrap();
            tape.value(l).unwrap().item()
        };
        assert_abs_diff_eq!(bce(vec![0.0, 0.0], 0), 2.0 * 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(bce(vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()], 0), 0.579818, epsilon = 1e-6);
        assert!(bce(vec![30.0, 0.0, 0.0], 0) < 1e-9);
    }

    #[test]
    fn cw_margin_examples() {
        assert_eq!(cw_margin(&[2.0, 1.0, 0.0], 0).unwrap(), -1.0);
        assert_eq!(cw_margin(&[0.0, 0.0], 0).unwrap(), 0.0);
        assert!(cw_margin(&[1.0], 0).is_err());
    }

    #[test]
    fn schedule_examples() {
        let ramp = DialConfig {
            r_max: 2.0,
            ..DialConfig::ce()
        };
        assert_eq!(reversal_schedule(0.0, &ramp).unwrap(), 0.0);
        assert_abs_diff_eq!(reversal_schedule(1.0, &ramp).unwrap(), 0.99991 * 2.0, epsilon = 2e-3);
        let constant = DialConfig {
            schedule: Schedule::Constant,
            ..ramp
        };
        assert_eq!(reversal_schedule(0.37, &constant).unwrap(), 2.0);
        assert!(reversal_schedule(1.5, &ramp).is_err());
        assert!(reversal_schedule(-0.1, &ramp).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DialConfig { lambda: -1.0, ..DialConfig::ce() }.validate().is_err());
        assert!(DialConfig { r_max: -0.5, ..DialConfig::kl() }.validate().is_err());
        assert_eq!(DialConfig::kl().lambda, 6.0);
        assert_eq!(DialConfig::ce().lambda, 1.0);
    }
}
