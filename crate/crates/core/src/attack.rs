//! Untargeted adversarial examples: FGSM, L∞/L2 PGD and CW-margin PGD.
//!
//! A batch is attacked on one tape per iteration. Every example only sees
//! the gradient of its own loss term, so the result is identical to
//! attacking the examples one by one.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss;
use crate::model::Classifier;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(&self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }
}

/// Objective the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerLoss {
    Ce,
    /// `KL(model(x_t) ‖ model(x))`.
    Kl,
    CwMargin,
}

impl InnerLoss {
    pub fn name(&self) -> &'static str {
        match self {
            InnerLoss::Ce => "ce",
            InnerLoss::Kl => "kl",
            InnerLoss::CwMargin => "cw_margin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub norm: Norm,
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub random_start: bool,
    pub inner_loss: InnerLoss,
    pub lo: f64,
    pub hi: f64,
}

impl AttackSpec {
    /// L∞ PGD with CE, random start, pixel range `[0, 1]`.
    pub fn linf(eps: f64, step: f64, iters: usize) -> Self {
        AttackSpec {
            norm: Norm::Linf,
            eps,
            step,
            iters,
            random_start: true,
            inner_loss: InnerLoss::Ce,
            lo: 0.0,
            hi: 1.0,
        }
    }

    pub fn l2(eps: f64, step: f64, iters: usize) -> Self {
        AttackSpec {
            norm: Norm::L2,
            ..Self::linf(eps, step, iters)
        }
    }

    /// The single sign step FGSM takes.
    pub fn fgsm(eps: f64) -> Self {
        AttackSpec {
            random_start: false,
            ..Self::linf(eps, eps, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("attack eps must be >= 0, got {}", self.eps));
        }
        if !self.step.is_finite() || self.step < 0.0 || (self.step == 0.0 && self.iters > 0 && self.eps > 0.0) {
            return bad(format!("attack step must be > 0, got {}", self.step));
        }
        if !(self.lo < self.hi) {
            return bad(format!("attack range needs lo < hi, got [{}, {}]", self.lo, self.hi));
        }
        Ok(())
    }
}

/// Number of examples and their length; rank-1 tensors count as one example.
fn rows<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    if t.rank() >= 2 {
        (t.batch_len(), t.example_len())
    } else {
        (1, t.len())
    }
}

/// Clamps `x_adv` into the L∞ ball of radius `eps` around `x0`, then into `[lo, hi]`.
pub fn project_linf<T: Scalar>(x_adv: &Tensor<T>, x0: &Tensor<T>, eps: f64, lo: f64, hi: f64) -> Result<Tensor<T>> {
    let (eps, lo, hi) = (T::from_f64_lossy(eps), T::from_f64_lossy(lo), T::from_f64_lossy(hi));
    x_adv.zip_map(x0, "project_linf", |a, o| a.max(o - eps).min(o + eps).max(lo).min(hi))
}

/// Rescales each example's delta to L2 norm `eps` when it is longer, then
/// clamps into `[lo, hi]`.
pub fn project_l2<T: Scalar>(x_adv: &Tensor<T>, x0: &Tensor<T>, eps: f64, lo: f64, hi: f64) -> Result<Tensor<T>> {
    x_adv.expect_same_shape(x0, "project_l2")?;
    let (n, len) = rows(x0);
    let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
    let mut out = x_adv.clone();
    let data = out.data_mut();
    for i in 0..n {
        let span = i * len..(i + 1) * len;
        let base = &x0.data()[span.clone()];
        let row = &mut data[span];
        let norm = row
            .iter()
            .zip(base)
            .map(|(a, o)| (*a - *o).to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > eps { T::from_f64_lossy(eps / norm) } else { T::one() };
        for (a, o) in row.iter_mut().zip(base) {
            *a = (*o + (*a - *o) * scale).max(lo).min(hi);
        }
    }
    Ok(out)
}

fn project<T: Scalar>(x_adv: &Tensor<T>, x0: &Tensor<T>, spec: &AttackSpec) -> Result<Tensor<T>> {
    match spec.norm {
        Norm::Linf => project_linf(x_adv, x0, spec.eps, spec.lo, spec.hi),
        Norm::L2 => project_l2(x_adv, x0, spec.eps, spec.lo, spec.hi),
    }
}

/// Uniform start in the feasible set. For L∞ the ball ∩ range is a box and
/// each coordinate is drawn from its interval; for L2 a point is drawn
/// uniformly from the ball and then range-clamped.
fn random_start<T: Scalar>(x: &Tensor<T>, spec: &AttackSpec, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if spec.eps == 0.0 {
        return Ok(x.clone());
    }
    match spec.norm {
        Norm::Linf => {
            let mut out = x.clone();
            for v in out.data_mut() {
                let c = v.to_f64().unwrap_or(f64::NAN);
                let (a, b) = ((c - spec.eps).max(spec.lo), (c + spec.eps).min(spec.hi));
                *v = T::from_f64_lossy(if a < b { rng.gen_range(a..=b) } else { a });
            }
            Ok(out)
        }
        Norm::L2 => {
            let (n, len) = rows(x);
            let mut out = x.clone();
            let data = out.data_mut();
            for i in 0..n {
                let dir: Vec<f64> = (0..len).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let radius = spec.eps * rng.gen::<f64>().powf(1.0 / len as f64);
                for (v, d) in data[i * len..(i + 1) * len].iter_mut().zip(&dir) {
                    *v = *v + T::from_f64_lossy(radius * d / norm);
                }
            }
            project(&out, x, spec)
        }
    }
}

/// Per-example inner loss at `x_t`, shape `[n]`.
fn inner_loss<T: Scalar, M: Classifier<T> + ?Sized>(
    tape: &mut Tape<T>,
    model: &M,
    xv: Var,
    y: &[usize],
    nat_logits: Option<&Tensor<T>>,
    kind: InnerLoss,
) -> Result<Var> {
    let z = model.logits(tape, xv)?;
    match kind {
        InnerLoss::Ce => loss::cross_entropy_per_example(tape, z, y),
        InnerLoss::CwMargin => loss::cw_margin_per_example(tape, z, y),
        InnerLoss::Kl => {
            let nat = tape.constant(nat_logits.expect("natural logits for KL").clone());
            loss::kl_div_per_example(tape, z, nat)
        }
    }
}

/// Gradient of the summed per-example inner loss w.r.t. the input.
fn input_gradient<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x_t: &Tensor<T>,
    y: &[usize],
    nat_logits: Option<&Tensor<T>>,
    kind: InnerLoss,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x_t.clone());
    let per = inner_loss(&mut tape, model, xv, y, nat_logits, kind)?;
    let total = tape.sum(per)?;
    let grads = tape.backward(total)?;
    Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x_t.shape())))
}

/// Finds the first example whose inner loss is not finite.
fn offending_example<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x_t: &Tensor<T>,
    y: &[usize],
    nat_logits: Option<&Tensor<T>>,
    kind: InnerLoss,
) -> usize {
    for i in 0..y.len() {
        let nat = nat_logits.map(|n| n.slice_batch(i, i + 1)).transpose();
        let (Ok(xi), Ok(nat)) = (x_t.slice_batch(i, i + 1), nat) else {
            return i;
        };
        let mut tape = Tape::new();
        let xv = tape.input(xi);
        if inner_loss(&mut tape, model, xv, &y[i..=i], nat.as_ref(), kind).is_err() {
            return i;
        }
    }
    0
}

fn check_labels<T: Scalar>(x: &Tensor<T>, y: &[usize]) -> Result<()> {
    if x.rank() < 2 || x.batch_len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "attack labels",
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    Ok(())
}

/// Projected gradient ascent on the inner loss, starting from `x` or from a
/// random feasible point. Model parameters are only read.
pub fn pgd_attack<T: Scalar, M: Classifier<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_labels(x, y)?;
    let nat_logits = match spec.inner_loss {
        InnerLoss::Kl => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let z = model.logits(&mut tape, xv)?;
            Some(tape.value(z)?.clone())
        }
        _ => None,
    };
    let mut x_t = if spec.random_start {
        random_start(x, spec, rng)?
    } else {
        x.clone()
    };
    let (n, len) = rows(x);
    let step = T::from_f64_lossy(spec.step);
    for iteration in 0..spec.iters {
        let grad = match input_gradient(model, &x_t, y, nat_logits.as_ref(), spec.inner_loss) {
            Ok(g) => g,
            Err(e) if e.is_numerical() => {
                let example = offending_example(model, &x_t, y, nat_logits.as_ref(), spec.inner_loss);
                return Err(Error::AttackNonFinite { example, iteration });
            }
            Err(e) => return Err(e),
        };
        let data = x_t.data_mut();
        match spec.norm {
            Norm::Linf => {
                for (v, g) in data.iter_mut().zip(grad.data()) {
                    if *g > T::zero() {
                        *v = *v + step;
                    } else if *g < T::zero() {
                        *v = *v - step;
                    }
                }
            }
            Norm::L2 => {
                for i in 0..n {
                    let g = &grad.data()[i * len..(i + 1) * len];
                    let norm = g.iter().map(|v| (*v * *v).to_f64().unwrap_or(0.0)).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let scale = T::from_f64_lossy(spec.step / norm);
                    for (v, gi) in data[i * len..(i + 1) * len].iter_mut().zip(g) {
                        *v = *v + *gi * scale;
                    }
                }
            }
        }
        x_t = project(&x_t, x, spec)?;
    }
    Ok(x_t)
}

/// One L∞ sign step of size `eps` on the CE loss, no random start.
pub fn fgsm<T: Scalar, M: Classifier<T> + ?Sized>(model: &M, x: &Tensor<T>, y: &[usize], eps: f64) -> Result<Tensor<T>> {
    // the rng is never consulted without a random start
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    pgd_attack(model, x, y, &AttackSpec::fgsm(eps), &mut rng)
}

/// Margin `max_{i≠y} z_i - z_y` of every row of a logit batch.
pub fn cw_margins<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Vec<f64>> {
    let (n, k) = rows(logits);
    if n != y.len() {
        return Err(Error::ShapeMismatch {
            op: "cw_margin",
            lhs: logits.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let z = logits.to_f64_vec();
    (0..n).map(|i| loss::cw_margin(&z[i * k..(i + 1) * k], y[i])).collect()
}
