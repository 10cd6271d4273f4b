//! Robustness and invariance measurements.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attack::{pgd_attack, AttackSpec};
use crate::checkpoint::write_atomic;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::{ADVERSARIAL_DOMAIN, NATURAL_DOMAIN};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

/// `tr / (tr + (fr + fn) / 2)`.
pub fn f1_robust(true_robust: usize, false_robust: usize, false_natural: usize) -> Result<f64> {
    let tr = true_robust as f64;
    let denom = tr + 0.5 * (false_robust as f64 + false_natural as f64);
    if true_robust + false_robust + false_natural == 0 {
        return Err(Error::InvalidArgument("f1_robust: all counts are zero".into()));
    }
    Ok(tr / denom)
}

/// An attack with a display name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedAttack {
    pub name: String,
    pub spec: AttackSpec,
}

impl NamedAttack {
    pub fn new(name: impl Into<String>, spec: AttackSpec) -> Self {
        NamedAttack { name: name.into(), spec }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub name: String,
    pub spec: AttackSpec,
    pub robust_acc: f64,
    pub f1_robust: f64,
    /// Adversarial examples classified correctly.
    pub true_robust: usize,
    /// Adversarial examples misclassified.
    pub false_robust: usize,
    /// Natural examples misclassified.
    pub false_natural: usize,
    pub per_class_robust: Vec<f64>,
    /// Domain-head accuracy on the (natural, adversarial) pairs.
    pub domain_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub natural_acc: f64,
    pub per_class_natural: Vec<f64>,
    pub attacks: Vec<AttackResult>,
}

impl EvalReport {
    /// Domain-head accuracy under the first attack, if any.
    pub fn domain_head_acc(&self) -> Option<f64> {
        self.attacks.first().map(|a| a.domain_acc)
    }
}

fn per_class(pred: &[usize], y: &[usize], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(y) {
        total[t] += 1;
        hit[t] += usize::from(p == t);
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
        .collect()
}

fn batches(n: usize, batch: usize) -> impl Iterator<Item = (usize, usize)> {
    let b = batch.max(1);
    (0..n).step_by(b).map(move |s| (s, (s + b).min(n)))
}

/// Adversarial versions of every example of `split`, crafted against `source`.
/// The attack RNG is a fresh ChaCha stream from `seed`.
pub fn craft<T: Scalar>(
    source: &ModelParams<T>,
    split: &Split<T>,
    spec: &AttackSpec,
    seed: u64,
    batch: usize,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for (s, e) in batches(split.len(), batch) {
        let b = split.range(s, e)?;
        parts.push(pgd_attack(source, &b.x, &b.y, spec, &mut rng).map_err(|err| match err {
            Error::AttackNonFinite { example, iteration } => Error::AttackNonFinite {
                example: example + s,
                iteration,
            },
            other => other,
        })?);
    }
    Tensor::concat(&parts)
}

/// Label and domain predictions for a batch of inputs.
fn predictions<T: Scalar>(model: &ModelParams<T>, x: &Tensor<T>, batch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut labels, mut domains) = (Vec::new(), Vec::new());
    for (s, e) in batches(x.batch_len(), batch) {
        let out = model.outputs(&x.slice_batch(s, e)?)?;
        labels.extend(out.logits.argmax_rows());
        domains.extend(out.domain.argmax_rows());
    }
    Ok((labels, domains))
}

fn score<T: Scalar>(
    target: &ModelParams<T>,
    split: &Split<T>,
    attack: &NamedAttack,
    x_adv: &Tensor<T>,
    nat_pred: &[usize],
    nat_domain: &[usize],
    batch: usize,
) -> Result<AttackResult> {
    let (adv_pred, adv_domain) = predictions(target, x_adv, batch)?;
    let true_robust = adv_pred.iter().zip(&split.y).filter(|(p, t)| p == t).count();
    let false_robust = split.len() - true_robust;
    let false_natural = nat_pred.iter().zip(&split.y).filter(|(p, t)| p != t).count();
    let domain_hits = nat_domain.iter().filter(|&&d| d == NATURAL_DOMAIN).count()
        + adv_domain.iter().filter(|&&d| d == ADVERSARIAL_DOMAIN).count();
    Ok(AttackResult {
        name: attack.name.clone(),
        spec: attack.spec,
        robust_acc: true_robust as f64 / split.len() as f64,
        f1_robust: f1_robust(true_robust, false_robust, false_natural)?,
        true_robust,
        false_robust,
        false_natural,
        per_class_robust: per_class(&adv_pred, &split.y, target.arch().num_classes),
        domain_acc: domain_hits as f64 / (2 * split.len()) as f64,
    })
}

/// Natural accuracy plus white-box robust accuracy for each attack.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    split: &Split<T>,
    attacks: &[NamedAttack],
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty dataset".into()));
    }
    let (nat_pred, nat_domain) = predictions(model, &split.x, batch)?;
    let natural_correct = nat_pred.iter().zip(&split.y).filter(|(p, t)| p == t).count();
    let mut results = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let x_adv = craft(model, split, &attack.spec, seed, batch)?;
        results.push(score(model, split, attack, &x_adv, &nat_pred, &nat_domain, batch)?);
    }
    Ok(EvalReport {
        examples: split.len(),
        natural_acc: natural_correct as f64 / split.len() as f64,
        per_class_natural: per_class(&nat_pred, &split.y, model.arch().num_classes),
        attacks: results,
    })
}

/// Transfer attack: examples crafted against `surrogate`, scored on `target`.
pub fn black_box_eval<T: Scalar>(
    surrogate: &ModelParams<T>,
    target: &ModelParams<T>,
    split: &Split<T>,
    attack: &NamedAttack,
    seed: u64,
    batch: usize,
) -> Result<AttackResult> {
    if surrogate.arch().input_shape != target.arch().input_shape {
        return Err(Error::ShapeMismatch {
            op: "black_box_eval",
            lhs: surrogate.arch().input_shape.clone(),
            rhs: target.arch().input_shape.clone(),
        });
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("black_box_eval: empty dataset".into()));
    }
    let x_adv = craft(surrogate, split, &attack.spec, seed, batch)?;
    let (nat_pred, nat_domain) = predictions(target, &split.x, batch)?;
    score(target, split, attack, &x_adv, &nat_pred, &nat_domain, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureScaling {
    /// Raw activations.
    Raw,
    /// Each feature divided by its largest |activation| over both batches
    /// (a non-canonical reading of "scaled" statistics).
    MaxNormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean_diff: Vec<f64>,
    pub std_diff: Vec<f64>,
    pub scaling: FeatureScaling,
}

fn column_stats(data: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in data.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in data.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / (n as f64 - 1.0)).sqrt()).collect();
    (mean, std)
}

/// Per-feature `|mean_nat - mean_adv|` and `|std_nat - std_adv|` over two
/// aligned `[n, d]` activation batches (sample standard deviation).
pub fn feature_invariance<T: Scalar>(
    nat: &Tensor<T>,
    adv: &Tensor<T>,
    scaling: FeatureScaling,
) -> Result<FeatureStats> {
    nat.expect_same_shape(adv, "feature_invariance")?;
    if nat.rank() != 2 || nat.batch_len() < 2 {
        return Err(Error::InvalidShape {
            op: "feature_invariance",
            msg: format!("need [n >= 2, d] activations, got {:?}", nat.shape()),
        });
    }
    let (n, d) = (nat.batch_len(), nat.example_len());
    let (mut a, mut b) = (nat.to_f64_vec(), adv.to_f64_vec());
    if scaling == FeatureScaling::MaxNormalized {
        for j in 0..d {
            let peak = (0..n).map(|i| a[i * d + j].abs().max(b[i * d + j].abs())).fold(0.0, f64::max);
            if peak > 0.0 {
                for i in 0..n {
                    a[i * d + j] /= peak;
                    b[i * d + j] /= peak;
                }
            }
        }
    }
    let (ma, sa) = column_stats(&a, n, d);
    let (mb, sb) = column_stats(&b, n, d);
    Ok(FeatureStats {
        mean_diff: ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).collect(),
        std_diff: sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).collect(),
        scaling,
    })
}

/// [`feature_invariance`] of `model`'s feature extractor on paired inputs.
pub fn model_feature_invariance<T: Scalar>(
    model: &ModelParams<T>,
    x_nat: &Tensor<T>,
    x_adv: &Tensor<T>,
    scaling: FeatureScaling,
) -> Result<FeatureStats> {
    let fn_ = model.outputs(x_nat)?.features;
    let fa = model.outputs(x_adv)?.features;
    feature_invariance(&fn_, &fa, scaling)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Brightness,
    Pixelate,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GaussianNoise,
        Corruption::ImpulseNoise,
        Corruption::Contrast,
        Corruption::Brightness,
        Corruption::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
            Corruption::Pixelate => "pixelate",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{name}`")))
    }

    /// Severity parameter: noise σ, impulse fraction, contrast factor,
    /// brightness shift, or pixelation block size.
    pub fn parameter(&self, severity: usize) -> f64 {
        const GAUSS: [f64; 5] = [0.04, 0.07, 0.10, 0.13, 0.17];
        const IMPULSE: [f64; 5] = [0.01, 0.02, 0.04, 0.06, 0.09];
        const CONTRAST: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
        let s = severity - 1;
        match self {
            Corruption::GaussianNoise => GAUSS[s],
            Corruption::ImpulseNoise => IMPULSE[s],
            Corruption::Contrast => CONTRAST[s],
            Corruption::Brightness => 0.1 * severity as f64,
            Corruption::Pixelate => (severity + 1) as f64,
        }
    }
}

/// Applies a synthetic corruption to every image of `x` (`[n, C, H, W]`, or
/// any `[n, ...]` for the pointwise kinds). Severity 0 is the identity.
pub fn corrupt<T: Scalar>(x: &Tensor<T>, kind: Corruption, severity: usize, seed: u64, lo: f64, hi: f64) -> Result<Tensor<T>> {
    if severity > 5 {
        return Err(Error::InvalidArgument(format!("severity must be in 0..=5, got {severity}")));
    }
    if severity == 0 {
        return Ok(x.clone());
    }
    let p = kind.parameter(severity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = x.to_f64_vec();
    let per = x.example_len();
    match kind {
        Corruption::GaussianNoise => v.iter_mut().for_each(|a| *a += p * rng.sample::<f64, _>(StandardNormal)),
        Corruption::ImpulseNoise => {
            for a in v.iter_mut() {
                if rng.gen::<f64>() < p {
                    *a = if rng.gen::<bool>() { hi } else { lo };
                }
            }
        }
        Corruption::Contrast => {
            for img in v.chunks_mut(per) {
                let mean = img.iter().sum::<f64>() / per as f64;
                img.iter_mut().for_each(|a| *a = (*a - mean) * p + mean);
            }
        }
        Corruption::Brightness => v.iter_mut().for_each(|a| *a += p),
        Corruption::Pixelate => {
            let [_, c, h, w] = x.shape() else {
                return Err(Error::InvalidShape {
                    op: "pixelate",
                    msg: format!("needs [n, C, H, W] images, got {:?}", x.shape()),
                });
            };
            let (c, h, w, block) = (*c, *h, *w, p as usize);
            for plane in v.chunks_mut(h * w).take(x.batch_len() * c) {
                for bi in (0..h).step_by(block) {
                    for bj in (0..w).step_by(block) {
                        let (ei, ej) = ((bi + block).min(h), (bj + block).min(w));
                        let mut sum = 0.0;
                        for i in bi..ei {
                            sum += plane[i * w + bj..i * w + ej].iter().sum::<f64>();
                        }
                        let avg = sum / ((ei - bi) * (ej - bj)) as f64;
                        for i in bi..ei {
                            plane[i * w + bj..i * w + ej].fill(avg);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_f64(x.shape(), &v.iter().map(|a| a.clamp(lo, hi)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Logits,
    Features,
}

/// Writes `id,label,domain,v0,v1,...` rows: every natural example and, when
/// `attack` is given, its adversarial twin (domain 1) right after.
pub fn dump_representations<T: Scalar>(
    model: &ModelParams<T>,
    split: &Split<T>,
    which: Representation,
    attack: Option<&AttackSpec>,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("dump_representations: empty dataset".into()));
    }
    let adv = attack.map(|spec| craft(model, split, spec, seed, 128)).transpose()?;
    let pick = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        for (s, e) in batches(x.batch_len(), 128) {
            let out = model.outputs(&x.slice_batch(s, e)?)?;
            parts.push(match which {
                Representation::Logits => out.logits,
                Representation::Features => out.features,
            });
        }
        Tensor::concat(&parts)
    };
    let nat = pick(&split.x)?;
    let adv = adv.as_ref().map(pick).transpose()?;
    let width = nat.example_len();
    let mut out = String::from("id,label,domain");
    for j in 0..width {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    let row = |out: &mut String, i: usize, domain: usize, v: &[T]| {
        let _ = write!(out, "{i},{},{domain}", split.y[i]);
        for x in v {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    };
    for i in 0..split.len() {
        row(&mut out, i, NATURAL_DOMAIN, nat.example(i));
        if let Some(a) = &adv {
            row(&mut out, i, ADVERSARIAL_DOMAIN, a.example(i));
        }
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// A binary classifier over `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum Hypothesis {
    /// `1` iff `polarity·(x[axis] - threshold) > 0`, with polarity ±1.
    Threshold { axis: usize, threshold: f64, polarity: f64 },
    /// `1` iff `w·x + b > 0`.
    Linear { w: Vec<f64>, b: f64 },
}

impl Hypothesis {
    pub fn predict(&self, x: &[f64]) -> usize {
        let score = match self {
            Hypothesis::Threshold { axis, threshold, polarity } => polarity * (x[*axis] - threshold),
            Hypothesis::Linear { w, b } => w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b,
        };
        usize::from(score > 0.0)
    }
}

/// A finite, nonempty hypothesis family.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet(Vec<Hypothesis>);

impl HypothesisSet {
    pub fn new(hypotheses: Vec<Hypothesis>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::InvalidArgument("hypothesis set is empty".into()));
        }
        Ok(HypothesisSet(hypotheses))
    }

    /// Thresholds on axis 0 at each grid point, in both polarities when `signed`.
    pub fn thresholds(grid: &[f64], signed: bool) -> Result<Self> {
        let polarities: &[f64] = if signed { &[1.0, -1.0] } else { &[1.0] };
        Self::new(
            grid.iter()
                .flat_map(|&t| {
                    polarities.iter().map(move |&p| Hypothesis::Threshold {
                        axis: 0,
                        threshold: t,
                        polarity: p,
                    })
                })
                .collect(),
        )
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Terms of the adversarial risk bound, all under the 0/1 loss on the samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `L_Dadv(h*_Dadv, f)`.
    pub adv: f64,
    /// `L_D(h, h*_D)`.
    pub natural: f64,
    /// `L_D(h*_D, h*_Dadv)`.
    pub trade_off: f64,
    /// `max_{h,h'} |L_D(h,h') - L_Dadv(h,h')|`.
    pub discrepancy: f64,
    /// The bounded quantity `L_Dadv(h, f)`.
    pub adv_risk: f64,
    /// The five fields above, in order, as integers over `denominator`
    /// (`|D|·|D_adv|`), so the inequality can be checked without rounding.
    pub numerators: [u64; 5],
    pub denominator: u64,
}

impl BoundTerms {
    pub fn bound(&self) -> f64 {
        self.adv + self.natural + self.trade_off + self.discrepancy
    }

    /// `adv_risk <= bound()`, in exact arithmetic.
    pub fn holds(&self) -> bool {
        let [adv, natural, trade_off, disc, risk] = self.numerators;
        risk <= adv + natural + trade_off + disc
    }
}

/// Brute-forces the four bound terms for hypothesis `h` (an index into `set`).
/// `d` and `d_adv` are point samples with their labels.
pub fn estimate_bound_terms(
    set: &HypothesisSet,
    d: &[Vec<f64>],
    d_labels: &[usize],
    d_adv: &[Vec<f64>],
    d_adv_labels: &[usize],
    h: usize,
) -> Result<BoundTerms> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("hypothesis set is empty".into()));
    }
    if d.is_empty() || d_adv.is_empty() || d.len() != d_labels.len() || d_adv.len() != d_adv_labels.len() {
        return Err(Error::InvalidArgument("bound samples must be nonempty and labeled".into()));
    }
    if h >= set.len() {
        return Err(Error::InvalidArgument(format!("hypothesis {h} not in a set of {}", set.len())));
    }
    let preds = |xs: &[Vec<f64>]| -> Vec<Vec<usize>> {
        set.0.iter().map(|hyp| xs.iter().map(|x| hyp.predict(x)).collect()).collect()
    };
    let (pd, pa) = (preds(d), preds(d_adv));
    let (n, m) = (d.len() as u64, d_adv.len() as u64);
    let disagree = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
    let argmin = |p: &[Vec<usize>], labels: &[usize]| {
        (0..p.len())
            .map(|i| (i, disagree(&p[i], labels)))
            .fold((0, u64::MAX), |best, cur| if cur.1 < best.1 { cur } else { best })
            .0
    };
    let star_d = argmin(&pd, d_labels);
    let star_adv = argmin(&pa, d_adv_labels);
    let mut disc = 0u64;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            disc = disc.max((disagree(&pd[i], &pd[j]) * m).abs_diff(disagree(&pa[i], &pa[j]) * n));
        }
    }
    let numerators = [
        disagree(&pa[star_adv], d_adv_labels) * n,
        disagree(&pd[h], &pd[star_d]) * m,
        disagree(&pd[star_d], &pd[star_adv]) * m,
        disc,
        disagree(&pa[h], d_adv_labels) * n,
    ];
    let denominator = n * m;
    let rate = |k: usize| numerators[k] as f64 / denominator as f64;
    Ok(BoundTerms {
        adv: rate(0),
        natural: rate(1),
        trade_off: rate(2),
        discrepancy: rate(3),
        adv_risk: rate(4),
        numerators,
        denominator,
    })
}

/// A random one-dimensional bound instance: points on `[0, 1]` labeled by a
/// hidden threshold, their shifted copies keeping the labels, a signed
/// threshold grid and a hypothesis drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInstance {
    pub set: HypothesisSet,
    pub d: Vec<Vec<f64>>,
    pub d_labels: Vec<usize>,
    pub d_adv: Vec<Vec<f64>>,
    pub d_adv_labels: Vec<usize>,
    pub h: usize,
}

impl BoundInstance {
    /// `points` samples, `grid` thresholds, shifts uniform in `[-shift, shift]`.
    pub fn random(rng: &mut impl Rng, points: usize, grid: usize, shift: f64) -> Result<Self> {
        if points == 0 || grid == 0 || !(shift >= 0.0) {
            return Err(Error::InvalidArgument("bound instance needs points, a grid and shift >= 0".into()));
        }
        let cut: f64 = rng.gen_range(0.2..0.8);
        let d: Vec<Vec<f64>> = (0..points).map(|_| vec![rng.gen::<f64>()]).collect();
        let d_labels: Vec<usize> = d.iter().map(|x| usize::from(x[0] > cut)).collect();
        let d_adv: Vec<Vec<f64>> = d
            .iter()
            .map(|x| vec![x[0] + if shift > 0.0 { rng.gen_range(-shift..=shift) } else { 0.0 }])
            .collect();
        let grid: Vec<f64> = (0..grid).map(|i| (i as f64 + 0.5) / grid as f64).collect();
        let set = HypothesisSet::thresholds(&grid, true)?;
        let h = rng.gen_range(0..set.len());
        Ok(BoundInstance {
            set,
            d,
            d_adv_labels: d_labels.clone(),
            d_labels,
            d_adv,
            h,
        })
    }

    pub fn terms(&self) -> Result<BoundTerms> {
        estimate_bound_terms(&self.set, &self.d, &self.d_labels, &self.d_adv, &self.d_adv_labels, self.h)
    }
}
