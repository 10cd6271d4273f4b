//! Attack postconditions on randomized inputs.

use dial::attack::{cw_margins, fgsm, pgd_attack, project_l2, AttackSpec, InnerLoss, Norm};
use dial::eval::craft;
use dial::data::Split;
use dial::{ArchSpec, Classifier, ModelParams, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-class linear scorer: logits `[w·x, 0]`.
struct Linear(Vec<f64>);

impl Classifier<f64> for Linear {
    fn logits(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let n = tape.value(x)?.batch_len();
        let d = self.0.len();
        let mut w = vec![0.0; d * 2];
        for (i, v) in self.0.iter().enumerate() {
            w[i * 2] = *v;
        }
        let w = tape.constant(Tensor::new(vec![d, 2], w)?);
        let b = tape.constant(Tensor::zeros(&[2]));
        let flat = tape.reshape(x, &[n, d])?;
        tape.dense(flat, w, b)
    }
}

fn toy() -> ModelParams<f64> {
    ModelParams::build(&ArchSpec::tiny_cnn(3), 1).unwrap()
}

fn norm_of(d: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => d.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Norm::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

fn arb_spec() -> impl Strategy<Value = AttackSpec> {
    (prop::bool::ANY, 0.0f64..1.0, 0.01f64..0.5, 0usize..5, prop::bool::ANY, 0usize..3).prop_map(
        |(l2, eps, step, iters, random_start, loss)| AttackSpec {
            norm: if l2 { Norm::L2 } else { Norm::Linf },
            eps,
            step,
            iters,
            random_start,
            inner_loss: [InnerLoss::Ce, InnerLoss::Kl, InnerLoss::CwMargin][loss],
            lo: 0.0,
            hi: 1.0,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_feasible(spec in arb_spec(), pixels in prop::collection::vec(0.0f64..=1.0, 72), seed in 0u64..1000) {
        let model = toy();
        let x = Tensor::new(vec![2, 1, 6, 6], pixels).unwrap();
        let before = model.clone();
        let adv = pgd_attack(&model, &x, &[0, 2], &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&model, &before);
        for i in 0..2 {
            let d: Vec<f64> = adv.example(i).iter().zip(x.example(i)).map(|(a, b)| a - b).collect();
            prop_assert!(norm_of(&d, spec.norm) <= spec.eps + 1e-6);
        }
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn l2_projection_never_exceeds_the_ball(delta in prop::collection::vec(-3.0f64..3.0, 8), eps in 0.0f64..2.0) {
        let x0 = Tensor::new(vec![1, 8], vec![0.5; 8]).unwrap();
        let xa = Tensor::new(vec![1, 8], delta.iter().map(|d| 0.5 + d).collect()).unwrap();
        let p = project_l2(&xa, &x0, eps, 0.0, 1.0).unwrap();
        let d: Vec<f64> = p.data().iter().map(|v| v - 0.5).collect();
        prop_assert!(norm_of(&d, Norm::L2) <= eps + 1e-6);
    }
}

#[test]
fn fgsm_is_one_step_pgd() {
    let model = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![3, 1, 6, 6], (0..108).map(|i| (i % 11) as f64 / 10.0).collect()).unwrap();
    let y = [0, 1, 2];
    let a = fgsm(&model, &x, &y, 0.1).unwrap();
    let spec = AttackSpec {
        random_start: false,
        ..AttackSpec::linf(0.1, 0.1, 1)
    };
    let b = pgd_attack(&model, &x, &y, &spec, &mut rng).unwrap();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn fgsm_on_a_linear_model_is_the_closed_form() {
    // gradient of CE(label 1) wrt x is p0·w: sign [+1, -1]
    let model = Linear(vec![1.0, -2.0]);
    let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let adv = fgsm(&model, &x, &[1], 0.1).unwrap();
    assert!((adv.data()[0] - 0.6).abs() < 1e-12 && (adv.data()[1] - 0.4).abs() < 1e-12);
}

#[test]
fn larger_budget_never_lowers_the_linear_loss() {
    let model = Linear(vec![0.7, -1.3, 0.4]);
    let x = Tensor::new(vec![1, 3], vec![0.4, 0.6, 0.5]).unwrap();
    let mut last = f64::NEG_INFINITY;
    for k in 0..8 {
        let adv = fgsm(&model, &x, &[1], 0.05 * k as f64).unwrap();
        let score: f64 = adv.data().iter().zip(&model.0).map(|(a, w)| a * w).sum();
        // CE for label 1 grows with w·x
        assert!(score >= last - 1e-12);
        last = score;
    }
}

#[test]
fn misclassified_points_have_nonnegative_margin() {
    let model = toy();
    let x = Tensor::new(vec![8, 1, 6, 6], (0..288).map(|i| ((i * 7) % 13) as f64 / 12.0).collect()).unwrap();
    let y = vec![0, 1, 2, 0, 1, 2, 0, 1];
    let split = Split::new(x, y.clone()).unwrap();
    let adv = craft(&model, &split, &AttackSpec::linf(0.3, 0.1, 10), 3, 4).unwrap();
    let logits = model.predict(&adv).unwrap();
    let margins = cw_margins(&logits, &y).unwrap();
    for (pred, (m, label)) in logits.argmax_rows().iter().zip(margins.iter().zip(&y)) {
        // exact ties (dead ReLUs, zero biases) give margin 0 with argmax on the first class
        if pred != label {
            assert!(*m >= 0.0, "pred {pred} label {label} margin {m}");
        }
        if *m > 0.0 {
            assert_ne!(pred, label);
        }
    }
}
