//! Objective-level identities of the loss family.

use dial::loss::{
    assemble, at_loss, cross_entropy, dial_loss, domain_loss, kl_div, label_logits, mart_loss, boosted_cross_entropy,
    trades_loss, DialConfig, Objective,
};
use dial::{ArchSpec, ModelParams, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inputs(arch: &ArchSpec, n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(&arch.input_shape);
    let len: usize = shape.iter().product();
    let x = Tensor::new(shape.clone(), (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let xa = Tensor::new(shape, (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..arch.num_classes)).collect();
    (x, xa, y)
}

fn value(tape: &Tape<f64>, v: dial::Var) -> f64 {
    tape.value(v).unwrap().item()
}

#[test]
fn uniform_domain_head_gives_ln2_per_term() {
    let arch = ArchSpec::toy_mlp(2);
    let mut model = ModelParams::<f64>::build(&arch, 0).unwrap();
    for p in model.params_mut() {
        if p.partition == dial::Partition::Domain {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let (x, xa, _) = inputs(&arch, 4, 1);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (nd, ad) = domain_loss(&mut tape, &model, &bound, &x, &xa, 0.1).unwrap();
    assert!((value(&tape, nd) - 2f64.ln()).abs() < 1e-12);
    assert!((value(&tape, ad) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn indistinguishable_domains_cost_at_least_2ln2() {
    let arch = ArchSpec::toy_mlp(2);
    for seed in 0..10 {
        let model = ModelParams::<f64>::build(&arch, seed).unwrap();
        let (x, _, _) = inputs(&arch, 8, seed);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (nd, ad) = domain_loss(&mut tape, &model, &bound, &x, &x, 0.1).unwrap();
        assert!(value(&tape, nd) + value(&tape, ad) >= 2.0 * 2f64.ln() - 1e-12);
    }
}

#[test]
fn breakdown_total_matches_recomputation() {
    let arch = ArchSpec::tiny_cnn(4);
    for seed in 0..10 {
        let model = ModelParams::<f64>::build(&arch, seed).unwrap();
        let (x, xa, y) = inputs(&arch, 5, seed + 100);
        for cfg in [DialConfig::ce(), DialConfig::kl()] {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let g = dial_loss(&mut tape, &model, &bound, &x, &y, &xa, &cfg, seed as f64 / 10.0).unwrap();
            // independent recomputation of every term on a fresh tape
            let mut t = Tape::new();
            let b = model.bind(&mut t, false);
            let zn = label_logits(&mut t, &model, &b, &x).unwrap();
            let za = label_logits(&mut t, &model, &b, &xa).unwrap();
            let nat = cross_entropy(&mut t, zn, &y).unwrap();
            let nat = value(&t, nat);
            let rob = match cfg.variant {
                dial::loss::DialVariant::Ce => cross_entropy(&mut t, za, &y).unwrap(),
                dial::loss::DialVariant::Kl => kl_div(&mut t, za, zn).unwrap(),
            };
            let rob = value(&t, rob);
            let (nd, ad) = domain_loss(&mut t, &model, &b, &x, &xa, 0.0).unwrap();
            let (nd, ad) = (value(&t, nd), value(&t, ad));
            let r = g.breakdown.r_t;
            let total = nat + cfg.lambda * rob - r * (nd + ad);
            assert!((g.breakdown.total - total).abs() <= 1e-6);
            assert!((g.breakdown.recomputed_total() - g.breakdown.total).abs() <= 1e-12);
        }
    }
}

#[test]
fn at_is_cross_entropy_on_adversarial_inputs() {
    let arch = ArchSpec::toy_mlp(3);
    let model = ModelParams::<f64>::build(&arch, 3).unwrap();
    let (_, xa, y) = inputs(&arch, 6, 3);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let at = at_loss(&mut tape, &model, &b, &xa, &y).unwrap();
    let logits = model.predict(&xa).unwrap();
    let by_hand: f64 = logits
        .data()
        .chunks(3)
        .zip(&y)
        .map(|(row, &label)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .sum::<f64>()
        / 6.0;
    assert!((value(&tape, at) - by_hand).abs() < 1e-12);
}

#[test]
fn trades_without_perturbation_is_natural_cross_entropy() {
    let arch = ArchSpec::toy_mlp(3);
    let model = ModelParams::<f64>::build(&arch, 4).unwrap();
    let (x, _, y) = inputs(&arch, 6, 4);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let trades = trades_loss(&mut tape, &model, &b, &x, &y, &x, 6.0).unwrap();
    let zn = label_logits(&mut tape, &model, &b, &x).unwrap();
    let ce = cross_entropy(&mut tape, zn, &y).unwrap();
    assert_eq!(value(&tape, trades), value(&tape, ce));
}

#[test]
fn mart_weight_vanishes_for_certain_natural_predictions() {
    let arch = ArchSpec::toy_mlp(2);
    let mut model = ModelParams::<f64>::build(&arch, 5).unwrap();
    // label head: zero weights, bias pinning class 0 with probability 1
    for p in model.params_mut() {
        if p.partition == dial::Partition::Label {
            let bias = p.is_bias();
            p.value = if bias { Tensor::from_vec(vec![50.0, -50.0]) } else { Tensor::zeros(p.value.shape()) };
        }
    }
    let (x, xa, _) = inputs(&arch, 4, 5);
    let y = vec![0; 4];
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let mart = mart_loss(&mut tape, &model, &b, &x, &y, &xa, 6.0).unwrap();
    let za = label_logits(&mut tape, &model, &b, &xa).unwrap();
    let bce = boosted_cross_entropy(&mut tape, za, &y).unwrap();
    assert_eq!(value(&tape, mart), value(&tape, bce));
}

#[test]
fn dial_ce_without_reversal_reduces_to_at_plus_natural() {
    let arch = ArchSpec::tiny_cnn(3);
    let model = ModelParams::<f64>::build(&arch, 6).unwrap();
    let (x, xa, y) = inputs(&arch, 4, 6);
    let cfg = DialConfig {
        r_max: 0.0,
        ..DialConfig::ce()
    };
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let g = dial_loss(&mut tape, &model, &b, &x, &y, &xa, &cfg, 0.3).unwrap();
    let mut t = Tape::new();
    let bb = model.bind(&mut t, false);
    let at = at_loss(&mut t, &model, &bb, &xa, &y).unwrap();
    let zn = label_logits(&mut t, &model, &bb, &x).unwrap();
    let ce = cross_entropy(&mut t, zn, &y).unwrap();
    assert_eq!(g.breakdown.total, value(&t, at) + value(&t, ce));
}

#[test]
fn losses_ignore_batch_order() {
    let arch = ArchSpec::toy_mlp(3);
    let model = ModelParams::<f64>::build(&arch, 7).unwrap();
    let (x, xa, y) = inputs(&arch, 7, 7);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let (px, pxa) = (x.select(&perm).unwrap(), xa.select(&perm).unwrap());
    let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
    for objective in [
        Objective::Dial(DialConfig::kl()),
        Objective::Dial(DialConfig::ce()),
        Objective::At,
        Objective::Trades { lambda: 6.0 },
        Objective::Mart { lambda: 5.0 },
        Objective::Natural,
    ] {
        let total = |x: &Tensor<f64>, y: &[usize], xa: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            assemble(&objective, &mut tape, &model, &b, x, y, xa, 0.4).unwrap().breakdown.total
        };
        assert!((total(&x, &y, &xa) - total(&px, &py, &pxa)).abs() < 1e-12, "{}", objective.name());
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative(adv in prop::collection::vec(-8.0f64..8.0, 12), nat in prop::collection::vec(-8.0f64..8.0, 12)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3, 4], adv).unwrap());
        let n = tape.constant(Tensor::new(vec![3, 4], nat).unwrap());
        let kl = kl_div(&mut tape, a, n).unwrap();
        prop_assert!(tape.value(kl).unwrap().item() >= -1e-12);
    }
}
