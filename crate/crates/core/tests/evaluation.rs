//! Evaluation harness, corruptions, feature statistics and dumps.

use std::path::PathBuf;

use dial::attack::AttackSpec;
use dial::checkpoint::load_checkpoint;
use dial::data::{gen_synthetic, load_mnist, Split, SyntheticKind};
use dial::eval::{
    black_box_eval, corrupt, dump_representations, evaluate, feature_invariance, Corruption, FeatureScaling,
    NamedAttack, Representation,
};
use dial::{ArchSpec, ModelParams, Partition, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_split(arch: &ArchSpec, per_class: usize, seed: u64) -> Split<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * arch.num_classes;
    let mut shape = vec![n];
    shape.extend_from_slice(&arch.input_shape);
    let len = shape.iter().product();
    let x = Tensor::new(shape, (0..len).map(|_| rng.gen::<f32>()).collect()).unwrap();
    Split::new(x, (0..n).map(|i| i % arch.num_classes).collect()).unwrap()
}

fn toy_attack() -> AttackSpec {
    AttackSpec {
        lo: -4.0,
        hi: 4.0,
        ..AttackSpec::linf(0.2, 0.05, 5)
    }
}

#[test]
fn untrained_model_is_near_chance_on_balanced_data() {
    let arch = ArchSpec::mnist_cnn();
    let model = ModelParams::<f32>::build(&arch, 3).unwrap();
    let split = random_split(&arch, 30, 1);
    let report = evaluate(&model, &split, &[], 0, 100).unwrap();
    assert!((report.natural_acc - 0.1).abs() <= 0.03, "{}", report.natural_acc);
    assert!(report.attacks.is_empty());
    assert_eq!(report.examples, 300);
}

#[test]
fn self_transfer_equals_white_box() {
    let data = gen_synthetic::<f32>(SyntheticKind::TwoMoons, 300, 0.1, 2).unwrap();
    let model = ModelParams::build(&ArchSpec::toy_mlp(2), 4).unwrap();
    let attack = NamedAttack::new("pgd5", toy_attack());
    let white = evaluate(&model, &data.test, std::slice::from_ref(&attack), 9, 64).unwrap();
    let black = black_box_eval(&model, &model, &data.test, &attack, 9, 64).unwrap();
    assert_eq!(white.attacks[0], black);
}

#[test]
fn relabelling_classes_leaves_accuracy_unchanged() {
    let data = gen_synthetic::<f32>(SyntheticKind::GaussMix { classes: 3 }, 300, 1.5, 5).unwrap();
    let arch = ArchSpec::toy_mlp(3);
    let model = ModelParams::<f32>::build(&arch, 6).unwrap();
    let perm = [2, 0, 1];
    let mut permuted = model.clone();
    for p in permuted.params_mut() {
        if p.partition != Partition::Label {
            continue;
        }
        let old = p.value.data().to_vec();
        let mut new = old.clone();
        // last dense layer: weight [32, 3], bias [3]; class c moves to perm[c]
        for (i, v) in old.iter().enumerate() {
            new[i - i % 3 + perm[i % 3]] = *v;
        }
        p.value = Tensor::new(p.value.shape().to_vec(), new).unwrap();
    }
    let relabelled = Split::new(data.test.x.clone(), data.test.y.iter().map(|&c| perm[c]).collect()).unwrap();
    let a = evaluate(&model, &data.test, &[], 0, 64).unwrap();
    let b = evaluate(&permuted, &relabelled, &[], 0, 64).unwrap();
    assert_eq!(a.natural_acc, b.natural_acc);
}

#[test]
fn feature_statistics_ignore_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (50, 6);
    let nat = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..2.0)).collect::<Vec<f64>>()).unwrap();
    let adv = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..2.0)).collect::<Vec<f64>>()).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    order.swap(3, 17);
    for scaling in [FeatureScaling::Raw, FeatureScaling::MaxNormalized] {
        let a = feature_invariance(&nat, &adv, scaling).unwrap();
        let b = feature_invariance(&nat.select(&order).unwrap(), &adv.select(&order).unwrap(), scaling).unwrap();
        for (x, y) in a.mean_diff.iter().chain(&a.std_diff).zip(b.mean_diff.iter().chain(&b.std_diff)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let same = feature_invariance(&nat, &nat, FeatureScaling::Raw).unwrap();
    assert!(same.mean_diff.iter().chain(&same.std_diff).all(|&v| v == 0.0));
}

#[test]
fn gaussian_noise_has_the_severity_sigma() {
    let x = Tensor::new(vec![4, 1, 50, 50], vec![0.5f64; 10_000]).unwrap();
    let y = corrupt(&x, Corruption::GaussianNoise, 3, 11, 0.0, 1.0).unwrap();
    let d: Vec<f64> = y.data().iter().map(|v| v - 0.5).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    assert!((std - 0.10).abs() < 0.005, "{std}");
    assert!(mean.abs() < 0.005);
}

#[test]
fn brightness_and_identity_severity() {
    let zeros = Tensor::new(vec![2, 1, 3, 3], vec![0.0f64; 18]).unwrap();
    let b = corrupt(&zeros, Corruption::Brightness, 2, 0, 0.0, 1.0).unwrap();
    assert!(b.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    for kind in Corruption::ALL {
        assert_eq!(corrupt(&zeros, kind, 0, 0, 0.0, 1.0).unwrap(), zeros);
        assert_eq!(Corruption::parse(kind.name()).unwrap(), kind);
    }
    assert!(corrupt(&zeros, Corruption::Contrast, 6, 0, 0.0, 1.0).is_err());
}

#[test]
fn pixelate_averages_blocks() {
    let constant = Tensor::new(vec![1, 1, 5, 5], vec![0.3f64; 25]).unwrap();
    let out = corrupt(&constant, Corruption::Pixelate, 2, 0, 0.0, 1.0).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

    // severity 1 uses 2x2 blocks; the ragged edge gets its own partial block
    let x: Vec<f64> = (0..9).map(|v| v as f64 / 10.0).collect();
    let img = Tensor::new(vec![1, 1, 3, 3], x).unwrap();
    let out = corrupt(&img, Corruption::Pixelate, 1, 0, 0.0, 1.0).unwrap();
    let expect = [0.2, 0.2, 0.35, 0.2, 0.2, 0.35, 0.65, 0.65, 0.8];
    for (a, b) in out.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{:?}", out.data());
    }
}

#[test]
fn representation_dump_is_complete_and_reproducible() {
    let data = gen_synthetic::<f32>(SyntheticKind::TwoMoons, 40, 0.1, 3).unwrap();
    let model = ModelParams::build(&ArchSpec::toy_mlp(2), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for path in [&a, &b] {
        dump_representations(&model, &data.test, Representation::Features, Some(&toy_attack()), 5, path).unwrap();
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 40);
    assert!(lines.iter().all(|l| l.split(',').count() == 3 + 32));
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("0,"));
    assert_eq!(lines[2].split(',').nth(2), Some("1"));

    let logits = dir.path().join("logits.csv");
    dump_representations(&model, &data.test, Representation::Logits, None, 5, &logits).unwrap();
    let text = std::fs::read_to_string(&logits).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert_eq!(text.lines().next(), Some("id,label,domain,v0,v1"));
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mnist-desk").join(name).join("best.ckpt")
}

#[test]
fn trained_fixtures_respect_attack_ordering() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    let data = load_mnist::<f32>(&root).unwrap();
    let test = data.test.range(0, 200).unwrap();
    let arch = ArchSpec::mnist_cnn();
    let (dial, _, _) = load_checkpoint::<f32>(fixture("dial-ce"), &arch).unwrap();
    let (at, _, _) = load_checkpoint::<f32>(fixture("at"), &arch).unwrap();
    let pgd = NamedAttack::new("pgd20", AttackSpec::linf(0.3, 0.01, 20));
    let white = evaluate(&dial, &test, std::slice::from_ref(&pgd), 0, 100).unwrap();
    let black = black_box_eval(&at, &dial, &test, &pgd, 0, 100).unwrap();
    let r = &white.attacks[0];
    assert!(r.robust_acc <= white.natural_acc + 0.01);
    assert!(black.robust_acc >= r.robust_acc, "black {} white {}", black.robust_acc, r.robust_acc);
    assert_eq!(r.true_robust + r.false_robust, 200);
}
