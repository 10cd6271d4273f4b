//! Gradient flow through the three-headed model.

use dial::gradcheck::check_gradients;
use dial::loss::{cross_entropy, domain_loss};
use dial::model::Bound;
use dial::{ArchSpec, ModelParams, Partition, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(arch: &ArchSpec, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(&arch.input_shape);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Gradients of `nat_domain + adv_domain` by parameter name.
fn domain_grads(model: &ModelParams<f64>, x: &Tensor<f64>, xa: &Tensor<f64>, r: f64) -> Vec<(String, Partition, Tensor<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let (nd, ad) = domain_loss(&mut tape, model, &bound, x, xa, r).unwrap();
    let loss = tape.add(nd, ad).unwrap();
    let g = tape.backward(loss).unwrap();
    model
        .params()
        .iter()
        .map(|p| {
            let grad = g.param(&p.name).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.name.clone(), p.partition, grad)
        })
        .collect()
}

#[test]
fn zero_ratio_blocks_domain_gradient_into_features() {
    let arch = ArchSpec::tiny_cnn(3);
    let model = ModelParams::<f64>::build(&arch, 1).unwrap();
    let (x, xa) = (batch(&arch, 4, 2), batch(&arch, 4, 3));
    for (name, part, g) in domain_grads(&model, &x, &xa, 0.0) {
        if part == Partition::Feature {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn unit_ratio_flips_feature_gradients_and_keeps_head_gradients() {
    let arch = ArchSpec::toy_mlp(2);
    let model = ModelParams::<f64>::build(&arch, 5).unwrap();
    let (x, xa) = (batch(&arch, 6, 6), batch(&arch, 6, 7));
    let reversed = domain_grads(&model, &x, &xa, 1.0);

    // reference pass with the domain head applied straight to the features
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xn = tape.constant(x.clone());
    let xv = tape.constant(xa.clone());
    let fnat = model.forward_features(&mut tape, &bound, xn).unwrap();
    let fadv = model.forward_features(&mut tape, &bound, xv).unwrap();
    let dn = model.forward_domain_head(&mut tape, &bound, fnat).unwrap();
    let da = model.forward_domain_head(&mut tape, &bound, fadv).unwrap();
    let nd = cross_entropy(&mut tape, dn, &[0; 6]).unwrap();
    let ad = cross_entropy(&mut tape, da, &[1; 6]).unwrap();
    let loss = tape.add(nd, ad).unwrap();
    let plain = tape.backward(loss).unwrap();

    for (name, part, g) in reversed {
        let p = plain.param(&name).cloned().unwrap_or_else(|| Tensor::zeros(g.shape()));
        let sign = if part == Partition::Feature { -1.0 } else { 1.0 };
        for (a, b) in g.data().iter().zip(p.data()) {
            assert!((a - sign * b).abs() <= 1e-12, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn label_loss_leaves_domain_head_untouched() {
    let arch = ArchSpec::toy_mlp(3);
    let model = ModelParams::<f64>::build(&arch, 2).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(batch(&arch, 5, 1));
    let f = model.forward_features(&mut tape, &bound, xv).unwrap();
    let z = model.forward_label(&mut tape, &bound, f).unwrap();
    let loss = cross_entropy(&mut tape, z, &[0, 1, 2, 0, 1]).unwrap();
    let g = tape.backward(loss).unwrap();
    for p in model.params() {
        let grad = g.param(&p.name);
        match p.partition {
            Partition::Domain => assert!(grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0))),
            _ => assert!(grad.is_some_and(|t| t.data().iter().any(|&v| v != 0.0)), "{}", p.name),
        }
    }
}

#[test]
fn softmax_of_label_logits_is_normalised() {
    let arch = ArchSpec::mnist_cnn();
    let model = ModelParams::<f32>::build(&arch, 0).unwrap();
    let x = batch(&arch, 3, 9).cast::<f32>();
    let logits = model.predict(&x).unwrap();
    assert_eq!(logits.shape(), &[3, 10]);
    for row in logits.data().chunks(10) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        let total: f64 = row.iter().map(|&v| (v as f64 - m).exp() / z).sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand(&[5, 3]);
    let params = vec![rand(&[3, 4]), rand(&[4]), rand(&[4, 2]), rand(&[2])];
    let r = check_gradients(
        |t, p| {
            let xv = t.constant(x.clone());
            let h = t.dense(xv, p[0], p[1])?;
            let h = t.relu(h)?;
            let z = t.dense(h, p[2], p[3])?;
            cross_entropy(t, z, &[0, 1, 1, 0, 1])
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.checked > 20);
}

#[test]
fn conv_relu_dense_composite_on_4x4_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand(&[2, 1, 4, 4]);
    let params = vec![rand(&[3, 1, 3, 3]), rand(&[3]), rand(&[12, 3]), rand(&[3])];
    let r = check_gradients(
        |t, p| {
            let xv = t.constant(x.clone());
            let h = t.conv2d(xv, p[0], p[1], 1, 0)?;
            let h = t.relu(h)?;
            let h = t.flatten(h)?;
            let z = t.dense(h, p[2], p[3])?;
            cross_entropy(t, z, &[2, 0])
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn rebinding_parameters_from_vars_matches_bind() {
    let arch = ArchSpec::tiny_cnn(2);
    let model = ModelParams::<f64>::build(&arch, 4).unwrap();
    let x = batch(&arch, 2, 4);
    let mut t1 = Tape::new();
    let b1 = model.bind(&mut t1, true);
    let mut t2 = Tape::new();
    let vars = model.params().iter().map(|p| t2.param(p.name.clone(), p.value.clone())).collect();
    let b2 = Bound::from_vars(vars);
    let out = |t: &mut Tape<f64>, b: &Bound| {
        let xv = t.constant(x.clone());
        let f = model.forward_features(t, b, xv).unwrap();
        let z = model.forward_label(t, b, f).unwrap();
        t.value(z).unwrap().clone()
    };
    assert_eq!(out(&mut t1, &b1), out(&mut t2, &b2));
}
