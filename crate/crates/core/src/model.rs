//! Three-headed classifier: feature extractor, label head and domain head.
//!
//! Both heads read the same flattened feature vector. The domain head is
//! always entered through a gradient-reversal node, so a single backward
//! pass trains the domain head to separate natural from adversarial inputs
//! while pushing the feature extractor the other way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Relu,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl Layer {
    fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::Dense { inputs, outputs }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            Layer::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            Layer::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output shape of one example, or `None` if the input does not fit.
    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match (*self, input) {
            (
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                &[c, h, w],
            ) if c == in_channels && stride > 0 && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                Some(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            (Layer::MaxPool2d { size }, &[c, h, w]) if size > 0 && h >= size && w >= size => {
                Some(vec![c, h / size, w / size])
            }
            (Layer::Relu, s) => Some(s.to_vec()),
            (Layer::Flatten, s) => Some(vec![s.iter().product()]),
            (Layer::Dense { inputs, outputs }, &[n]) if n == inputs => Some(vec![outputs]),
            _ => None,
        }
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Feature,
    Label,
    Domain,
}

impl Partition {
    fn prefix(self) -> &'static str {
        match self {
            Partition::Feature => "features",
            Partition::Label => "label",
            Partition::Domain => "domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    /// Shape of one example, e.g. `[1, 28, 28]` or `[2]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub features: Vec<Layer>,
    pub label_head: Vec<Layer>,
    pub domain_head: Vec<Layer>,
}

pub const PRESETS: &[&str] = &["mnist-cnn", "toy-mlp", "tiny-cnn"];

impl ArchSpec {
    /// Four 3×3 convolutions and three dense layers; the domain head has one
    /// hidden layer of 100 units.
    pub fn mnist_cnn() -> Self {
        ArchSpec {
            name: "mnist-cnn".into(),
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            features: vec![
                Layer::conv(1, 32, 3),
                Layer::Relu,
                Layer::conv(32, 32, 3),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::conv(32, 64, 3),
                Layer::Relu,
                Layer::conv(64, 64, 3),
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
            ],
            label_head: vec![
                Layer::dense(1024, 200),
                Layer::Relu,
                Layer::dense(200, 200),
                Layer::Relu,
                Layer::dense(200, 10),
            ],
            domain_head: vec![Layer::dense(1024, 100), Layer::Relu, Layer::dense(100, 2)],
        }
    }

    /// 2-d inputs, two hidden layers of 32 as features, linear heads.
    pub fn toy_mlp(num_classes: usize) -> Self {
        ArchSpec {
            name: "toy-mlp".into(),
            input_shape: vec![2],
            num_classes,
            features: vec![Layer::dense(2, 32), Layer::Relu, Layer::dense(32, 32), Layer::Relu],
            label_head: vec![Layer::dense(32, num_classes)],
            domain_head: vec![Layer::dense(32, 2)],
        }
    }

    /// Small convolutional net on 1×6×6 inputs, used for gradient checks.
    pub fn tiny_cnn(num_classes: usize) -> Self {
        ArchSpec {
            name: "tiny-cnn".into(),
            input_shape: vec![1, 6, 6],
            num_classes,
            features: vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
            ],
            label_head: vec![Layer::dense(18, 6), Layer::Relu, Layer::dense(6, num_classes)],
            domain_head: vec![Layer::dense(18, 4), Layer::Relu, Layer::dense(4, 2)],
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        let spec = match name {
            "mnist-cnn" if num_classes == 10 => Self::mnist_cnn(),
            "mnist-cnn" => {
                return Err(Error::InvalidArgument(format!(
                    "mnist-cnn has 10 classes, dataset has {num_classes}"
                )))
            }
            "toy-mlp" => Self::toy_mlp(num_classes),
            "tiny-cnn" => Self::tiny_cnn(num_classes),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    fn walk(&self, layers: &[Layer], input: &[usize], part: &str) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| Error::InvalidShape {
                op: "arch",
                msg: format!("{part} layer {i} ({layer:?}) cannot take input {shape:?}"),
            })?;
        }
        Ok(shape)
    }

    /// Shape walk through every sub-network. Returns the feature width.
    pub fn validate(&self) -> Result<usize> {
        let feat = self.walk(&self.features, &self.input_shape, "feature")?;
        let [width] = feat[..] else {
            return Err(Error::InvalidShape {
                op: "arch",
                msg: format!("feature output must be flat, got {feat:?}"),
            });
        };
        let label = self.walk(&self.label_head, &feat, "label head")?;
        if label != [self.num_classes] {
            return Err(Error::InvalidShape {
                op: "arch",
                msg: format!("label head outputs {label:?}, expected [{}]", self.num_classes),
            });
        }
        let domain = self.walk(&self.domain_head, &feat, "domain head")?;
        if domain != [2] {
            return Err(Error::InvalidShape {
                op: "arch",
                msg: format!("domain head outputs {domain:?}, expected [2]"),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("at least 2 classes required".into()));
        }
        Ok(width)
    }

    fn sections(&self) -> [(Partition, &[Layer]); 3] {
        [
            (Partition::Feature, &self.features),
            (Partition::Label, &self.label_head),
            (Partition::Domain, &self.domain_head),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Parameters of all three sub-networks plus the architecture they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    arch: ArchSpec,
    params: Vec<Param<T>>,
}

/// Parameters placed on one tape, aligned with [`ModelParams::params`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps tape nodes already holding the parameters, in `params()` order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Off-tape activations of all three heads.
#[derive(Debug, Clone)]
pub struct Outputs<T: Scalar> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub domain: Tensor<T>,
}

/// Anything that maps a batch of inputs to class logits on a tape.
pub trait Classifier<T: Scalar> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights (fan-in), zero biases; deterministic per seed.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (partition, layers) in arch.sections() {
            for (i, layer) in layers.iter().enumerate() {
                let Some((w_shape, b_shape)) = layer.param_shapes() else { continue };
                let std = (2.0 / layer.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let n: usize = w_shape.iter().product();
                let w: Vec<T> = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
                params.push(Param {
                    name: format!("{}.{i}.weight", partition.prefix()),
                    partition,
                    value: Tensor::new(w_shape, w)?,
                });
                params.push(Param {
                    name: format!("{}.{i}.bias", partition.prefix()),
                    partition,
                    value: Tensor::zeros(&b_shape),
                });
            }
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    /// Assembles a model from named tensors, checking them against `arch`.
    pub fn from_named(arch: &ArchSpec, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = ModelParams::<T>::build(arch, 0)?;
        if template.params.len() != named.len() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} parameters, got {}",
                arch.name,
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for (slot, (name, value)) in template.params.into_iter().zip(named) {
            if slot.name != name {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` does not match expected `{}`",
                    slot.name
                )));
            }
            if slot.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    lhs: slot.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            params.push(Param { value, ..slot });
        }
        Ok(ModelParams {
            arch: arch.clone(),
            params,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn feature_width(&self) -> usize {
        self.arch.validate().unwrap_or(0)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    partition: p.partition,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Places the parameters on `tape`, as named differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.param(p.name.clone(), p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        section: Partition,
        mut x: Var,
    ) -> Result<Var> {
        let mut cursor = 0;
        for (partition, layers) in self.arch.sections() {
            if partition != section {
                cursor += layers.iter().filter(|l| l.param_shapes().is_some()).count() * 2;
                continue;
            }
            for layer in layers {
                x = match *layer {
                    Layer::Conv2d { stride, padding, .. } => {
                        let (w, b) = (bound.0[cursor], bound.0[cursor + 1]);
                        cursor += 2;
                        tape.conv2d(x, w, b, stride, padding)?
                    }
                    Layer::Dense { .. } => {
                        let (w, b) = (bound.0[cursor], bound.0[cursor + 1]);
                        cursor += 2;
                        tape.dense(x, w, b)?
                    }
                    Layer::MaxPool2d { size } => tape.max_pool2d(x, size)?,
                    Layer::Relu => tape.relu(x)?,
                    Layer::Flatten => tape.flatten(x)?,
                };
            }
            return Ok(x);
        }
        unreachable!("every partition has a section")
    }

    /// `G_f(x)`: flattened features, `[batch, width]`.
    pub fn forward_features(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x)?.shape();
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.arch.input_shape);
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                lhs: shape.to_vec(),
                rhs: expected,
            });
        }
        self.run(tape, bound, Partition::Feature, x)
    }

    /// `G_y(features)`: class logits.
    pub fn forward_label(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        self.run(tape, bound, Partition::Label, features)
    }

    /// `G_d(reverse(features, ratio))`: domain logits behind a reversal node.
    pub fn forward_domain(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: Var,
        ratio: T,
    ) -> Result<Var> {
        let reversed = tape.grad_reverse(features, ratio)?;
        self.run(tape, bound, Partition::Domain, reversed)
    }

    /// Domain head without the reversal node.
    pub fn forward_domain_head(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
        self.run(tape, bound, Partition::Domain, features)
    }

    /// Label logits for a batch, off-tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.logits_with(&mut tape, &bound, xv)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Features and domain logits for a batch, off-tape.
    pub fn features_and_domain(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_features(&mut tape, &bound, xv)?;
        let d = self.forward_domain_head(&mut tape, &bound, f)?;
        Ok((tape.value(f)?.clone(), tape.value(d)?.clone()))
    }

    /// Features, label logits and domain logits for a batch, off-tape.
    pub fn outputs(&self, x: &Tensor<T>) -> Result<Outputs<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.forward_features(&mut tape, &bound, xv)?;
        let z = self.forward_label(&mut tape, &bound, f)?;
        let d = self.forward_domain_head(&mut tape, &bound, f)?;
        Ok(Outputs {
            features: tape.value(f)?.clone(),
            logits: tape.value(z)?.clone(),
            domain: tape.value(d)?.clone(),
        })
    }

    fn logits_with(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let f = self.forward_features(tape, bound, x)?;
        self.forward_label(tape, bound, f)
    }
}

impl<T: Scalar> Classifier<T> for ModelParams<T> {
    fn logits(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        self.logits_with(tape, &bound, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_preset_is_deterministic() {
        let a = ModelParams::<f32>::build(&ArchSpec::mnist_cnn(), 7).unwrap();
        let b = ModelParams::<f32>::build(&ArchSpec::mnist_cnn(), 7).unwrap();
        assert_eq!(a.num_scalars(), b.num_scalars());
        assert_eq!(a, b);
        let c = ModelParams::<f32>::build(&ArchSpec::mnist_cnn(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mnist_preset_shapes() {
        // 28 -3+1 = 26 -> 24 -> pool 12 -> 10 -> 8 -> pool 4; 64·4·4 = 1024.
        let arch = ArchSpec::mnist_cnn();
        assert_eq!(arch.validate().unwrap(), 1024);
        let model = ModelParams::<f32>::build(&arch, 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        assert_eq!(model.predict(&x).unwrap().shape(), &[1, 10]);
        let (f, d) = model.features_and_domain(&x).unwrap();
        assert_eq!(f.shape(), &[1, 1024]);
        assert_eq!(d.shape(), &[1, 2]);
    }

    #[test]
    fn toy_heads_share_feature_width() {
        let arch = ArchSpec::toy_mlp(2);
        assert_eq!(arch.validate().unwrap(), 32);
        assert_eq!(arch.label_head[0], Layer::Dense { inputs: 32, outputs: 2 });
        assert_eq!(arch.domain_head[0], Layer::Dense { inputs: 32, outputs: 2 });
    }

    #[test]
    fn inconsistent_layers_rejected() {
        let mut arch = ArchSpec::toy_mlp(2);
        arch.label_head = vec![Layer::Dense { inputs: 16, outputs: 2 }];
        assert!(ModelParams::<f32>::build(&arch, 0).is_err());
        let mut arch = ArchSpec::toy_mlp(2);
        arch.domain_head = vec![Layer::Dense { inputs: 32, outputs: 3 }];
        assert!(arch.validate().is_err());
        assert!(ArchSpec::preset("resnet", 10).is_err());
    }

    #[test]
    fn every_param_has_one_partition() {
        let model = ModelParams::<f32>::build(&ArchSpec::mnist_cnn(), 0).unwrap();
        for p in model.params() {
            let expected = match p.name.split('.').next().unwrap() {
                "features" => Partition::Feature,
                "label" => Partition::Label,
                "domain" => Partition::Domain,
                other => panic!("unexpected prefix {other}"),
            };
            assert_eq!(p.partition, expected);
        }
        // conv 4 + label dense 3 + domain dense 2, each with weight and bias
        assert_eq!(model.params().len(), 18);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let model = ModelParams::<f32>::build(&ArchSpec::toy_mlp(2), 0).unwrap();
        let err = model.predict(&Tensor::zeros(&[4, 3])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn from_named_round_trip_and_mismatch() {
        let arch = ArchSpec::toy_mlp(3);
        let model = ModelParams::<f64>::build(&arch, 5).unwrap();
        let named: Vec<_> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        assert_eq!(ModelParams::from_named(&arch, named.clone()).unwrap(), model);
        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[3, 32]);
        assert!(ModelParams::from_named(&arch, bad).is_err());
    }
}
