//! Classifier and conditional generator networks.
//!
//! Both are described by a flat layer plan. The plan drives parameter
//! creation and the forward pass, so the two always agree on parameter order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, NormStats, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.2;

/// Which statistics batch-norm layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (attack crafting, evaluation).
    Running,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    },
    Linear {
        name: String,
        fan_in: usize,
        fan_out: usize,
    },
    Norm {
        name: String,
        channels: usize,
    },
    Relu,
    LeakyRelu,
    Sigmoid,
    MaxPool,
    GlobalAvgPool,
    Upsample,
    Reshape {
        channels: usize,
        size: usize,
    },
    SaveSkip,
    AddSkip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats<F> {
    name: String,
    mean: Vec<F>,
    var: Vec<F>,
}

/// Parameters plus running statistics of one layer plan.
#[derive(Debug, Clone, PartialEq)]
struct Network<F> {
    plan: Vec<Layer>,
    params: Vec<NamedTensor<F>>,
    running: Vec<RunningStats<F>>,
}

/// Result of recording a network on a graph.
pub struct Pass {
    pub output: Var,
    pub params: Vec<Var>,
    norms: Vec<Var>,
}

impl<F: Scalar> Network<F> {
    fn init(plan: Vec<Layer>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut uniform = |shape: &[usize], bound: f64| {
            Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.gen_range(-bound..=bound)))
        };
        for layer in &plan {
            match layer {
                Layer::Conv {
                    name,
                    cin,
                    cout,
                    bias,
                    ..
                } => {
                    let fan_in = (cin * 9) as f64;
                    params.push(NamedTensor {
                        name: format!("{name}.weight"),
                        value: uniform(&[*cout, *cin, 3, 3], (6.0 / fan_in).sqrt()),
                    });
                    if *bias {
                        params.push(NamedTensor {
                            name: format!("{name}.bias"),
                            value: uniform(&[*cout], 1.0 / fan_in.sqrt()),
                        });
                    }
                }
                Layer::Linear {
                    name,
                    fan_in,
                    fan_out,
                } => {
                    let f = *fan_in as f64;
                    params.push(NamedTensor {
                        name: format!("{name}.weight"),
                        value: uniform(&[*fan_out, *fan_in], (6.0 / f).sqrt()),
                    });
                    params.push(NamedTensor {
                        name: format!("{name}.bias"),
                        value: uniform(&[*fan_out], 1.0 / f.sqrt()),
                    });
                }
                Layer::Norm { name, channels } => {
                    params.push(NamedTensor {
                        name: format!("{name}.weight"),
                        value: Tensor::full(&[*channels], F::one()),
                    });
                    params.push(NamedTensor {
                        name: format!("{name}.bias"),
                        value: Tensor::zeros(&[*channels]),
                    });
                    running.push(RunningStats {
                        name: name.clone(),
                        mean: vec![F::zero(); *channels],
                        var: vec![F::one(); *channels],
                    });
                }
                _ => {}
            }
        }
        Self {
            plan,
            params,
            running,
        }
    }

    fn forward(&self, g: &mut Graph<F>, input: Var, mode: BnMode, trainable: bool) -> Result<Pass> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let v = g.leaf(p.value.clone(), trainable);
                g.set_label(v, p.name.clone());
                v
            })
            .collect();
        let mut next_param = params.iter().copied();
        let mut take = || next_param.next().expect("layer plan and parameters agree");
        let mut running = self.running.iter();
        let mut norms = Vec::new();
        let mut skip = None;
        let mut h = input;
        for layer in &self.plan {
            h = match layer {
                Layer::Conv { stride, bias, .. } => {
                    let w = take();
                    let b = bias.then(&mut take);
                    g.conv2d(h, w, b, *stride, 1)?
                }
                Layer::Linear { .. } => {
                    let w = take();
                    let b = take();
                    g.linear(h, w, Some(b))?
                }
                Layer::Norm { .. } => {
                    let gamma = take();
                    let beta = take();
                    let stats = running.next().expect("one running-stat entry per norm layer");
                    let ns = match mode {
                        BnMode::Batch => NormStats::Batch,
                        BnMode::Running => NormStats::Fixed {
                            mean: stats.mean.clone(),
                            var: stats.var.clone(),
                        },
                    };
                    let out = g.batch_norm(h, gamma, beta, ns)?;
                    norms.push(out);
                    out
                }
                Layer::Relu => g.relu(h),
                Layer::LeakyRelu => g.leaky_relu(h, LEAKY_SLOPE),
                Layer::Sigmoid => g.sigmoid(h),
                Layer::MaxPool => g.max_pool2(h)?,
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Upsample => g.upsample2(h)?,
                Layer::Reshape { channels, size } => {
                    let batch = g.value(h).batch();
                    g.reshape(h, &[batch, *channels, *size, *size])?
                }
                Layer::SaveSkip => {
                    skip = Some(h);
                    h
                }
                Layer::AddSkip => g.add(h, skip.take().expect("skip saved before add"))?,
            };
        }
        Ok(Pass {
            output: h,
            params,
            norms,
        })
    }

    fn update_running(&mut self, g: &Graph<F>, pass: &Pass) {
        let m = F::from_f64_lossy(BN_MOMENTUM);
        for (stats, &node) in self.running.iter_mut().zip(&pass.norms) {
            let Some((mean, var)) = g.batch_norm_stats(node) else { continue };
            let n = g.value(node).numel() / mean.len();
            let unbias = F::from_usize(n).unwrap() / F::from_usize(n.saturating_sub(1).max(1)).unwrap();
            for c in 0..mean.len() {
                stats.mean[c] = (F::one() - m) * stats.mean[c] + m * mean[c];
                stats.var[c] = (F::one() - m) * stats.var[c] + m * var[c] * unbias;
            }
        }
    }

    fn grads(&self, grads: &Gradients<F>, pass: &Pass) -> Vec<Tensor<F>> {
        pass.params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        let mut out: Vec<(String, Tensor<F>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for r in &self.running {
            let c = r.mean.len();
            out.push((format!("{}.running_mean", r.name), Tensor::new(vec![c], r.mean.clone()).unwrap()));
            out.push((format!("{}.running_var", r.name), Tensor::new(vec![c], r.var.clone()).unwrap()));
        }
        out
    }

    fn load_named(&mut self, tensors: &[(String, Tensor<F>)]) -> Result<()> {
        let expected = self.named_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{got_name}' {:?} does not match expected '{name}' {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        let n_params = self.params.len();
        for (p, (_, t)) in self.params.iter_mut().zip(tensors) {
            p.value = t.clone();
        }
        for (i, r) in self.running.iter_mut().enumerate() {
            r.mean = tensors[n_params + 2 * i].1.data().to_vec();
            r.var = tensors[n_params + 2 * i + 1].1.data().to_vec();
        }
        Ok(())
    }

    fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            plan: self.plan.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|&v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
                    var: r.var.iter().map(|&v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }
}

/// Shape of a ResNet-style classifier: a stem, `stages` residual stages
/// (each after the first halves resolution and doubles width), pooled head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub width: usize,
    pub stages: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.num_classes < 2 {
            return Err(Error::config(format!("degenerate classifier spec {self:?}")));
        }
        if !(1..=4).contains(&self.stages) {
            return Err(Error::config(format!("classifier stages must be 1..=4, got {}", self.stages)));
        }
        let min = 1usize << self.stages;
        if self.image_size < min || self.image_size % min != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of {min} for {} stages",
                self.image_size, self.stages
            )));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "classifier(in={},size={},width={},stages={},classes={},bn={})",
            self.in_channels, self.image_size, self.width, self.stages, self.num_classes, self.batch_norm
        )
    }

    fn plan(&self) -> Vec<Layer> {
        let bn = self.batch_norm;
        let mut plan = Vec::new();
        let conv = |plan: &mut Vec<Layer>, name: String, cin, cout, stride| {
            plan.push(Layer::Conv {
                name: format!("{name}.conv"),
                cin,
                cout,
                stride,
                bias: !bn,
            });
            if bn {
                plan.push(Layer::Norm {
                    name: format!("{name}.bn"),
                    channels: cout,
                });
            }
        };
        conv(&mut plan, "stem".into(), self.in_channels, self.width, 1);
        plan.push(Layer::Relu);
        plan.push(Layer::MaxPool);
        let mut channels = self.width;
        for s in 0..self.stages {
            if s > 0 {
                conv(&mut plan, format!("stage{s}.down"), channels, channels * 2, 2);
                plan.push(Layer::Relu);
                channels *= 2;
            }
            plan.push(Layer::SaveSkip);
            conv(&mut plan, format!("stage{s}.block1"), channels, channels, 1);
            plan.push(Layer::Relu);
            conv(&mut plan, format!("stage{s}.block2"), channels, channels, 1);
            plan.push(Layer::AddSkip);
            plan.push(Layer::Relu);
        }
        plan.push(Layer::GlobalAvgPool);
        plan.push(Layer::Linear {
            name: "head".into(),
            fan_in: channels,
            fan_out: self.num_classes,
        });
        plan
    }
}

/// Image classifier; used as the frozen teacher and the trainable student.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F = f32> {
    spec: ClassifierSpec,
    net: Network<F>,
    frozen: bool,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let net = Network::init(spec.plan(), seed);
        Ok(Self {
            spec,
            net,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_params(&self) -> usize {
        self.net.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[NamedTensor<F>] {
        &self.net.params
    }

    /// Mutable parameter access; refused for frozen models.
    pub fn params_mut(&mut self) -> Result<&mut [NamedTensor<F>]> {
        if self.frozen {
            return Err(Error::Frozen(self.spec.descriptor()));
        }
        Ok(&mut self.net.params)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.image_size || shape[3] != s.image_size {
            return Err(Error::config(format!(
                "{} expects input (batch, {}, {}, {}), got {shape:?}",
                s.descriptor(),
                s.in_channels,
                s.image_size,
                s.image_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass. `trainable` asks for parameter gradients and
    /// is rejected on frozen models.
    pub fn forward(&self, g: &mut Graph<F>, images: Var, mode: BnMode, trainable: bool) -> Result<Pass> {
        self.check_input(g.value(images).shape())?;
        if trainable && self.frozen {
            return Err(Error::Frozen(self.spec.descriptor()));
        }
        self.net.forward(g, images, mode, trainable)
    }

    /// Gradient-free logits using running statistics.
    pub fn logits(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(images.shape())?;
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let pass = self.net.forward(&mut g, x, BnMode::Running, false)?;
        Ok(g.value(pass.output).clone())
    }

    /// Parameter gradients in parameter order.
    pub fn param_grads(&self, grads: &Gradients<F>, pass: &Pass) -> Result<Vec<Tensor<F>>> {
        if self.frozen {
            return Err(Error::Frozen(self.spec.descriptor()));
        }
        Ok(self.net.grads(grads, pass))
    }

    /// Folds the batch statistics recorded in `pass` into the running averages.
    pub fn update_running_stats(&mut self, g: &Graph<F>, pass: &Pass) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.spec.descriptor()));
        }
        self.net.update_running(g, pass);
        Ok(())
    }

    /// Parameters followed by running statistics, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.net.named_tensors()
    }

    pub fn load_named(&mut self, tensors: &[(String, Tensor<F>)]) -> Result<()> {
        self.net.load_named(tensors)
    }

    pub fn cast<G: Scalar>(&self) -> Classifier<G> {
        Classifier {
            spec: self.spec.clone(),
            net: self.net.cast(),
            frozen: self.frozen,
        }
    }
}

/// Conditional generator: `(z, one_hot(y))` → affine → reshape → BN →
/// (upsample, 3×3 conv, BN, leaky ReLU) ×2 → 3×3 conv → sigmoid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_base")]
    pub base_size: usize,
    /// Channel widths after the affine layer and after each upsampling conv.
    #[serde(default = "default_gen_channels")]
    pub channels: [usize; 3],
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
}

fn default_latent() -> usize {
    1024
}
fn default_base() -> usize {
    8
}
fn default_gen_channels() -> [usize; 3] {
    [256, 128, 64]
}
fn default_out_channels() -> usize {
    3
}

impl GeneratorSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            latent_dim: default_latent(),
            num_classes,
            base_size: default_base(),
            channels: default_gen_channels(),
            out_channels: default_out_channels(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.base_size * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes < 2 || self.base_size == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("degenerate generator spec {self:?}")));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("generator channel widths must be positive"));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "generator(latent={},classes={},base={},channels={:?},out={})",
            self.latent_dim, self.num_classes, self.base_size, self.channels, self.out_channels
        )
    }

    fn plan(&self) -> Vec<Layer> {
        let [c0, c1, c2] = self.channels;
        let conv = |name: &str, cin, cout| Layer::Conv {
            name: name.into(),
            cin,
            cout,
            stride: 1,
            bias: true,
        };
        let norm = |name: &str, channels| Layer::Norm {
            name: name.into(),
            channels,
        };
        vec![
            Layer::Linear {
                name: "fc".into(),
                fan_in: self.latent_dim + self.num_classes,
                fan_out: c0 * self.base_size * self.base_size,
            },
            Layer::Reshape {
                channels: c0,
                size: self.base_size,
            },
            norm("bn0", c0),
            Layer::Upsample,
            conv("conv1", c0, c1),
            norm("bn1", c1),
            Layer::LeakyRelu,
            Layer::Upsample,
            conv("conv2", c1, c2),
            norm("bn2", c2),
            Layer::LeakyRelu,
            conv("conv3", c2, self.out_channels),
            Layer::Sigmoid,
        ]
    }
}

/// Label-conditioned image generator. Batch-norm always uses batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<F = f32> {
    spec: GeneratorSpec,
    net: Network<F>,
}

impl<F: Scalar> Generator<F> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let net = Network::init(spec.plan(), seed);
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.net.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn params(&self) -> &[NamedTensor<F>] {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<F>] {
        &mut self.net.params
    }

    /// Builds the `(batch, latent + C)` conditioning input.
    pub fn conditioning(&self, z: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        let s = &self.spec;
        z.expect_shape(&[labels.len(), s.latent_dim], "generator noise")?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= s.num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {} classes", s.num_classes)));
        }
        let width = s.latent_dim + s.num_classes;
        let mut data = vec![F::zero(); labels.len() * width];
        for (i, &y) in labels.iter().enumerate() {
            let row = &mut data[i * width..(i + 1) * width];
            row[..s.latent_dim].copy_from_slice(z.row(i));
            row[s.latent_dim + y] = F::one();
        }
        Tensor::new(vec![labels.len(), width], data)
    }

    /// Records `g(z, y)` on the graph.
    pub fn forward(&self, g: &mut Graph<F>, z: &Tensor<F>, labels: &[usize], trainable: bool) -> Result<Pass> {
        let input = self.conditioning(z, labels)?;
        let x = g.leaf(input, false);
        self.net.forward(g, x, BnMode::Batch, trainable)
    }

    /// Gradient-free `g(z, y)`.
    pub fn generate(&self, z: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, z, labels, false)?;
        Ok(g.value(pass.output).clone())
    }

    pub fn param_grads(&self, grads: &Gradients<F>, pass: &Pass) -> Vec<Tensor<F>> {
        self.net.grads(grads, pass)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.net.named_tensors()
    }

    pub fn load_named(&mut self, tensors: &[(String, Tensor<F>)]) -> Result<()> {
        self.net.load_named(tensors)
    }

    pub fn cast<G: Scalar>(&self) -> Generator<G> {
        Generator {
            spec: self.spec.clone(),
            net: self.net.cast(),
        }
    }
}

/// Row-wise `softmax(logits / tau)`.
pub fn softmax_with_temperature<F: Scalar>(logits: &Tensor<F>, tau: f64) -> Result<Tensor<F>> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::input(format!("temperature must be positive, got {tau}")));
    }
    if logits.ndim() != 2 {
        return Err(Error::shape(&[0, 0], logits.shape(), "softmax expects (batch, classes)"));
    }
    let t = F::from_f64_lossy(tau);
    let mut out = Tensor::zeros(logits.shape());
    for i in 0..logits.batch() {
        let src = logits.row(i).to_vec();
        kernels::softmax_row(&src, t, out.row_mut(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ClassifierSpec {
        ClassifierSpec {
            in_channels: 3,
            image_size: 16,
            width: 4,
            stages: 2,
            num_classes: 10,
            batch_norm: true,
        }
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let model = Classifier::<f32>::new(small_spec(), 1).unwrap();
        let x = Tensor::from_fn(&[4, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        assert_eq!(model.logits(&x).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut model = Classifier::<f32>::new(small_spec(), 1).unwrap();
        for p in model.params_mut().unwrap().iter_mut().filter(|p| p.name.starts_with("head")) {
            p.value.data_mut().fill(0.0);
        }
        let logits = model.logits(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_are_deterministic() {
        let model = Classifier::<f32>::new(small_spec(), 9).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 31) % 17) as f32 / 17.0);
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
        let again = Classifier::<f32>::new(small_spec(), 9).unwrap();
        assert_eq!(again.logits(&x).unwrap().data(), a.data());
    }

    #[test]
    fn wrong_input_shape_is_a_config_error() {
        let model = Classifier::<f32>::new(small_spec(), 1).unwrap();
        let err = model.logits(&Tensor::zeros(&[2, 1, 16, 16])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn frozen_model_rejects_trainable_forward() {
        let mut model = Classifier::<f32>::new(small_spec(), 1).unwrap();
        model.freeze();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 16, 16]), false);
        assert!(matches!(model.forward(&mut g, x, BnMode::Running, true), Err(Error::Frozen(_))));
        assert!(model.forward(&mut g, x, BnMode::Running, false).is_ok());
        assert!(model.params_mut().is_err());
    }

    #[test]
    fn generator_output_shape_and_range() {
        let spec = GeneratorSpec {
            latent_dim: 32,
            num_classes: 10,
            base_size: 4,
            channels: [16, 8, 4],
            out_channels: 3,
        };
        let gen = Generator::<f32>::new(spec, 3).unwrap();
        let z = Tensor::from_fn(&[5, 32], |i| ((i * 13 % 11) as f32 - 5.0) * 3.0);
        let imgs = gen.generate(&z, &[0, 1, 2, 3, 9]).unwrap();
        assert_eq!(imgs.shape(), &[5, 3, 16, 16]);
        assert!(imgs.min() >= 0.0 && imgs.max() <= 1.0);
        assert_eq!(gen.generate(&z, &[0, 1, 2, 3, 9]).unwrap(), imgs);
    }

    #[test]
    fn generator_rejects_out_of_range_labels() {
        let spec = GeneratorSpec {
            latent_dim: 8,
            num_classes: 3,
            base_size: 2,
            channels: [4, 4, 4],
            out_channels: 1,
        };
        let gen = Generator::<f32>::new(spec, 3).unwrap();
        let err = gen.generate(&Tensor::zeros(&[2, 8]), &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_with_temperature(&Tensor::<f64>::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let l = Tensor::<f64>::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let p = softmax_with_temperature(&l, 1.0).unwrap();
        // e^2 / (e^2 + 1)
        assert!((p.data()[0] - 0.8808).abs() < 1e-4 && (p.data()[1] - 0.1192).abs() < 1e-4);
        let p = softmax_with_temperature(&l, 1000.0).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 1e-3));
        assert!(softmax_with_temperature(&l, 0.0).is_err());
        assert!(softmax_with_temperature(&l, -1.0).is_err());
    }
}
