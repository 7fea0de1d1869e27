//! Deterministic synthetic data and toy models.
//!
//! Positive images carry a bright square patch at a random position, negative
//! images are background noise only. A model that separates the two has to
//! look at the patch, which gives the evaluation code a known ground truth.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{forward, forward_traced, layer_backward, ParamGrad};
use crate::error::{Error, Result};
use crate::eval::BoundingBox;
use crate::model::{Conv2D, Dense, Layer, Metadata, Model, Pool2D};
use crate::tensor::Tensor;

pub const CLASS_LABELS: [&str; 2] = ["absent", "present"];

/// Mean epoch cross-entropy (nats) above which training counts as diverged.
/// An untrained two-class model sits near ln 2.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_level: f64,
    pub seed: u64,
    pub sample_count: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            patch_size: 3,
            noise_level: 0.0,
            seed: 0,
            sample_count: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::SpecError("image size must be positive".into()));
        }
        if self.patch_size == 0 || self.patch_size > self.height || self.patch_size > self.width {
            return Err(Error::SpecError(format!(
                "patch {p}x{p} does not fit a {}x{} image",
                self.height,
                self.width,
                p = self.patch_size
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::SpecError(format!("invalid noise level {}", self.noise_level)));
        }
        if self.sample_count == 0 {
            return Err(Error::SpecError("sample count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    /// 1 when the patch is present.
    pub label: usize,
    pub bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn positives(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label == 1)
    }

    /// `(image, label)` pairs as consumed by the evaluation code.
    pub fn targets(&self) -> Vec<(&Tensor, usize)> {
        self.samples.iter().map(|s| (&s.image, s.label)).collect()
    }
}

/// Even-indexed samples are positive, odd-indexed negative.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, p) = (spec.height, spec.width, spec.patch_size);
    let mut samples = Vec::with_capacity(spec.sample_count);
    for i in 0..spec.sample_count {
        let label = usize::from(i % 2 == 0);
        let bbox = if label == 1 {
            let y = rng.random_range(0..=h - p);
            let x = rng.random_range(0..=w - p);
            Some(BoundingBox::new(x, y, p, p)?)
        } else {
            None
        };
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let base = match bbox {
                    Some(b) if b.contains(r, c) => 1.0,
                    _ => 0.0,
                };
                let v = if spec.noise_level > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    base + spec.noise_level * n
                } else {
                    base
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
        samples.push(Sample {
            image: Tensor::new(vec![1, h, w], data)?,
            label,
            bbox,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// First box (row-major) of the planted patch's size that does not touch it.
pub fn decoy_box(spec: &SyntheticSpec, planted: &BoundingBox) -> Option<BoundingBox> {
    let (bh, bw) = (planted.height, planted.width);
    for y in 0..=spec.height.checked_sub(bh)? {
        for x in 0..=spec.width.checked_sub(bw)? {
            let cand = BoundingBox {
                x,
                y,
                width: bw,
                height: bh,
            };
            if !cand.intersects(planted) {
                return Some(cand);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Hidden layer widths of a ReLU MLP.
    Mlp { hidden: Vec<usize> },
    /// Channel counts of 3×3 ReLU convolutions, followed by 2×2 max-pooling
    /// and a dense read-out.
    ConvNet { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp { hidden: vec![16] },
            learning_rate: 0.05,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    /// Training-set accuracy of the returned model.
    pub accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let r = 1.0 / libm::sqrt(fan_in as f64);
    (0..n).map(|_| rng.random_range(-r..=r)).collect()
}

fn dense_layer(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Result<Layer> {
    let w = uniform_init(rng, n_in, n_in * n_out);
    Ok(Layer::Dense(Dense::new(n_in, n_out, w, vec![0.0; n_out])?))
}

/// Freshly initialized model for `input_shape` with two output logits.
pub fn build_model(architecture: &Architecture, input_shape: &[usize], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let name;
    match architecture {
        Architecture::Mlp { hidden } => {
            name = String::from("toy-mlp");
            layers.push(Layer::Flatten);
            let mut n_in: usize = input_shape.iter().product();
            for &n in hidden {
                layers.push(dense_layer(&mut rng, n_in, n)?);
                layers.push(Layer::ReLU);
                n_in = n;
            }
            layers.push(dense_layer(&mut rng, n_in, 2)?);
        }
        Architecture::ConvNet { channels } => {
            name = String::from("toy-convnet");
            let [mut ch, mut h, mut w] = match *input_shape {
                [c, h, w] => [c, h, w],
                _ => return Err(Error::SpecError("convnet needs a [c, h, w] input".into())),
            };
            for &out in channels {
                if h < 3 || w < 3 {
                    return Err(Error::SpecError("input too small for another 3x3 convolution".into()));
                }
                let fan_in = ch * 9;
                let k = uniform_init(&mut rng, fan_in, out * fan_in);
                layers.push(Layer::Conv2D(Conv2D::new(ch, out, (3, 3), 1, k, vec![0.0; out])?));
                layers.push(Layer::ReLU);
                ch = out;
                h -= 2;
                w -= 2;
            }
            if h >= 2 && w >= 2 {
                layers.push(Layer::MaxPool2D(Pool2D::new(2, 2)?));
                h = (h - 2) / 2 + 1;
                w = (w - 2) / 2 + 1;
            }
            layers.push(Layer::Flatten);
            layers.push(dense_layer(&mut rng, ch * h * w, 2)?);
        }
    }
    Model::new(
        input_shape.to_vec(),
        layers,
        Metadata {
            name,
            seed: Some(seed),
            class_labels: CLASS_LABELS.iter().map(|s| String::from(*s)).collect(),
        },
    )
}

fn random_dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Result<Layer> {
    let w = (0..n_in * n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..n_out).map(|_| rng.random_range(-0.5..0.5)).collect();
    Ok(Layer::Dense(Dense::new(n_in, n_out, w, b)?))
}

/// A small random network for property tests: either a dense ReLU stack on
/// a short vector, or a convolution (optionally pooled) feeding a dense
/// head. Weights are uniform in `[-1, 1)`, biases in `[-0.5, 0.5)`. Every
/// network has between two and four weighted or pooling layers.
pub fn random_model(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let input_shape;
    if rng.random_bool(0.5) {
        let mut n = rng.random_range(2..=4);
        input_shape = vec![n];
        let depth = rng.random_range(2..=4);
        for d in 0..depth {
            let out = if d + 1 == depth {
                rng.random_range(1..=3)
            } else {
                rng.random_range(2..=4)
            };
            layers.push(random_dense(&mut rng, n, out)?);
            if d + 1 < depth {
                layers.push(Layer::ReLU);
            }
            n = out;
        }
    } else {
        let ch = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
        input_shape = vec![ch, h, w];
        let k = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let out_ch = rng.random_range(1..=3);
        let kernel = (0..out_ch * ch * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..out_ch).map(|_| rng.random_range(-0.5..0.5)).collect();
        layers.push(Layer::Conv2D(Conv2D::new(ch, out_ch, (k, k), stride, kernel, bias)?));
        layers.push(Layer::ReLU);
        let (mut oh, mut ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut blocks = 1;
        if oh >= 2 && ow >= 2 && rng.random_bool(0.7) {
            let pool = Pool2D::new(2, rng.random_range(1..=2))?;
            layers.push(if rng.random_bool(0.5) {
                Layer::MaxPool2D(pool)
            } else {
                Layer::SumPool2D(pool)
            });
            oh = (oh - 2) / pool.stride + 1;
            ow = (ow - 2) / pool.stride + 1;
            blocks += 1;
        }
        layers.push(Layer::Flatten);
        let mut n = out_ch * oh * ow;
        if blocks < 3 && rng.random_bool(0.5) {
            let hidden = rng.random_range(2..=4);
            layers.push(random_dense(&mut rng, n, hidden)?);
            layers.push(Layer::ReLU);
            n = hidden;
        }
        let out = rng.random_range(1..=3);
        layers.push(random_dense(&mut rng, n, out)?);
    }
    Model::new(
        input_shape,
        layers,
        Metadata {
            name: format!("random-{seed}"),
            seed: Some(seed),
            class_labels: Vec::new(),
        },
    )
}

/// Uniform `[0, 1)` input of the model's shape.
pub fn random_input(model: &Model, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.input_shape().to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(shape, data).expect("shape from a valid model")
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        if forward(model, &s.image)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Cross-entropy of two-logit softmax and its gradient with respect to the
/// logits.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - m)).collect();
    let total: f64 = exps.iter().sum();
    let loss = libm::log(total) + m - logits[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / total - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Plain per-sample SGD on the softmax cross-entropy of the two logits.
pub fn train_toy(dataset: &Dataset, config: &TrainConfig) -> Result<Trained> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::SpecError("cannot train on an empty dataset".into()))?;
    let mut model = build_model(&config.architecture, first.image.shape(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_7a1e);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let sample = &dataset.samples[idx];
            let (logits, trace) = match forward_traced(&model, &sample.image) {
                Ok(v) => v,
                Err(Error::NonFiniteValue(_)) => return Err(Error::DivergedTraining { epoch }),
                Err(e) => return Err(e),
            };
            let (loss, mut grad) = softmax_cross_entropy(logits.data(), sample.label);
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            epoch_loss += loss;

            let mut grads: Vec<ParamGrad> = Vec::new();
            for (k, layer) in model.layers().iter().enumerate().rev() {
                let mut pg = match layer {
                    Layer::Dense(d) => Some(ParamGrad {
                        weights: vec![0.0; d.weights().len()],
                        bias: vec![0.0; d.bias().len()],
                    }),
                    Layer::Conv2D(c) => Some(ParamGrad {
                        weights: vec![0.0; c.kernel().len()],
                        bias: vec![0.0; c.bias().len()],
                    }),
                    _ => None,
                };
                grad = layer_backward(layer, &trace, k, &grad, pg.as_mut());
                grads.extend(pg);
            }
            grads.reverse();
            for ((weights, bias), g) in model.params_mut().zip(&grads) {
                for (p, d) in weights.iter_mut().zip(&g.weights) {
                    *p -= config.learning_rate * d;
                }
                for (p, d) in bias.iter_mut().zip(&g.bias) {
                    *p -= config.learning_rate * d;
                }
            }
        }
        let mean = epoch_loss / dataset.samples.len() as f64;
        if mean.is_nan() || mean > DIVERGENCE_LOSS {
            return Err(Error::DivergedTraining { epoch });
        }
        loss_history.push(mean);
    }

    let accuracy = match accuracy(&model, &dataset.samples) {
        Ok(a) => a,
        Err(Error::NonFiniteValue(_)) => return Err(Error::DivergedTraining { epoch: config.epochs }),
        Err(e) => return Err(e),
    };
    Ok(Trained {
        model,
        accuracy,
        loss_history,
    })
}
