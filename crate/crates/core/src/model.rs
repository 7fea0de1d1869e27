//! Sequential network description.
//!
//! Layers work on two kinds of activations: flat vectors `[n]` (dense) and
//! `[channels, height, width]` feature maps (convolution and pooling). A
//! `Flatten` layer bridges the two.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Fully connected layer. `weights` is `in_dim × out_dim` row-major, so
/// `weights[i * out_dim + j]` connects input neuron `i` to output neuron `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::ShapeMismatch("dense dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense weights: expected {in_dim}x{out_dim} = {} values, got {}",
                in_dim * out_dim,
                weights.len()
            )));
        }
        if bias.len() != out_dim {
            return Err(Error::ShapeMismatch(format!(
                "dense bias: expected {out_dim} values, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    /// Builds a layer from per-input rows, `rows[i][j] = w_ij`.
    pub fn from_rows(rows: &[Vec<f64>], bias: Vec<f64>) -> Result<Self> {
        let in_dim = rows.len();
        let out_dim = bias.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != out_dim) {
            return Err(Error::ShapeMismatch(format!(
                "dense weight row has {} columns, bias has {out_dim}",
                bad.len()
            )));
        }
        Self::new(in_dim, out_dim, rows.concat(), bias)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.out_dim + j]
    }

    /// Incoming weights of output neuron `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.in_dim).map(|i| self.weight(i, j)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.out_dim).map(|r| r.to_vec()).collect()
    }
}

/// 2-D convolution with valid padding. `kernel` is laid out as
/// `out_ch × in_ch × kh × kw`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D {
    in_ch: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2D {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::ShapeMismatch(
                "conv2d channels, kernel size and stride must be positive".into(),
            ));
        }
        let expected = out_ch * in_ch * kh * kw;
        if kernel.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel: expected {out_ch}x{in_ch}x{kh}x{kw} = {expected} values, got {}",
                kernel.len()
            )));
        }
        if bias.len() != out_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias: expected {out_ch} values, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            kh,
            kw,
            stride,
            kernel,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Window/stride pair shared by max and sum pooling (valid padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2D {
    pub window: usize,
    pub stride: usize,
}

impl Pool2D {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::ShapeMismatch("pool window and stride must be positive".into()));
        }
        Ok(Self { window, stride })
    }

    /// Flat input indices covered by output cell `(c, oy, ox)`.
    pub(crate) fn window_indices(
        &self,
        in_shape: [usize; 3],
        c: usize,
        oy: usize,
        ox: usize,
    ) -> impl Iterator<Item = usize> + '_ {
        let [_, h, w] = in_shape;
        let (y0, x0) = (oy * self.stride, ox * self.stride);
        (0..self.window).flat_map(move |dy| (0..self.window).map(move |dx| (c * h + y0 + dy) * w + x0 + dx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2D(Conv2D),
    MaxPool2D(Pool2D),
    SumPool2D(Pool2D),
    ReLU,
    Flatten,
}

fn feature_map(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} expects a [channels, height, width] input, got {shape:?}"
        ))),
    }
}

fn valid_extent(size: usize, window: usize, stride: usize) -> Option<usize> {
    (size >= window).then(|| (size - window) / stride + 1)
}

impl Layer {
    /// Lower-case tag used in model files.
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv2d",
            Layer::MaxPool2D(_) => "maxpool2d",
            Layer::SumPool2D(_) => "sumpool2d",
            Layer::ReLU => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.in_dim] {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer expects input [{}], got {input:?}",
                        d.in_dim
                    )));
                }
                Ok(vec![d.out_dim])
            }
            Layer::Conv2D(c) => {
                let [ch, h, w] = feature_map(input, "conv2d")?;
                if ch != c.in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects {} input channels, got {ch}",
                        c.in_ch
                    )));
                }
                match (valid_extent(h, c.kh, c.stride), valid_extent(w, c.kw, c.stride)) {
                    (Some(oh), Some(ow)) => Ok(vec![c.out_ch, oh, ow]),
                    _ => Err(Error::ShapeMismatch(format!(
                        "conv2d kernel {}x{} larger than input {h}x{w}",
                        c.kh, c.kw
                    ))),
                }
            }
            Layer::MaxPool2D(p) | Layer::SumPool2D(p) => {
                let [ch, h, w] = feature_map(input, self.kind())?;
                match (valid_extent(h, p.window, p.stride), valid_extent(w, p.window, p.stride)) {
                    (Some(oh), Some(ow)) => Ok(vec![ch, oh, ow]),
                    _ => Err(Error::ShapeMismatch(format!(
                        "pool window {} larger than input {h}x{w}",
                        p.window
                    ))),
                }
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub(crate) fn affine(&self, in_shape: &[usize]) -> Option<Affine<'_>> {
        match self {
            Layer::Dense(d) => Some(Affine::Dense(d)),
            Layer::Conv2D(c) => {
                let [_, h, w] = feature_map(in_shape, "conv2d").ok()?;
                let oh = valid_extent(h, c.kh, c.stride)?;
                let ow = valid_extent(w, c.kw, c.stride)?;
                Some(Affine::Conv {
                    conv: c,
                    in_hw: (h, w),
                    out_hw: (oh, ow),
                })
            }
            _ => None,
        }
    }
}

/// Uniform view of the two weighted layer kinds as a sparse linear map
/// `z_j = Σ_i x_i w_ij + b_j`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Affine<'a> {
    Dense(&'a Dense),
    Conv {
        conv: &'a Conv2D,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
}

impl<'a> Affine<'a> {
    pub(crate) fn out_len(&self) -> usize {
        match *self {
            Affine::Dense(d) => d.out_dim,
            Affine::Conv { conv, out_hw, .. } => conv.out_ch * out_hw.0 * out_hw.1,
        }
    }

    pub(crate) fn params(&self) -> &'a [f64] {
        match *self {
            Affine::Dense(d) => &d.weights,
            Affine::Conv { conv, .. } => &conv.kernel,
        }
    }

    pub(crate) fn bias_index(&self, out: usize) -> usize {
        match *self {
            Affine::Dense(_) => out,
            Affine::Conv { out_hw, .. } => out / (out_hw.0 * out_hw.1),
        }
    }

    pub(crate) fn bias(&self, out: usize) -> f64 {
        match *self {
            Affine::Dense(d) => d.bias[out],
            Affine::Conv { conv, .. } => conv.bias[self.bias_index(out)],
        }
    }

    /// Calls `f(out, in, param_index)` for every connection, grouped by
    /// output neuron in increasing order.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        match *self {
            Affine::Dense(d) => {
                for j in 0..d.out_dim {
                    for i in 0..d.in_dim {
                        f(j, i, i * d.out_dim + j);
                    }
                }
            }
            Affine::Conv { conv, in_hw, out_hw } => {
                let (h, w) = in_hw;
                let (oh, ow) = out_hw;
                for o in 0..conv.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let out = (o * oh + oy) * ow + ox;
                            for c in 0..conv.in_ch {
                                for ky in 0..conv.kh {
                                    for kx in 0..conv.kw {
                                        let iy = oy * conv.stride + ky;
                                        let ix = ox * conv.stride + kx;
                                        let k = ((o * conv.in_ch + c) * conv.kh + ky) * conv.kw + kx;
                                        f(out, (c * h + iy) * w + ix, k);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Descriptive fields carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub seed: Option<u64>,
    pub class_labels: Vec<String>,
}

/// Immutable sequential network. Construction validates that every layer's
/// output shape feeds the next and that the network ends in a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    metadata: Metadata,
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, metadata: Metadata) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "input shape must have positive dimensions, got {input_shape:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (k, layer) in layers.iter().enumerate() {
            let next = layer.output_shape(&shapes[k]).map_err(|e| match e {
                Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {k}: {m}")),
                other => other,
            })?;
            shapes.push(next);
        }
        let out = shapes.last().expect("non-empty");
        if out.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "final output must be a logit vector, got shape {out:?}"
            )));
        }
        if !metadata.class_labels.is_empty() && metadata.class_labels.len() != out[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} class labels for {} logits",
                metadata.class_labels.len(),
                out[0]
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            metadata,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    /// Shape of the activation entering layer `k`; `k == layers().len()`
    /// gives the logit shape.
    pub fn activation_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// The sub-network made of `layers[from..]`, taking layer `from`'s input
    /// activation as its input.
    pub fn tail(&self, from: usize) -> Result<Model> {
        if from > self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer index {from} beyond {} layers",
                self.layers.len()
            )));
        }
        Model::new(
            self.shapes[from].clone(),
            self.layers[from..].to_vec(),
            self.metadata.clone(),
        )
    }

    /// Mutable access to the weighted parameters of each layer, for the
    /// fixture trainer.
    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&mut [f64], &mut [f64])> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense(d) => Some((d.weights.as_mut_slice(), d.bias.as_mut_slice())),
            Layer::Conv2D(c) => Some((c.kernel.as_mut_slice(), c.bias.as_mut_slice())),
            _ => None,
        })
    }
}
