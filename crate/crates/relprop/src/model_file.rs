//! JSON model files.
//!
//! ```json
//! {
//!   "input_shape": [2],
//!   "layers": [
//!     {"type": "dense", "weights": [[1.0, 0.0], [0.0, 1.0]], "bias": [0.0, 0.0]},
//!     {"type": "relu"}
//!   ],
//!   "metadata": {"name": "identity", "seed": null, "class_labels": []}
//! }
//! ```
//!
//! Dense weights are stored as `in_dim` rows of `out_dim` values, so
//! `weights[i][j]` connects input `i` to output `j`. Convolution kernels are
//! nested `out_ch × in_ch × kh × kw`. Floats are written in shortest
//! round-trip form and parsed exactly, so save followed by load reproduces
//! every weight bit for bit.

use std::path::Path;

use relprop_core::model::{Conv2D, Dense, Layer, Metadata, Model, Pool2D};
use relprop_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{self, FormatError, Result};

const LAYER_TYPES: [&str; 6] = ["dense", "conv2d", "maxpool2d", "sumpool2d", "relu", "flatten"];

#[derive(Serialize, Deserialize)]
struct ModelFile {
    input_shape: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    metadata: MetadataFile,
}

#[derive(Serialize, Deserialize, Default)]
struct MetadataFile {
    #[serde(default)]
    name: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    class_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerFile {
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Sumpool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

fn shape_error(msg: String) -> FormatError {
    FormatError::Core(Error::ShapeMismatch(msg))
}

impl LayerFile {
    fn from_layer(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => LayerFile::Dense {
                weights: d.rows(),
                bias: d.bias().to_vec(),
            },
            Layer::Conv2D(c) => {
                let (kh, kw) = c.kernel_size();
                let k = c.kernel();
                let kernel = k
                    .chunks(c.in_channels() * kh * kw)
                    .map(|o| {
                        o.chunks(kh * kw)
                            .map(|i| i.chunks(kw).map(<[f64]>::to_vec).collect())
                            .collect()
                    })
                    .collect();
                LayerFile::Conv2d {
                    kernel,
                    bias: c.bias().to_vec(),
                    stride: c.stride(),
                }
            }
            Layer::MaxPool2D(p) => LayerFile::Maxpool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::SumPool2D(p) => LayerFile::Sumpool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::ReLU => LayerFile::Relu,
            Layer::Flatten => LayerFile::Flatten,
        }
    }

    fn into_layer(self, index: usize) -> Result<Layer> {
        let ctx = |e: Error| match e {
            Error::ShapeMismatch(m) => shape_error(format!("layer {index}: {m}")),
            other => FormatError::Core(other),
        };
        Ok(match self {
            LayerFile::Dense { weights, bias } => Layer::Dense(Dense::from_rows(&weights, bias).map_err(ctx)?),
            LayerFile::Conv2d { kernel, bias, stride } => {
                let out_ch = kernel.len();
                let in_ch = kernel.first().map_or(0, Vec::len);
                let planes: Vec<&Vec<Vec<f64>>> = kernel.iter().flatten().collect();
                let kh = planes.first().map_or(0, |p| p.len());
                let kw = planes.first().and_then(|p| p.first()).map_or(0, Vec::len);
                if kernel.iter().any(|o| o.len() != in_ch)
                    || planes.iter().any(|p| p.len() != kh || p.iter().any(|r| r.len() != kw))
                {
                    return Err(shape_error(format!("layer {index}: ragged kernel")));
                }
                let flat: Vec<f64> = kernel.into_iter().flatten().flatten().flatten().collect();
                Layer::Conv2D(Conv2D::new(in_ch, out_ch, (kh, kw), stride, flat, bias).map_err(ctx)?)
            }
            LayerFile::Maxpool2d { window, stride } => Layer::MaxPool2D(Pool2D::new(window, stride).map_err(ctx)?),
            LayerFile::Sumpool2d { window, stride } => Layer::SumPool2D(Pool2D::new(window, stride).map_err(ctx)?),
            LayerFile::Relu => Layer::ReLU,
            LayerFile::Flatten => Layer::Flatten,
        })
    }
}

/// Parses and validates a model description.
pub fn model_from_json(text: &str) -> Result<Model> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| FormatError::Parse(e.to_string()))?;
    // Report unknown layer types by name rather than as a generic serde error.
    if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
        for layer in layers {
            if let Some(kind) = layer.get("type").and_then(|t| t.as_str()) {
                if !LAYER_TYPES.contains(&kind) {
                    return Err(FormatError::UnknownLayerType(kind.to_string()));
                }
            }
        }
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| FormatError::Parse(e.to_string()))?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(k, l)| l.into_layer(k))
        .collect::<Result<Vec<_>>>()?;
    let metadata = Metadata {
        name: file.metadata.name,
        seed: file.metadata.seed,
        class_labels: file.metadata.class_labels,
    };
    Ok(Model::new(file.input_shape, layers, metadata)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn model_to_json(model: &Model) -> String {
    let meta = model.metadata();
    let file = ModelFile {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(LayerFile::from_layer).collect(),
        metadata: MetadataFile {
            name: meta.name.clone(),
            seed: meta.seed,
            class_labels: meta.class_labels.clone(),
        },
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = error::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Parse(format!("{}: {e}", path.display())))?;
    model_from_json(&text)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    error::write(path, model_to_json(model).as_bytes())
}
