//! Forward inference with activation tracing and reverse-mode gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Layer, Model, Pool2D};
use crate::tensor::Tensor;

/// Activations recorded during one forward pass.
///
/// Activation `k` is the input of layer `k` and the output of layer `k - 1`,
/// so consecutive layers share storage and always agree.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ActivationTrace {
    /// Number of traced layers.
    pub fn len(&self) -> usize {
        self.argmax.len()
    }

    pub fn is_empty(&self) -> bool {
        self.argmax.is_empty()
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("non-empty")
    }

    pub fn layer_input(&self, k: usize) -> &Tensor {
        &self.activations[k]
    }

    pub fn layer_output(&self, k: usize) -> &Tensor {
        &self.activations[k + 1]
    }

    /// Activation at position `k` (`0` = network input, `len()` = logits).
    pub fn activation(&self, k: usize) -> &Tensor {
        &self.activations[k]
    }

    /// For a max-pool layer, the flat input index selected by each output cell.
    pub fn argmax(&self, k: usize) -> Option<&[usize]> {
        self.argmax[k].as_deref()
    }

    /// Checks that this trace is exactly what `forward_traced` produces for
    /// `model` on the recorded input.
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.len() != model.layers().len() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, model has {}",
                self.len(),
                model.layers().len()
            )));
        }
        for (k, layer) in model.layers().iter().enumerate() {
            let input = self.layer_input(k);
            if input.shape() != model.activation_shape(k) {
                return Err(Error::TraceMismatch(format!(
                    "activation {k} has shape {:?}, model expects {:?}",
                    input.shape(),
                    model.activation_shape(k)
                )));
            }
            let (out, argmax) = layer_forward(layer, input)?;
            if &out != self.layer_output(k) || argmax != self.argmax[k] {
                return Err(Error::TraceMismatch(format!(
                    "layer {k} ({}) output differs from recomputation",
                    layer.kind()
                )));
            }
        }
        Ok(())
    }
}

fn check_input(model: &Model, input: &Tensor) -> Result<()> {
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "model expects input {:?}, got {:?}",
            model.input_shape(),
            input.shape()
        )));
    }
    Ok(())
}

fn pool_forward(p: &Pool2D, input: &Tensor, out_shape: &[usize], max: bool) -> (Vec<f64>, Option<Vec<usize>>) {
    let in_shape = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let (ch, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(ch * oh * ow);
    let mut winners = Vec::with_capacity(if max { ch * oh * ow } else { 0 });
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut idx = p.window_indices(in_shape, c, oy, ox);
                if max {
                    let first = idx.next().expect("window is non-empty");
                    let best = idx.fold(first, |b, i| if x[i] > x[b] { i } else { b });
                    out.push(x[best]);
                    winners.push(best);
                } else {
                    out.push(idx.map(|i| x[i]).sum());
                }
            }
        }
    }
    (out, max.then_some(winners))
}

pub(crate) fn layer_forward(layer: &Layer, input: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    let out_shape = layer.output_shape(input.shape())?;
    let x = input.data();
    let (data, argmax) = match layer {
        Layer::Dense(_) | Layer::Conv2D(_) => {
            let affine = layer.affine(input.shape()).expect("weighted layer");
            let w = affine.params();
            let mut z: Vec<f64> = (0..affine.out_len()).map(|j| affine.bias(j)).collect();
            affine.for_each_tap(|j, i, k| z[j] += x[i] * w[k]);
            (z, None)
        }
        Layer::MaxPool2D(p) => pool_forward(p, input, &out_shape, true),
        Layer::SumPool2D(p) => pool_forward(p, input, &out_shape, false),
        Layer::ReLU => (x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), None),
        Layer::Flatten => (x.to_vec(), None),
    };
    Ok((Tensor::new(out_shape, data)?, argmax))
}

/// Runs the network and returns the logit vector.
pub fn forward(model: &Model, input: &Tensor) -> Result<Tensor> {
    check_input(model, input)?;
    let mut x = input.clone();
    for (k, layer) in model.layers().iter().enumerate() {
        x = layer_forward(layer, &x)?.0;
        if !x.is_finite() {
            return Err(Error::NonFiniteValue(format!("output of layer {k} ({})", layer.kind())));
        }
    }
    Ok(x)
}

/// Runs the network, recording every intermediate activation.
pub fn forward_traced(model: &Model, input: &Tensor) -> Result<(Tensor, ActivationTrace)> {
    check_input(model, input)?;
    let mut activations = Vec::with_capacity(model.layers().len() + 1);
    let mut argmax = Vec::with_capacity(model.layers().len());
    activations.push(input.clone());
    for (k, layer) in model.layers().iter().enumerate() {
        let (out, winners) = layer_forward(layer, &activations[k])?;
        if !out.is_finite() {
            return Err(Error::NonFiniteValue(format!("output of layer {k} ({})", layer.kind())));
        }
        activations.push(out);
        argmax.push(winners);
    }
    let output = activations.last().expect("non-empty").clone();
    Ok((output, ActivationTrace { activations, argmax }))
}

/// Parameter gradients of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Pulls `grad_out` back through layer `k`. Parameter gradients are
/// accumulated into `params` when given.
pub(crate) fn layer_backward(
    layer: &Layer,
    trace: &ActivationTrace,
    k: usize,
    grad_out: &[f64],
    params: Option<&mut ParamGrad>,
) -> Vec<f64> {
    let input = trace.layer_input(k);
    let x = input.data();
    let mut grad_in = vec![0.0; x.len()];
    match layer {
        Layer::Dense(_) | Layer::Conv2D(_) => {
            let affine = layer.affine(input.shape()).expect("weighted layer");
            let w = affine.params();
            affine.for_each_tap(|j, i, p| grad_in[i] += w[p] * grad_out[j]);
            if let Some(pg) = params {
                affine.for_each_tap(|j, i, p| pg.weights[p] += x[i] * grad_out[j]);
                for (j, g) in grad_out.iter().enumerate() {
                    pg.bias[affine.bias_index(j)] += g;
                }
            }
        }
        Layer::MaxPool2D(_) => {
            let winners = trace.argmax(k).expect("max-pool trace records winners");
            for (j, &i) in winners.iter().enumerate() {
                grad_in[i] += grad_out[j];
            }
        }
        Layer::SumPool2D(p) => {
            let s = input.shape();
            let in_shape = [s[0], s[1], s[2]];
            let out = trace.layer_output(k).shape();
            let mut j = 0;
            for c in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        for i in p.window_indices(in_shape, c, oy, ox) {
                            grad_in[i] += grad_out[j];
                        }
                        j += 1;
                    }
                }
            }
        }
        // Derivative at exactly zero pre-activation is taken as 0.
        Layer::ReLU => {
            for (g, (&v, &go)) in grad_in.iter_mut().zip(x.iter().zip(grad_out)) {
                *g = if v > 0.0 { go } else { 0.0 };
            }
        }
        Layer::Flatten => grad_in.copy_from_slice(grad_out),
    }
    grad_in
}

fn seed_gradient(model: &Model, output_index: usize) -> Result<Vec<f64>> {
    let n = model.output_len();
    if output_index >= n {
        return Err(Error::ShapeMismatch(format!(
            "output index {output_index} out of range for {n} logits"
        )));
    }
    let mut g = vec![0.0; n];
    g[output_index] = 1.0;
    Ok(g)
}

/// Gradient of logit `output_index` with respect to every activation in the
/// trace; entry `k` matches `trace.activation(k)`.
pub fn activation_gradients(model: &Model, trace: &ActivationTrace, output_index: usize) -> Result<Vec<Tensor>> {
    let mut grads = vec![seed_gradient(model, output_index)?];
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let g = layer_backward(layer, trace, k, grads.last().expect("seeded"), None);
        grads.push(g);
    }
    grads.reverse();
    grads
        .into_iter()
        .enumerate()
        .map(|(k, g)| Tensor::new(trace.activation(k).shape().to_vec(), g))
        .collect()
}

/// `∂f_{output_index} / ∂x_p` for every input element.
pub fn gradient(model: &Model, input: &Tensor, output_index: usize) -> Result<Tensor> {
    seed_gradient(model, output_index)?;
    let (_, trace) = forward_traced(model, input)?;
    let mut grads = activation_gradients(model, &trace, output_index)?;
    Ok(grads.swap_remove(0))
}
