//! Numerical check of the deep Taylor reading of the z⁺ rule.
//!
//! If a ReLU neuron's relevance factors as `R_j = x_j c_j` with `c_j > 0`, it
//! is itself a "relevance neuron" `max(0, Σ_i x_i w_ij c_j + b_j c_j)`. Moving
//! from `x` along the line that scales down the positively contributing
//! inputs until the pre-activation reaches a small `ε`, and reading off the
//! first-order Taylor terms at that point, reproduces the z⁺ messages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{forward_traced, ActivationTrace};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::rules::{dense_messages, propagate_unchecked, RelevanceMap, RuleConfig};

pub const DEFAULT_EPSILON: f64 = 1e-9;

fn pre_activation(x: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    x.iter().zip(w).map(|(xi, wi)| xi * wi * c).sum::<f64>() + b * c
}

/// `max(0, Σ_i x_i w_i c + b c)`.
pub fn relevance_neuron(x: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    pre_activation(x, w, b, c).max(0.0)
}

/// Analytic gradient of [`relevance_neuron`]: `w_i c` while active, zero
/// otherwise.
pub fn relevance_neuron_gradient(x: &[f64], w: &[f64], b: f64, c: f64) -> Vec<f64> {
    if pre_activation(x, w, b, c) > 0.0 {
        w.iter().map(|wi| wi * c).collect()
    } else {
        vec![0.0; w.len()]
    }
}

/// Root point of a relevance neuron on the search line.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReference {
    pub neuron: usize,
    pub c: f64,
    pub t_star: f64,
    pub reference_point: Vec<f64>,
    pub epsilon: f64,
    /// `w_i c > 0`: inputs that get scaled down along the line.
    pub direction_mask: Vec<bool>,
}

impl TaylorReference {
    /// Pre-activation of the relevance neuron at the reference point.
    pub fn residual_pre_activation(&self, w: &[f64], b: f64) -> f64 {
        pre_activation(&self.reference_point, w, b, self.c)
    }
}

/// Solves `Σ_i x̃_i w_i c + b c = ε` for `x̃ = x − t (x ⊙ 1{w c > 0})`.
pub fn find_reference(x: &[f64], w: &[f64], b: f64, c: f64, epsilon: f64) -> Result<TaylorReference> {
    if x.len() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} weights",
            x.len(),
            w.len()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "relevance constant must be positive, got {c}"
        )));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let z = pre_activation(x, w, b, c);
    if z <= epsilon {
        return Err(Error::InactiveNeuron(z));
    }
    let direction_mask: Vec<bool> = w.iter().map(|wi| wi * c > 0.0).collect();
    let deactivated: f64 = x
        .iter()
        .zip(w)
        .zip(&direction_mask)
        .filter(|(_, &m)| m)
        .map(|((xi, wi), _)| xi * wi * c)
        .sum();
    if deactivated.is_nan() || deactivated <= 0.0 {
        return Err(Error::UnreachableEpsilon);
    }
    let t_star = (z - epsilon) / deactivated;
    let reference_point = x
        .iter()
        .zip(&direction_mask)
        .map(|(&xi, &m)| if m { xi * (1.0 - t_star) } else { xi })
        .collect();
    Ok(TaylorReference {
        neuron: 0,
        c,
        t_star,
        reference_point,
        epsilon,
        direction_mask,
    })
}

/// First-order terms `∂R_j/∂x_i |_x̃ · (x_i − x̃_i)`.
pub fn taylor_term(reference: &TaylorReference, x: &[f64], w: &[f64], b: f64) -> Vec<f64> {
    let grad = relevance_neuron_gradient(&reference.reference_point, w, b, reference.c);
    grad.iter()
        .zip(x.iter().zip(&reference.reference_point))
        .map(|(g, (xi, ri))| g * (xi - ri))
        .collect()
}

/// Per-neuron outcome of [`verify_zplus_identity`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronCheck {
    pub neuron: usize,
    pub relevance: f64,
    pub c: f64,
    pub t_star: f64,
    pub taylor_sum: f64,
    /// Largest of the three pairwise discrepancies, divided by `|R_j|`.
    pub max_relative_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub layer: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub neurons: Vec<NeuronCheck>,
    /// Neurons with zero relevance, whose messages must vanish on every path.
    pub zero_relevance: usize,
    /// Neurons the product assumption does not cover (negative or
    /// unexplained relevance, nothing to deactivate).
    pub skipped: usize,
    pub max_taylor_vs_closed: f64,
    pub max_taylor_vs_zplus: f64,
    pub max_closed_vs_zplus: f64,
    pub max_abs_discrepancy: f64,
}

impl TaylorReport {
    pub fn max_relative_discrepancy(&self) -> f64 {
        self.max_taylor_vs_closed
            .max(self.max_taylor_vs_zplus)
            .max(self.max_closed_vs_zplus)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_discrepancy() <= self.tolerance
    }
}

fn dense_at(model: &Model, layer_index: usize) -> Result<&crate::model::Dense> {
    match model.layers().get(layer_index) {
        Some(Layer::Dense(d)) => Ok(d),
        Some(other) => Err(Error::InvalidConfig(format!(
            "layer {layer_index} is {}, not dense",
            other.kind()
        ))),
        None => Err(Error::InvalidConfig(format!("no layer {layer_index}"))),
    }
}

/// Compares three computations of the messages `R_{i←j}` of dense layer
/// `layer_index`: the Taylor terms at the root point, the closed form
/// `x_i w_ij⁺ / Σ_i x_i w_ij⁺ · R_j`, and the z⁺ rule implementation.
///
/// `relevance` is a z⁺ relevance map for the same trace; its entry at the
/// layer's output supplies `R_j`.
pub fn verify_zplus_identity(
    model: &Model,
    trace: &ActivationTrace,
    relevance: &RelevanceMap,
    layer_index: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<TaylorReport> {
    trace.validate(model)?;
    let dense = dense_at(model, layer_index)?;
    if relevance.len() != trace.len() + 1 {
        return Err(Error::TraceMismatch("relevance map does not match trace".into()));
    }
    let x = trace.layer_input(layer_index).data();
    if let Some(i) = x.iter().position(|&v| v < 0.0) {
        return Err(Error::NonNegativityViolated { index: i, value: x[i] });
    }
    let upper = relevance.at(layer_index + 1).data();
    // Neuron activation x_j after the ReLU, if one follows.
    let activation = match model.layers().get(layer_index + 1) {
        Some(Layer::ReLU) => trace.layer_output(layer_index + 1).data(),
        _ => trace.layer_output(layer_index).data(),
    };
    let zplus = dense_messages(dense, x, upper, &RuleConfig::zplus())?;
    let n_out = dense.out_dim();

    let mut report = TaylorReport {
        layer: layer_index,
        epsilon,
        tolerance,
        neurons: Vec::new(),
        zero_relevance: 0,
        skipped: 0,
        max_taylor_vs_closed: 0.0,
        max_taylor_vs_zplus: 0.0,
        max_closed_vs_zplus: 0.0,
        max_abs_discrepancy: 0.0,
    };

    for j in 0..n_out {
        let r = upper[j];
        let zplus_j = |i: usize| zplus[i * n_out + j];
        if r == 0.0 {
            report.zero_relevance += 1;
            let worst = (0..x.len()).map(|i| zplus_j(i).abs()).fold(0.0, f64::max);
            report.max_abs_discrepancy = report.max_abs_discrepancy.max(worst);
            continue;
        }
        let xj = activation[j];
        if xj.is_nan() || xj <= 0.0 || r < 0.0 {
            report.skipped += 1;
            continue;
        }
        let c = r / xj;
        let w = dense.column(j);
        let b = dense.bias()[j];
        let mut reference = match find_reference(x, &w, b, c, epsilon) {
            Ok(rf) => rf,
            Err(Error::UnreachableEpsilon | Error::InactiveNeuron(_)) => {
                report.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        reference.neuron = j;
        let taylor = taylor_term(&reference, x, &w, b);

        let den: f64 = x.iter().zip(&w).map(|(xi, wi)| xi * wi.max(0.0)).sum();
        let mut worst = [0.0f64; 3];
        let mut worst_abs = 0.0f64;
        for i in 0..x.len() {
            let closed = x[i] * w[i].max(0.0) / den * r;
            let d = [
                (taylor[i] - closed).abs(),
                (taylor[i] - zplus_j(i)).abs(),
                (closed - zplus_j(i)).abs(),
            ];
            for (acc, v) in worst.iter_mut().zip(d) {
                *acc = acc.max(v);
            }
            worst_abs = worst_abs.max(d[0]).max(d[1]).max(d[2]);
        }
        let scale = r.abs();
        report.max_taylor_vs_closed = report.max_taylor_vs_closed.max(worst[0] / scale);
        report.max_taylor_vs_zplus = report.max_taylor_vs_zplus.max(worst[1] / scale);
        report.max_closed_vs_zplus = report.max_closed_vs_zplus.max(worst[2] / scale);
        report.max_abs_discrepancy = report.max_abs_discrepancy.max(worst_abs);
        report.neurons.push(NeuronCheck {
            neuron: j,
            relevance: r,
            c,
            t_star: reference.t_star,
            taylor_sum: taylor.iter().sum(),
            max_relative_discrepancy: worst.iter().fold(0.0f64, |a, &v| a.max(v)) / scale,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstancyEntry {
    pub input: usize,
    pub c_before: f64,
    pub c_after: f64,
    pub relative_change: f64,
}

/// How much `c_i = R_i / x_i` moves when `x_i` alone is perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstancyReport {
    pub layer: usize,
    pub perturbation: f64,
    pub threshold: f64,
    pub entries: Vec<ConstancyEntry>,
    /// Inputs at or below the threshold, or with `c_i == 0`.
    pub excluded: usize,
}

impl ConstancyReport {
    pub fn median_relative_change(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.entries.iter().map(|e| e.relative_change).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    pub fn max_relative_change(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.relative_change).reduce(f64::max)
    }
}

/// Perturbs each input `x_i > threshold` of dense layer `layer_index` by the
/// relative amount `perturbation`, re-runs the upper network and the z⁺
/// propagation, and records the change in `c_i`.
pub fn c_constancy_probe(
    model: &Model,
    trace: &ActivationTrace,
    layer_index: usize,
    output_index: usize,
    perturbation: f64,
    threshold: f64,
) -> Result<ConstancyReport> {
    trace.validate(model)?;
    dense_at(model, layer_index)?;
    if model.layers().len() < 2 {
        return Err(Error::InvalidConfig(
            "probe needs a network of at least two layers".into(),
        ));
    }
    let upper = model.tail(layer_index)?;
    let cfg = RuleConfig::zplus();
    let relevance_at = |x: &crate::tensor::Tensor| -> Result<Vec<f64>> {
        let (_, t) = forward_traced(&upper, x)?;
        Ok(propagate_unchecked(&upper, &t, output_index, &cfg)?
            .into_pixels()
            .into_data())
    };

    let x = trace.layer_input(layer_index);
    let base = relevance_at(x)?;
    let mut report = ConstancyReport {
        layer: layer_index,
        perturbation,
        threshold,
        entries: Vec::new(),
        excluded: 0,
    };
    for (i, &xi) in x.data().iter().enumerate() {
        let c_before = base[i] / xi;
        if xi.is_nan() || xi <= threshold || c_before == 0.0 {
            report.excluded += 1;
            continue;
        }
        let mut moved = x.clone();
        moved.data_mut()[i] = xi * (1.0 + perturbation);
        let after = relevance_at(&moved)?;
        let c_after = after[i] / moved.data()[i];
        report.entries.push(ConstancyEntry {
            input: i,
            c_before,
            c_after,
            relative_change: ((c_after - c_before) / c_before).abs(),
        });
    }
    Ok(report)
}
