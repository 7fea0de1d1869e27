//! Backward relevance propagation.
//!
//! Weighted layers use either the alpha-beta rule
//!
//! ```text
//! R_i = Σ_j ( α (x_i w_ij)⁺ / Σ_i (x_i w_ij)⁺  −  β (x_i w_ij)⁻ / Σ_i (x_i w_ij)⁻ ) R_j
//! ```
//!
//! or the z⁺ rule `R_i = Σ_j x_i w_ij⁺ / Σ_i x_i w_ij⁺ · R_j`. Biases absorb no
//! relevance. ReLU and Flatten pass relevance through, max-pooling sends it
//! to the recorded winner and sum-pooling splits it in proportion to `x_i⁺`.
//!
//! A fraction whose denominator is exactly zero contributes nothing; the
//! relevance it would have carried is recorded as that layer's leak. Nonzero
//! denominators are pushed away from zero by `epsilon_stab`, which holds back
//! a share `ε / (|den| + ε)`; that share is recorded as absorbed. Together,
//! `Σ lower + leak + absorbed == Σ upper` for every layer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{activation_gradients, forward_traced, ActivationTrace};
use crate::error::{Error, Result};
use crate::model::{Dense, Layer, Model};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON_STAB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    AlphaBeta {
        alpha: f64,
        beta: f64,
    },
    ZPlus,
    /// Squared gradients, `(∂f/∂x)²`, at every layer.
    Sensitivity,
}

/// A validated rule plus the denominator stabilizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    rule: Rule,
    epsilon_stab: f64,
}

impl RuleConfig {
    /// Requires `alpha >= 1`, `beta >= 0` and `alpha - beta == 1` (to 1e-12).
    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 1.0 || beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need alpha >= 1 and beta >= 0, got alpha={alpha}, beta={beta}"
            )));
        }
        if libm::fabs(alpha - beta - 1.0) > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "alpha - beta must equal 1, got {alpha} - {beta} = {}",
                alpha - beta
            )));
        }
        Ok(Self {
            rule: Rule::AlphaBeta { alpha, beta },
            epsilon_stab: DEFAULT_EPSILON_STAB,
        })
    }

    pub fn zplus() -> Self {
        Self {
            rule: Rule::ZPlus,
            epsilon_stab: DEFAULT_EPSILON_STAB,
        }
    }

    pub fn sensitivity() -> Self {
        Self {
            rule: Rule::Sensitivity,
            epsilon_stab: DEFAULT_EPSILON_STAB,
        }
    }

    pub fn with_epsilon_stab(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon_stab must be >= 0, got {eps}")));
        }
        self.epsilon_stab = eps;
        Ok(self)
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn epsilon_stab(&self) -> f64 {
        self.epsilon_stab
    }

    /// `(alpha, beta)` for the redistributing rules.
    fn weights(&self) -> Option<(f64, f64)> {
        match self.rule {
            Rule::AlphaBeta { alpha, beta } => Some((alpha, beta)),
            Rule::ZPlus => Some((1.0, 0.0)),
            Rule::Sensitivity => None,
        }
    }
}

/// Relevance at every activation of one explained forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    layers: Vec<Tensor>,
    leaks: Vec<f64>,
    absorbed: Vec<f64>,
}

impl RelevanceMap {
    /// Relevance attached to activation `k` (`0` = input pixels).
    pub fn at(&self, k: usize) -> &Tensor {
        &self.layers[k]
    }

    /// The pixel-wise explanation `(R_p)_p`.
    pub fn pixels(&self) -> &Tensor {
        &self.layers[0]
    }

    pub fn into_pixels(mut self) -> Tensor {
        self.layers.swap_remove(0)
    }

    /// Number of activations covered (layer count + 1).
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Relevance dropped at layer `k` through zero-denominator terms.
    pub fn leak(&self, k: usize) -> f64 {
        self.leaks[k]
    }

    pub fn total_leak(&self) -> f64 {
        self.leaks.iter().sum()
    }

    /// Relevance held back at layer `k` by the denominator stabilizer.
    pub fn absorbed(&self, k: usize) -> f64 {
        self.absorbed[k]
    }

    pub fn total_absorbed(&self) -> f64 {
        self.absorbed.iter().sum()
    }

    /// Whether any zero-denominator term fired anywhere.
    pub fn is_degenerate(&self) -> bool {
        self.leaks.iter().any(|&l| l != 0.0)
    }
}

/// Positive and negative relevance mass of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceBalance {
    pub positive: f64,
    pub negative: f64,
}

pub fn balance(relevance: &Tensor) -> RelevanceBalance {
    relevance.data().iter().fold(
        RelevanceBalance {
            positive: 0.0,
            negative: 0.0,
        },
        |mut b, &r| {
            if r > 0.0 {
                b.positive += r;
            } else {
                b.negative += r;
            }
            b
        },
    )
}

/// `1 / den` with the denominator pushed away from zero by `eps` in its
/// own direction; `None` when the denominator is exactly zero.
fn stabilized_ratio_factor(den: f64, eps: f64) -> Option<f64> {
    if den == 0.0 {
        None
    } else if den > 0.0 {
        Some(1.0 / (den + eps))
    } else {
        Some(1.0 / (den - eps))
    }
}

/// Relevance lost to one stabilized fraction carrying `share` in total.
#[derive(Debug, Default, Clone, Copy)]
struct Shortfall {
    leak: f64,
    absorbed: f64,
}

impl Shortfall {
    /// Factor applied to each part of `share`, booking what does not get
    /// passed down.
    fn factor(&mut self, share: f64, den: f64, eps: f64) -> f64 {
        match stabilized_ratio_factor(den, eps) {
            Some(f) => {
                self.absorbed += share * eps * f.abs();
                share * f
            }
            None => {
                self.leak += share;
                0.0
            }
        }
    }
}

fn contribution(rule: Rule, x: f64, w: f64) -> (f64, f64) {
    match rule {
        Rule::ZPlus => (x * w.max(0.0), 0.0),
        _ => {
            let z = x * w;
            (z.max(0.0), z.min(0.0))
        }
    }
}

fn redistribute_affine(
    affine: crate::model::Affine<'_>,
    x: &[f64],
    upper: &[f64],
    config: &RuleConfig,
    lower: &mut [f64],
) -> Shortfall {
    let (alpha, beta) = config.weights().expect("redistributing rule");
    let w = affine.params();
    let n = affine.out_len();
    let mut pos_sum = vec![0.0; n];
    let mut neg_sum = vec![0.0; n];
    affine.for_each_tap(|j, i, p| {
        let (zp, zn) = contribution(config.rule, x[i], w[p]);
        pos_sum[j] += zp;
        neg_sum[j] += zn;
    });

    let mut lost = Shortfall::default();
    let mut pos_factor = vec![0.0; n];
    let mut neg_factor = vec![0.0; n];
    for j in 0..n {
        let r = upper[j];
        pos_factor[j] = lost.factor(alpha * r, pos_sum[j], config.epsilon_stab);
        if beta != 0.0 {
            // the negative part carries -beta * r in total
            neg_factor[j] = -lost.factor(-beta * r, neg_sum[j], config.epsilon_stab);
        }
    }
    affine.for_each_tap(|j, i, p| {
        let (zp, zn) = contribution(config.rule, x[i], w[p]);
        lower[i] += zp * pos_factor[j];
        if beta != 0.0 {
            lower[i] -= zn * neg_factor[j];
        }
    });
    lost
}

fn redistribute_layer(
    layer: &Layer,
    trace: &ActivationTrace,
    k: usize,
    upper: &[f64],
    config: &RuleConfig,
) -> (Vec<f64>, Shortfall) {
    let input = trace.layer_input(k);
    let x = input.data();
    let mut lower = vec![0.0; x.len()];
    let mut lost = Shortfall::default();
    match layer {
        Layer::Dense(_) | Layer::Conv2D(_) => {
            let affine = layer.affine(input.shape()).expect("weighted layer");
            lost = redistribute_affine(affine, x, upper, config, &mut lower);
        }
        Layer::MaxPool2D(_) => {
            let winners = trace.argmax(k).expect("max-pool trace records winners");
            for (j, &i) in winners.iter().enumerate() {
                lower[i] += upper[j];
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
                        let den: f64 = p.window_indices(in_shape, c, oy, ox).map(|i| x[i].max(0.0)).sum();
                        let f = lost.factor(upper[j], den, config.epsilon_stab);
                        for i in p.window_indices(in_shape, c, oy, ox) {
                            lower[i] += x[i].max(0.0) * f;
                        }
                        j += 1;
                    }
                }
            }
        }
        Layer::ReLU | Layer::Flatten => lower.copy_from_slice(upper),
    }
    (lower, lost)
}

fn initial_relevance(model: &Model, trace: &ActivationTrace, output_index: usize) -> Result<Vec<f64>> {
    let n = model.output_len();
    if output_index >= n {
        return Err(Error::ShapeMismatch(format!(
            "output index {output_index} out of range for {n} logits"
        )));
    }
    let mut r = vec![0.0; n];
    r[output_index] = trace.output().data()[output_index];
    Ok(r)
}

/// Explains logit `output_index` by propagating its value `f(x)` back to the
/// input through every layer of `model`.
pub fn propagate(
    model: &Model,
    trace: &ActivationTrace,
    output_index: usize,
    config: &RuleConfig,
) -> Result<RelevanceMap> {
    trace.validate(model)?;
    propagate_unchecked(model, trace, output_index, config)
}

pub(crate) fn propagate_unchecked(
    model: &Model,
    trace: &ActivationTrace,
    output_index: usize,
    config: &RuleConfig,
) -> Result<RelevanceMap> {
    let top = initial_relevance(model, trace, output_index)?;
    if let Rule::Sensitivity = config.rule {
        let layers = activation_gradients(model, trace, output_index)?
            .into_iter()
            .map(|g| g.map(|v| v * v))
            .collect();
        return Ok(RelevanceMap {
            layers,
            leaks: vec![0.0; model.layers().len()],
            absorbed: vec![0.0; model.layers().len()],
        });
    }

    let l = model.layers().len();
    let mut rel = Vec::with_capacity(l + 1);
    let mut leaks = vec![0.0; l];
    let mut absorbed = vec![0.0; l];
    rel.push(top);
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let (lower, lost) = redistribute_layer(layer, trace, k, rel.last().expect("seeded"), config);
        leaks[k] = lost.leak;
        absorbed[k] = lost.absorbed;
        rel.push(lower);
    }
    rel.reverse();
    let layers = rel
        .into_iter()
        .enumerate()
        .map(|(k, r)| Tensor::new(trace.activation(k).shape().to_vec(), r))
        .collect::<Result<Vec<_>>>()?;
    Ok(RelevanceMap {
        layers,
        leaks,
        absorbed,
    })
}

/// Forward pass followed by [`propagate`].
pub fn explain(model: &Model, input: &Tensor, output_index: usize, config: &RuleConfig) -> Result<RelevanceMap> {
    let (_, trace) = forward_traced(model, input)?;
    propagate_unchecked(model, &trace, output_index, config)
}

/// Individual messages `R_{i←j}` of a dense layer, laid out like the
/// weights (`messages[i * out_dim + j]`). Summing over `j` gives the lower
/// relevance that [`propagate`] assigns.
pub fn dense_messages(dense: &Dense, x: &[f64], upper: &[f64], config: &RuleConfig) -> Result<Vec<f64>> {
    let (alpha, beta) = config
        .weights()
        .ok_or_else(|| Error::InvalidConfig("sensitivity has no relevance messages".into()))?;
    if x.len() != dense.in_dim() || upper.len() != dense.out_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dense {}x{} layer given {} inputs and {} upper relevances",
            dense.in_dim(),
            dense.out_dim(),
            x.len(),
            upper.len()
        )));
    }
    let (n_in, n_out) = (dense.in_dim(), dense.out_dim());
    let mut out = vec![0.0; n_in * n_out];
    for j in 0..n_out {
        let parts: Vec<(f64, f64)> = (0..n_in)
            .map(|i| contribution(config.rule, x[i], dense.weight(i, j)))
            .collect();
        let zp: f64 = parts.iter().map(|p| p.0).sum();
        let zn: f64 = parts.iter().map(|p| p.1).sum();
        let pf = stabilized_ratio_factor(zp, config.epsilon_stab).map_or(0.0, |f| alpha * upper[j] * f);
        let nf = if beta != 0.0 {
            stabilized_ratio_factor(zn, config.epsilon_stab).map_or(0.0, |f| beta * upper[j] * f)
        } else {
            0.0
        };
        for (i, (p, n)) in parts.into_iter().enumerate() {
            out[i * n_out + j] = p * pf - n * nf;
        }
    }
    Ok(out)
}

/// Squared input gradient of logit `output_index`.
pub fn sensitivity_map(model: &Model, input: &Tensor, output_index: usize) -> Result<Tensor> {
    Ok(crate::engine::gradient(model, input, output_index)?.map(|g| g * g))
}

/// Exact decomposition of a linear score `f(x) = Σ_p x_p w_p + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecomposition {
    /// `R_p = x_p w_p`.
    pub relevance: Tensor,
    /// The bias, which no input accounts for.
    pub remainder: f64,
}

pub fn linear_decompose(weights: &[f64], bias: f64, input: &Tensor) -> Result<LinearDecomposition> {
    if weights.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} inputs",
            weights.len(),
            input.len()
        )));
    }
    let data = input.data().iter().zip(weights).map(|(x, w)| x * w).collect();
    Ok(LinearDecomposition {
        relevance: Tensor::new(input.shape().to_vec(), data)?,
        remainder: bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Metadata;

    fn neuron(w: &[f64], b: f64) -> Model {
        let rows: Vec<Vec<f64>> = w.iter().map(|&v| vec![v]).collect();
        Model::new(
            vec![w.len()],
            vec![Layer::Dense(Dense::from_rows(&rows, vec![b]).unwrap()), Layer::ReLU],
            Metadata::default(),
        )
        .unwrap()
    }

    fn pixels(m: &Model, x: &[f64], cfg: &RuleConfig) -> RelevanceMap {
        explain(m, &Tensor::vector(x.to_vec()), 0, cfg).unwrap()
    }

    fn exact() -> impl Fn(RuleConfig) -> RuleConfig {
        |c| c.with_epsilon_stab(0.0).unwrap()
    }

    #[test]
    fn alpha_beta_single_neuron() {
        let m = neuron(&[2.0, -1.0], 0.0);
        let e = exact();
        let r = pixels(&m, &[1.0, 1.0], &e(RuleConfig::alpha_beta(1.0, 0.0).unwrap()));
        assert_eq!(r.pixels().data(), &[1.0, 0.0]);
        let r = pixels(&m, &[1.0, 1.0], &e(RuleConfig::alpha_beta(2.0, 1.0).unwrap()));
        assert_eq!(r.pixels().data(), &[2.0, -1.0]);
        assert_eq!(r.pixels().sum(), 1.0);
        let r = pixels(&m, &[1.0, 1.0], &e(RuleConfig::zplus()));
        assert_eq!(r.pixels().data(), &[1.0, 0.0]);
    }

    #[test]
    fn default_stabilizer_is_negligible() {
        let m = neuron(&[2.0, -1.0], 0.0);
        let r = pixels(&m, &[1.0, 1.0], &RuleConfig::alpha_beta(2.0, 1.0).unwrap());
        assert!((r.pixels().data()[0] - 2.0).abs() < 1e-11);
        assert!((r.pixels().data()[1] + 1.0).abs() < 1e-11);
    }

    #[test]
    fn all_negative_contributions_give_zero() {
        // f = 2 comes entirely from the bias.
        let m = Model::new(
            vec![2],
            vec![Layer::Dense(
                Dense::from_rows(&[vec![-1.0], vec![-2.0]], vec![5.0]).unwrap(),
            )],
            Metadata::default(),
        )
        .unwrap();
        let r = pixels(&m, &[1.0, 1.0], &RuleConfig::alpha_beta(1.0, 0.0).unwrap());
        assert_eq!(r.pixels().data(), &[0.0, 0.0]);
        assert_eq!(r.leak(0), 2.0);
        assert!(r.is_degenerate());
    }

    #[test]
    fn alpha_beta_validation() {
        assert!(matches!(RuleConfig::alpha_beta(2.0, 0.5), Err(Error::InvalidConfig(_))));
        assert!(RuleConfig::alpha_beta(0.5, -0.5).is_err());
        assert!(RuleConfig::alpha_beta(1.3, 0.3).is_ok());
        assert!(RuleConfig::zplus().with_epsilon_stab(-1.0).is_err());
    }

    #[test]
    fn trace_mismatch_detected() {
        let a = neuron(&[1.0, 1.0], 0.0);
        let b = neuron(&[1.0, 2.0], 0.0);
        let (_, trace) = forward_traced(&a, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!(matches!(
            propagate(&b, &trace, 0, &RuleConfig::zplus()),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn sensitivity_of_linear_model() {
        let m = Model::new(
            vec![2],
            vec![Layer::Dense(
                Dense::from_rows(&[vec![0.5], vec![-1.0]], vec![0.0]).unwrap(),
            )],
            Metadata::default(),
        )
        .unwrap();
        for x in [[1.0, 2.0], [-3.0, 0.25]] {
            let s = sensitivity_map(&m, &Tensor::vector(x.to_vec()), 0).unwrap();
            assert_eq!(s.data(), &[0.25, 1.0]);
        }
        let inactive = neuron(&[1.0, 1.0], -5.0);
        let s = sensitivity_map(&inactive, &Tensor::vector(vec![1.0, 1.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
        let via_rule = pixels(&m, &[1.0, 2.0], &RuleConfig::sensitivity());
        assert_eq!(via_rule.pixels().data(), &[0.25, 1.0]);
    }

    #[test]
    fn linear_decomposition() {
        let d = linear_decompose(&[0.5, -1.0], 0.0, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(d.relevance.data(), &[0.5, -2.0]);
        assert_eq!(d.relevance.sum(), -1.5);
        let d = linear_decompose(&[0.5, -1.0], 0.0, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(d.relevance.data(), &[0.0, 0.0]);
        let d = linear_decompose(&[3.0, 5.0], 0.0, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(d.relevance.data(), &[3.0, 0.0]);
        let d = linear_decompose(&[1.0], 0.25, &Tensor::vector(vec![2.0])).unwrap();
        assert_eq!(d.relevance.sum() + d.remainder, 2.25);
        assert!(linear_decompose(&[1.0], 0.0, &Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn sum_pool_proportional_and_leak() {
        use crate::model::Pool2D;
        let m = Model::new(
            vec![1, 2, 2],
            vec![Layer::SumPool2D(Pool2D::new(2, 2).unwrap()), Layer::Flatten],
            Metadata::default(),
        )
        .unwrap();
        let cfg = RuleConfig::zplus().with_epsilon_stab(0.0).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        let r = explain(&m, &x, 0, &cfg).unwrap();
        // f = 2; positive parts 1 and 3 share it.
        assert_eq!(r.pixels().data(), &[0.5, 1.5, 0.0, 0.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![-1.0, 0.0, -2.0, 0.0]).unwrap();
        let r = explain(&m, &x, 0, &cfg).unwrap();
        assert_eq!(r.pixels().data(), &[0.0; 4]);
        assert_eq!(r.leak(0), -3.0);
    }

    #[test]
    fn messages_sum_to_layer_relevance() {
        let d = Dense::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 1.0]], vec![0.0, 0.1]).unwrap();
        let x = [0.3, 1.2, 0.7];
        let upper = [0.8, -0.4];
        let cfg = RuleConfig::alpha_beta(2.0, 1.0).unwrap();
        let msgs = dense_messages(&d, &x, &upper, &cfg).unwrap();
        let m = Model::new(vec![3], vec![Layer::Dense(d.clone())], Metadata::default()).unwrap();
        let (_, trace) = forward_traced(&m, &Tensor::vector(x.to_vec())).unwrap();
        let mut lower = vec![0.0; 3];
        let affine = m.layers()[0].affine(&[3]).unwrap();
        redistribute_affine(affine, trace.input().data(), &upper, &cfg, &mut lower);
        for i in 0..3 {
            let s: f64 = msgs[i * 2..i * 2 + 2].iter().sum();
            assert!((s - lower[i]).abs() < 1e-14);
        }
    }
}
