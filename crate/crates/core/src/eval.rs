//! Quantitative evaluation of explanations: perturbation curves (AOPC),
//! outside/inside context ratio and heatmap sparsity.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::forward;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rules::{explain, sensitivity_map, RuleConfig};
use crate::tensor::Tensor;

/// Value written into perturbed pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    Zero,
    /// Mean of the unperturbed input.
    Mean,
    /// Uniform `[0, 1)` noise from a seeded generator.
    Noise {
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub steps: usize,
    pub patch_size: usize,
    pub baseline: Baseline,
}

impl PerturbationConfig {
    pub fn new(steps: usize, patch_size: usize, baseline: Baseline) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ConfigError("steps must be at least 1".into()));
        }
        if patch_size == 0 {
            return Err(Error::ConfigError("patch size must be at least 1".into()));
        }
        Ok(Self {
            steps,
            patch_size,
            baseline,
        })
    }

    fn check_against(&self, height: usize, width: usize) -> Result<()> {
        if self.steps == 0 || self.patch_size == 0 {
            return Err(Error::ConfigError("steps and patch size must be at least 1".into()));
        }
        if self.patch_size > height || self.patch_size > width {
            return Err(Error::ConfigError(format!(
                "patch {p}x{p} does not fit a {height}x{width} input",
                p = self.patch_size
            )));
        }
        if self.steps * self.patch_size * self.patch_size > height * width {
            return Err(Error::ConfigError(format!(
                "{} steps of {p}x{p} patches exceed {} pixels",
                self.steps,
                height * width,
                p = self.patch_size
            )));
        }
        Ok(())
    }
}

/// Order in which patches are removed.
#[derive(Debug, Clone, Copy)]
pub enum PatchOrder<'a> {
    /// Most relevant first according to the given pixel scores.
    RelevanceDesc(&'a Tensor),
    /// Largest squared gradient first.
    SensitivityDesc,
    Random {
        seed: u64,
    },
}

/// Top-left corner of a removed square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl Patch {
    pub fn overlaps(&self, other: &Patch) -> bool {
        self.y < other.y + other.size
            && other.y < self.y + self.size
            && self.x < other.x + other.size
            && other.x < self.x + self.size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AopcResult {
    pub method: String,
    /// `f(x⁰) − f(xᵏ)` for `k = 0..=steps`; the first entry is always 0.
    pub drops: Vec<f64>,
    pub aopc: f64,
    pub patches: Vec<Patch>,
    /// Seed of the random order, when one was used.
    pub seed: Option<u64>,
}

impl AopcResult {
    /// Mean of the stored curve.
    pub fn recompute(&self) -> f64 {
        self.drops.iter().sum::<f64>() / self.drops.len() as f64
    }
}

/// Score of each candidate patch position, row-major over top-left corners.
fn patch_scores(scores: &Tensor, dims: (usize, usize, usize), p: usize) -> Vec<(Patch, f64)> {
    let (ch, h, w) = dims;
    let s = scores.data();
    let mut out = Vec::with_capacity((h - p + 1) * (w - p + 1));
    for y in 0..=h - p {
        for x in 0..=w - p {
            let mut total = 0.0;
            for c in 0..ch {
                for dy in 0..p {
                    for dx in 0..p {
                        total += s[(c * h + y + dy) * w + x + dx];
                    }
                }
            }
            out.push((Patch { y, x, size: p }, total));
        }
    }
    out
}

fn select_patches(candidates: Vec<Patch>, steps: usize) -> Result<Vec<Patch>> {
    let mut chosen: Vec<Patch> = Vec::with_capacity(steps);
    for cand in candidates {
        if chosen.len() == steps {
            break;
        }
        if chosen.iter().all(|c| !c.overlaps(&cand)) {
            chosen.push(cand);
        }
    }
    if chosen.len() < steps {
        return Err(Error::ConfigError(format!(
            "only {} disjoint patches could be placed, {steps} requested",
            chosen.len()
        )));
    }
    Ok(chosen)
}

/// Runs the perturbation curve of one input.
///
/// Disjoint patches are removed greedily in the requested order (ties go to
/// the lower row-major position), each replaced by the baseline, and the
/// target logit is re-evaluated after every step. AOPC is the mean of the
/// `steps + 1` drops including the zero drop at `k = 0`.
pub fn aopc_curve(
    model: &Model,
    input: &Tensor,
    order: PatchOrder<'_>,
    config: &PerturbationConfig,
    output_index: usize,
) -> Result<AopcResult> {
    let dims = input.spatial_dims()?;
    let (ch, h, w) = dims;
    config.check_against(h, w)?;
    let p = config.patch_size;

    let (method, seed, candidates) = match order {
        PatchOrder::Random { seed } => {
            let mut all: Vec<Patch> = patch_scores(input, dims, p).into_iter().map(|r| r.0).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            ("random".to_string(), Some(seed), all)
        }
        ranked_order => {
            let owned;
            let (scores, label) = match ranked_order {
                PatchOrder::RelevanceDesc(s) => (s, "relevance"),
                _ => {
                    owned = sensitivity_map(model, input, output_index)?;
                    (&owned, "sensitivity")
                }
            };
            if scores.shape() != input.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "scores {:?} vs input {:?}",
                    scores.shape(),
                    input.shape()
                )));
            }
            let mut ranked = patch_scores(scores, dims, p);
            // Stable sort keeps row-major order among equal scores.
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            (label.to_string(), None, ranked.into_iter().map(|r| r.0).collect())
        }
    };
    let patches = select_patches(candidates, config.steps)?;

    let fill = match config.baseline {
        Baseline::Zero | Baseline::Noise { .. } => 0.0,
        Baseline::Mean => input.sum() / input.len() as f64,
    };
    let mut noise = match config.baseline {
        Baseline::Noise { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };

    let f0 = forward(model, input)?;
    if output_index >= f0.len() {
        return Err(Error::ShapeMismatch(format!(
            "output index {output_index} out of range for {} logits",
            f0.len()
        )));
    }
    let f0 = f0.data()[output_index];
    let mut x = input.clone();
    let mut drops = Vec::with_capacity(config.steps + 1);
    drops.push(0.0);
    for patch in &patches {
        let data = x.data_mut();
        for c in 0..ch {
            for dy in 0..p {
                for dx in 0..p {
                    let v = match noise.as_mut() {
                        Some(rng) => rng.random::<f64>(),
                        None => fill,
                    };
                    data[(c * h + patch.y + dy) * w + patch.x + dx] = v;
                }
            }
        }
        drops.push(f0 - forward(model, &x)?.data()[output_index]);
    }
    let aopc = drops.iter().sum::<f64>() / drops.len() as f64;
    Ok(AopcResult {
        method,
        drops,
        aopc,
        patches,
        seed,
    })
}

/// Explanation methods compared by [`compare_methods_aopc`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    AlphaBeta { alpha: f64, beta: f64 },
    ZPlus,
    Sensitivity,
    Random,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::AlphaBeta { alpha, beta } => format!("alphabeta({alpha},{beta})"),
            Method::ZPlus => "zplus".into(),
            Method::Sensitivity => "sensitivity".into(),
            Method::Random => "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub label: String,
    pub mean_aopc: f64,
    /// Standard error of the mean AOPC (0 for fewer than two inputs).
    pub std_error: f64,
    /// One result per input, in dataset order.
    pub per_input: Vec<AopcResult>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AopcTable {
    pub rows: Vec<MethodSummary>,
}

impl AopcTable {
    pub fn row(&self, label: &str) -> Option<&MethodSummary> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}

/// AOPC of every method over every `(input, target)` pair. The random method
/// uses seed `seed + index` for input `index`.
pub fn compare_methods_aopc(
    model: &Model,
    dataset: &[(&Tensor, usize)],
    methods: &[Method],
    config: &PerturbationConfig,
    seed: u64,
) -> Result<AopcTable> {
    if dataset.is_empty() {
        return Ok(AopcTable::default());
    }
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut per_input = Vec::with_capacity(dataset.len());
        for (idx, &(input, target)) in dataset.iter().enumerate() {
            let res = match method {
                Method::AlphaBeta { alpha, beta } => {
                    let cfg = RuleConfig::alpha_beta(alpha, beta)?;
                    let r = explain(model, input, target, &cfg)?;
                    aopc_curve(model, input, PatchOrder::RelevanceDesc(r.pixels()), config, target)
                }
                Method::ZPlus => {
                    let r = explain(model, input, target, &RuleConfig::zplus())?;
                    aopc_curve(model, input, PatchOrder::RelevanceDesc(r.pixels()), config, target)
                }
                Method::Sensitivity => aopc_curve(model, input, PatchOrder::SensitivityDesc, config, target),
                Method::Random => aopc_curve(
                    model,
                    input,
                    PatchOrder::Random {
                        seed: seed.wrapping_add(idx as u64),
                    },
                    config,
                    target,
                ),
            }?;
            per_input.push(AopcResult {
                method: method.label(),
                ..res
            });
        }
        let values: Vec<f64> = per_input.iter().map(|r| r.aopc).collect();
        let (mean_aopc, std_error) = mean_and_std_error(&values);
        rows.push(MethodSummary {
            method,
            label: method.label(),
            mean_aopc,
            std_error,
            per_input,
        });
    }
    Ok(AopcTable { rows })
}

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::BoxOutOfRange(format!("box {width}x{height} has no area")));
        }
        Ok(Self { x, y, width, height })
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.height && col >= self.x && col < self.x + self.width
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::BoxOutOfRange("box has no area".into()));
        }
        if self.x + self.width > width || self.y + self.height > height {
            return Err(Error::BoxOutOfRange(format!(
                "box at ({}, {}) of size {}x{} leaves a {width}x{height} image",
                self.x, self.y, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextRatio {
    pub outside_mass: f64,
    pub inside_mass: f64,
    pub outside_area: usize,
    pub inside_area: usize,
    /// Positive relevance density outside the box over density inside. Zero
    /// when the box covers the image, infinite when nothing positive lies
    /// inside.
    pub ratio: f64,
}

/// A 2-D `(height, width)` view of a single-channel pixel map.
fn pixel_grid(relevance: &Tensor) -> Result<(usize, usize)> {
    match *relevance.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::ShapeMismatch(format!(
            "expected a single-channel pixel map, got {:?}",
            relevance.shape()
        ))),
    }
}

/// Outside/inside ratio of area-normalized positive relevance.
pub fn context_ratio(relevance: &Tensor, bbox: &BoundingBox) -> Result<ContextRatio> {
    let (h, w) = pixel_grid(relevance)?;
    bbox.check_within(h, w)?;
    let (mut inside, mut outside) = (0.0, 0.0);
    for (idx, &r) in relevance.data().iter().enumerate() {
        if r <= 0.0 {
            continue;
        }
        if bbox.contains(idx / w, idx % w) {
            inside += r;
        } else {
            outside += r;
        }
    }
    if inside == 0.0 && outside == 0.0 {
        return Err(Error::AllZero);
    }
    let inside_area = bbox.area();
    let outside_area = h * w - inside_area;
    let outside_density = if outside_area == 0 {
        0.0
    } else {
        outside / outside_area as f64
    };
    let inside_density = inside / inside_area as f64;
    let ratio = if outside_density == 0.0 {
        0.0
    } else if inside_density == 0.0 {
        f64::INFINITY
    } else {
        outside_density / inside_density
    };
    Ok(ContextRatio {
        outside_mass: outside,
        inside_mass: inside,
        outside_area,
        inside_area,
        ratio,
    })
}

/// Gini coefficient of `|R_p|`: 0 for a uniform map, `1 − 1/n` for a
/// one-hot map.
pub fn heatmap_sparsity(relevance: &Tensor) -> Result<f64> {
    let mut a: Vec<f64> = relevance.data().iter().map(|r| r.abs()).collect();
    let total: f64 = a.iter().sum();
    if total == 0.0 {
        return Err(Error::AllZero);
    }
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let weighted: f64 = a
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i as f64 + 1.0) - n - 1.0) * v)
        .sum();
    Ok(weighted / (n * total))
}
