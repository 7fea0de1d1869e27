//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage errors (including invalid rule
//! parameters and boxes outside the image), 3 for data errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relprop_core::engine::{forward, forward_traced};
use relprop_core::eval::{
    compare_methods_aopc, context_ratio, Baseline, BoundingBox, ContextRatio, Method, PerturbationConfig,
};
use relprop_core::fixtures::{generate_dataset, train_toy, Architecture, SyntheticSpec, TrainConfig};
use relprop_core::model::{Layer, Model};
use relprop_core::render::render_heatmap;
use relprop_core::rules::{balance, explain, sensitivity_map, RuleConfig, DEFAULT_EPSILON_STAB};
use relprop_core::taylor::{c_constancy_probe, verify_zplus_identity, DEFAULT_EPSILON};
use relprop_core::{Error, Tensor};

use crate::dataset::{load_dataset, save_dataset, LabeledImage};
use crate::error::{self, FormatError};
use crate::image::write_ppm;
use crate::model_file::{load_model, save_model};
use crate::report::{aopc_csv, constancy_text, taylor_csv, taylor_text, EvaluationSummary};
use crate::tensor_io::{format_f64, read_input, write_relevance_csv};

#[derive(Debug, Parser)]
#[command(
    name = "relprop",
    version,
    about = "Pixel-wise relevance for small feedforward networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relevance map of one input, written as CSV and PPM.
    Explain(ExplainArgs),
    /// AOPC of several methods over a dataset directory.
    Evaluate(EvaluateArgs),
    /// Outside-inside relevance ratio for a bounding box.
    Context(ContextArgs),
    /// Check the z+ messages of a dense layer against their Taylor form.
    VerifyTaylor(VerifyArgs),
    /// Generate a synthetic dataset and train a toy model on it.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleName {
    Alphabeta,
    Zplus,
    Sensitivity,
}

#[derive(Debug, Args)]
pub struct RuleArgs {
    #[arg(long, value_enum, default_value = "alphabeta")]
    pub rule: RuleName,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Denominator stabilizer.
    #[arg(long, default_value_t = DEFAULT_EPSILON_STAB)]
    pub epsilon_stab: f64,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One-row CSV or binary PGM.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub rule: RuleArgs,
    /// Class index or label; defaults to the predicted class.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub out_heatmap: Option<PathBuf>,
    #[arg(long)]
    pub out_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineName {
    Zero,
    Mean,
    Noise,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory with a manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of alphabeta, zplus, sensitivity, random.
    #[arg(long, value_delimiter = ',', default_value = "alphabeta,zplus,sensitivity,random")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub patch: usize,
    #[arg(long, value_enum, default_value = "zero")]
    pub baseline: BaselineName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-input CSV; defaults to the summary path with a .csv extension.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "data"]))]
pub struct ContextArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Single input; needs --bbox.
    #[arg(long, requires = "bbox")]
    pub input: Option<PathBuf>,
    /// Dataset directory; boxes come from the manifest.
    #[arg(long, conflicts_with = "bbox")]
    pub data: Option<PathBuf>,
    /// x,y,width,height in pixels.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BoundingBox>,
    #[command(flatten)]
    pub rule: RuleArgs,
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Dense layer index; defaults to the first dense layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Bound on discrepancies relative to |R_j|.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Also run the c-constancy probe with this relative perturbation.
    #[arg(long)]
    pub probe: Option<f64>,
    /// Inputs at or below this value are left out of the probe.
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    /// Output directory; receives data/ and model.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub patch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `mlp:16`, `mlp:16,8` or `conv:4`.
    #[arg(long, default_value = "mlp:16", value_parser = parse_architecture)]
    pub arch: Architecture,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    /// Write the dataset only.
    #[arg(long)]
    pub no_train: bool,
}

fn parse_bbox(s: &str) -> Result<BoundingBox, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("not a pixel count: {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, w, h] => BoundingBox::new(x, y, w, h).map_err(|e| e.to_string()),
        _ => Err("expected x,y,width,height".into()),
    }
}

fn parse_architecture(s: &str) -> Result<Architecture, String> {
    let (kind, sizes) = s.split_once(':').ok_or("expected mlp:<widths> or conv:<channels>")?;
    let sizes: Vec<usize> = sizes
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("not a size: {p:?}")))
        .collect::<Result<_, _>>()?;
    if sizes.contains(&0) {
        return Err("sizes must be positive".into());
    }
    match kind {
        "mlp" => Ok(Architecture::Mlp { hidden: sizes }),
        "conv" => Ok(Architecture::ConvNet { channels: sizes }),
        _ => Err(format!("unknown architecture {kind:?}")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Output(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Output(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::ConfigError(_) | Error::BoxOutOfRange(_) | Error::SpecError(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Core(inner) => inner.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn rule_config(args: &RuleArgs) -> Result<RuleConfig, CliError> {
    let cfg = match args.rule {
        RuleName::Alphabeta => RuleConfig::alpha_beta(args.alpha, args.beta)?,
        RuleName::Zplus => RuleConfig::zplus(),
        RuleName::Sensitivity => RuleConfig::sensitivity(),
    };
    Ok(cfg.with_epsilon_stab(args.epsilon_stab)?)
}

fn rule_label(args: &RuleArgs) -> String {
    match args.rule {
        RuleName::Alphabeta => format!("alphabeta({},{})", args.alpha, args.beta),
        RuleName::Zplus => "zplus".into(),
        RuleName::Sensitivity => "sensitivity".into(),
    }
}

/// Index of `target` as a number or class label, or the predicted class.
fn resolve_target(model: &Model, target: Option<&str>, logits: &Tensor) -> Result<usize, CliError> {
    let Some(t) = target else {
        return Ok(logits.argmax());
    };
    let idx = match t.parse::<usize>() {
        Ok(i) => i,
        Err(_) => model
            .metadata()
            .class_labels
            .iter()
            .position(|l| l == t)
            .ok_or_else(|| CliError::Usage(format!("unknown class {t:?}")))?,
    };
    if idx >= model.output_len() {
        return Err(CliError::Usage(format!(
            "target {idx} out of range for {} logits",
            model.output_len()
        )));
    }
    Ok(idx)
}

fn class_name(model: &Model, idx: usize) -> String {
    match model.metadata().class_labels.get(idx) {
        Some(l) => format!("{idx} ({l})"),
        None => idx.to_string(),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    error::write(path, bytes).map_err(|e| CliError::Output(e.to_string()))
}

/// Pixel scores for `rule`; sensitivity maps are squared gradients.
fn pixel_scores(
    model: &Model,
    input: &Tensor,
    target: usize,
    cfg: &RuleConfig,
) -> Result<(Tensor, f64, f64), CliError> {
    if cfg.rule() == relprop_core::Rule::Sensitivity {
        return Ok((sensitivity_map(model, input, target)?, 0.0, 0.0));
    }
    let r = explain(model, input, target, cfg)?;
    let (leak, absorbed) = (r.total_leak(), r.total_absorbed());
    Ok((r.into_pixels(), leak, absorbed))
}

pub fn cmd_explain(args: &ExplainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = rule_config(&args.rule)?;
    let model = load_model(&args.model)?;
    let input = read_input(&args.input, model.input_shape())?;
    let logits = forward(&model, &input)?;
    let target = resolve_target(&model, args.target.as_deref(), &logits)?;
    let f = logits.data()[target];
    let (scores, leak, absorbed) = pixel_scores(&model, &input, target, &cfg)?;
    let total = scores.sum();
    let bal = balance(&scores);

    writeln!(out, "target: {}", class_name(&model, target))?;
    writeln!(out, "rule: {}", rule_label(&args.rule))?;
    writeln!(out, "f(x): {}", format_f64(f))?;
    writeln!(out, "sum R_p: {}", format_f64(total))?;
    writeln!(out, "conservation residual: {}", format_f64((total - f).abs()))?;
    writeln!(out, "degenerate leak: {}", format_f64(leak))?;
    writeln!(out, "stabilizer absorbed: {}", format_f64(absorbed))?;
    writeln!(out, "positive mass: {}", format_f64(bal.positive))?;
    writeln!(out, "negative mass: {}", format_f64(bal.negative))?;
    if args.rule.rule == RuleName::Sensitivity {
        writeln!(out, "note: sensitivity scores are not a decomposition of f(x)")?;
    }

    if let Some(path) = &args.out_scores {
        write_relevance_csv(&scores, path)?;
    }
    if let Some(path) = &args.out_heatmap {
        write_ppm(&render_heatmap(&scores)?, path)?;
    }
    Ok(())
}

fn parse_method(name: &str, alpha: f64, beta: f64) -> Result<Method, CliError> {
    match name.trim() {
        "alphabeta" => {
            RuleConfig::alpha_beta(alpha, beta)?;
            Ok(Method::AlphaBeta { alpha, beta })
        }
        "zplus" => Ok(Method::ZPlus),
        "sensitivity" => Ok(Method::Sensitivity),
        "random" => Ok(Method::Random),
        other => Err(CliError::Usage(format!("unknown method {other:?}"))),
    }
}

fn check_data_dir(dir: &Path) -> Result<Vec<LabeledImage>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: not a directory", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

/// Images reshaped to the model's input shape.
fn model_inputs(model: &Model, data: &[LabeledImage]) -> Result<Vec<Tensor>, CliError> {
    data.iter()
        .map(|s| Ok(s.image.clone().reshape(model.input_shape().to_vec())?))
        .collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> CliResult {
    let methods = args
        .methods
        .iter()
        .map(|m| parse_method(m, args.alpha, args.beta))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = match args.baseline {
        BaselineName::Zero => Baseline::Zero,
        BaselineName::Mean => Baseline::Mean,
        BaselineName::Noise => Baseline::Noise { seed: args.seed },
    };
    let config = PerturbationConfig::new(args.steps, args.patch, baseline)?;
    let model = load_model(&args.model)?;
    let data = check_data_dir(&args.data)?;
    let inputs = model_inputs(&model, &data)?;
    for s in &data {
        if s.label >= model.output_len() {
            return Err(CliError::Data(format!(
                "{}: label {} has no logit",
                s.filename, s.label
            )));
        }
    }
    let pairs: Vec<(&Tensor, usize)> = inputs.iter().zip(&data).map(|(x, s)| (x, s.label)).collect();
    let table = compare_methods_aopc(&model, &pairs, &methods, &config, args.seed)?;

    let summary = EvaluationSummary::new(&model.metadata().name, data.len(), &config, args.seed, &table);
    write_bytes(&args.out, summary.to_json().as_bytes())?;
    let names: Vec<(String, usize)> = data.iter().map(|s| (s.filename.clone(), s.label)).collect();
    let csv_path = args.out_csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    write_bytes(&csv_path, &aopc_csv(&table, &names, config.steps))?;

    for row in &table.rows {
        writeln!(
            out,
            "{}: mean AOPC {} (standard error {}, n = {})",
            row.label,
            format_f64(row.mean_aopc),
            format_f64(row.std_error),
            row.per_input.len()
        )?;
    }
    Ok(())
}

fn print_ratio(out: &mut dyn Write, prefix: &str, c: &ContextRatio) -> CliResult {
    writeln!(
        out,
        "{prefix}ratio {} (outside mass {} over {} px, inside mass {} over {} px)",
        format_f64(c.ratio),
        format_f64(c.outside_mass),
        c.outside_area,
        format_f64(c.inside_mass),
        c.inside_area
    )?;
    Ok(())
}

fn relevance_plane(model: &Model, input: &Tensor, target: usize, cfg: &RuleConfig) -> Result<Tensor, CliError> {
    let (scores, _, _) = pixel_scores(model, input, target, cfg)?;
    let (ch, h, w) = scores.spatial_dims()?;
    if ch != 1 {
        return Err(CliError::Data(format!(
            "context ratio needs a single-channel map, got {ch} channels"
        )));
    }
    Ok(scores.reshape(vec![h, w])?)
}

pub fn cmd_context(args: &ContextArgs, out: &mut dyn Write) -> CliResult {
    let cfg = rule_config(&args.rule)?;
    let model = load_model(&args.model)?;
    writeln!(out, "rule: {}", rule_label(&args.rule))?;
    if let (Some(path), Some(bbox)) = (&args.input, &args.bbox) {
        let input = read_input(path, model.input_shape())?;
        let (_, h, w) = input.spatial_dims()?;
        bbox.check_within(h, w)?;
        let target = resolve_target(&model, args.target.as_deref(), &forward(&model, &input)?)?;
        let plane = relevance_plane(&model, &input, target, &cfg)?;
        writeln!(out, "target: {}", class_name(&model, target))?;
        return print_ratio(out, "", &context_ratio(&plane, bbox)?);
    }
    let dir = args.data.as_ref().expect("clap requires --input or --data");
    let data = check_data_dir(dir)?;
    let inputs = model_inputs(&model, &data)?;
    let mut ratios = Vec::new();
    for (s, x) in data.iter().zip(&inputs) {
        let Some(bbox) = &s.bbox else { continue };
        let target = match &args.target {
            Some(t) => resolve_target(&model, Some(t), &forward(&model, x)?)?,
            None => s.label,
        };
        let c = context_ratio(&relevance_plane(&model, x, target, &cfg)?, bbox)?;
        print_ratio(out, &format!("{}: ", s.filename), &c)?;
        ratios.push(c.ratio);
    }
    let mean = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    writeln!(
        out,
        "mean ratio over {} boxed samples: {}",
        ratios.len(),
        format_f64(mean)
    )?;
    Ok(())
}

pub fn cmd_verify_taylor(args: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&args.model)?;
    let input = read_input(&args.input, model.input_shape())?;
    let layer = match args.layer {
        Some(l) => l,
        None => model
            .layers()
            .iter()
            .position(|l| matches!(l, Layer::Dense(_)))
            .ok_or_else(|| CliError::Usage("model has no dense layer".into()))?,
    };
    let (logits, trace) = forward_traced(&model, &input)?;
    let target = resolve_target(&model, args.target.as_deref(), &logits)?;
    let relevance = relprop_core::propagate(&model, &trace, target, &RuleConfig::zplus())?;
    let report = verify_zplus_identity(&model, &trace, &relevance, layer, args.epsilon, args.tolerance)?;
    writeln!(out, "target: {}", class_name(&model, target))?;
    write!(out, "{}", taylor_text(&report))?;
    if let Some(path) = &args.out_csv {
        write_bytes(path, &taylor_csv(&report))?;
    }
    if let Some(p) = args.probe {
        let probe = c_constancy_probe(&model, &trace, layer, target, p, args.threshold)?;
        write!(out, "{}", constancy_text(&probe))?;
    }
    Ok(())
}

pub fn cmd_fixtures(args: &FixturesArgs, out: &mut dyn Write) -> CliResult {
    let spec = SyntheticSpec {
        height: args.height,
        width: args.width,
        patch_size: args.patch,
        noise_level: args.noise,
        seed: args.seed,
        sample_count: args.samples,
    };
    let dataset = generate_dataset(&spec)?;
    let data_dir = args.out.join("data");
    save_dataset(&dataset, &data_dir)?;
    writeln!(
        out,
        "dataset: {} samples in {}",
        dataset.samples.len(),
        data_dir.display()
    )?;
    if args.no_train {
        return Ok(());
    }
    let config = TrainConfig {
        architecture: args.arch.clone(),
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: args.train_seed,
    };
    let trained = train_toy(&dataset, &config)?;
    let model_path = args.out.join("model.json");
    save_model(&trained.model, &model_path)?;
    writeln!(out, "model: {}", model_path.display())?;
    writeln!(out, "train accuracy: {}", format_f64(trained.accuracy))?;
    if let Some(loss) = trained.loss_history.last() {
        writeln!(out, "final loss: {}", format_f64(*loss))?;
    }
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Explain(a) => cmd_explain(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Context(a) => cmd_context(a, out),
        Command::VerifyTaylor(a) => cmd_verify_taylor(a, out),
        Command::Fixtures(a) => cmd_fixtures(a, out),
    }
}

/// Parses the process arguments, runs the command and maps failures to
/// exit codes. Clap reports its own usage errors with code 2.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("relprop: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
