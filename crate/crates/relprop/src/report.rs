//! Evaluation and verification reports.

use std::collections::BTreeMap;

use relprop_core::eval::{AopcTable, Baseline, PerturbationConfig};
use relprop_core::taylor::{ConstancyReport, TaylorReport};
use serde::Serialize;

use crate::tensor_io::format_f64;

#[derive(Debug, Serialize)]
pub struct EvaluationSummary {
    pub model: String,
    pub inputs: usize,
    pub steps: usize,
    pub patch_size: usize,
    pub baseline: String,
    pub seed: u64,
    /// Keyed by method label.
    pub methods: BTreeMap<String, MethodEntry>,
}

#[derive(Debug, Serialize)]
pub struct MethodEntry {
    pub mean_aopc: f64,
    pub std_error: f64,
}

pub fn baseline_name(b: &Baseline) -> &'static str {
    match b {
        Baseline::Zero => "zero",
        Baseline::Mean => "mean",
        Baseline::Noise { .. } => "noise",
    }
}

impl EvaluationSummary {
    pub fn new(model: &str, inputs: usize, config: &PerturbationConfig, seed: u64, table: &AopcTable) -> Self {
        Self {
            model: model.to_string(),
            inputs,
            steps: config.steps,
            patch_size: config.patch_size,
            baseline: baseline_name(&config.baseline).to_string(),
            seed,
            methods: table
                .rows
                .iter()
                .map(|r| {
                    (
                        r.label.clone(),
                        MethodEntry {
                            mean_aopc: r.mean_aopc,
                            std_error: r.std_error,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Vec<u8> {
    writer.into_inner().expect("in-memory writer")
}

/// One row per (method, input): `method,input,filename,target,aopc,seed`
/// followed by the drops `drop_0..drop_steps`.
pub fn aopc_csv(table: &AopcTable, inputs: &[(String, usize)], steps: usize) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["method", "input", "filename", "target", "aopc", "seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..=steps).map(|k| format!("drop_{k}")));
    w.write_record(&header).expect("in-memory write");
    for row in &table.rows {
        for (idx, (res, (name, target))) in row.per_input.iter().zip(inputs).enumerate() {
            let mut rec = vec![
                row.label.clone(),
                idx.to_string(),
                name.clone(),
                target.to_string(),
                format_f64(res.aopc),
                res.seed.map(|s| s.to_string()).unwrap_or_default(),
            ];
            rec.extend(res.drops.iter().map(|&d| format_f64(d)));
            w.write_record(&rec).expect("in-memory write");
        }
    }
    finish(w)
}

pub fn taylor_text(report: &TaylorReport) -> String {
    let mut s = String::new();
    s += &format!("layer: {}\n", report.layer);
    s += &format!("epsilon: {}\n", format_f64(report.epsilon));
    s += &format!("neurons checked: {}\n", report.neurons.len());
    s += &format!("zero-relevance neurons: {}\n", report.zero_relevance);
    s += &format!("skipped neurons: {}\n", report.skipped);
    s += &format!(
        "max |taylor - closed| / |R_j|: {}\n",
        format_f64(report.max_taylor_vs_closed)
    );
    s += &format!(
        "max |taylor - zplus| / |R_j|: {}\n",
        format_f64(report.max_taylor_vs_zplus)
    );
    s += &format!(
        "max |closed - zplus| / |R_j|: {}\n",
        format_f64(report.max_closed_vs_zplus)
    );
    s += &format!("max abs discrepancy: {}\n", format_f64(report.max_abs_discrepancy));
    s += &format!(
        "status: {} (tolerance {})\n",
        if report.passed() { "PASS" } else { "FAIL" },
        format_f64(report.tolerance)
    );
    s
}

pub fn taylor_csv(report: &TaylorReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "neuron",
        "relevance",
        "c",
        "t_star",
        "taylor_sum",
        "max_relative_discrepancy",
    ])
    .expect("in-memory write");
    for n in &report.neurons {
        w.write_record([
            n.neuron.to_string(),
            format_f64(n.relevance),
            format_f64(n.c),
            format_f64(n.t_star),
            format_f64(n.taylor_sum),
            format_f64(n.max_relative_discrepancy),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn constancy_text(report: &ConstancyReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), format_f64);
    format!(
        "c-constancy probe: perturbation {}, {} inputs, {} excluded\nmedian relative change: {}\nmax relative change: {}\n",
        format_f64(report.perturbation),
        report.entries.len(),
        report.excluded,
        opt(report.median_relative_change()),
        opt(report.max_relative_change()),
    )
}
