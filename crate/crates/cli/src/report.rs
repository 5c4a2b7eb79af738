use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use influence_core::evalmetrics::{build_report, entropy_vs_attribution, spearman, MetricsReport};
use influence_core::graph::{GraphView, Granularity};
use influence_core::pipeline::{Method, TraceFile};
use influence_core::transformer::ToyTransformer;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub position: usize,
    pub entropy: f64,
    pub mean_abs_attribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Accuracy with every node kept; ablated rows should be read against it.
    pub full_retention_accuracy: f64,
    pub rows: Vec<MetricsReport>,
    /// Label of the trace file the scatter was computed from.
    pub scatter_source: Option<String>,
    pub scatter: Vec<ScatterPoint>,
    pub entropy_attribution_spearman: Option<f64>,
}

fn label(f: &TraceFile) -> String {
    let g = match f.settings.granularity {
        Granularity::Embedding => "e",
        Granularity::Attention => "a",
    };
    format!("{}-{g}", f.settings.method)
}

pub fn build(model: &ToyTransformer, files: &[TraceFile], seed: u64) -> anyhow::Result<Report> {
    let mut rows = Vec::with_capacity(files.len());
    let mut scatter_pick: Option<(usize, Vec<_>)> = None;
    for (i, f) in files.iter().enumerate() {
        let traced = f.traced(model)?;
        rows.push(build_report(model, &label(f), &traced, seed)?);
        // prefer attention-level GPR, fall back to the first file
        let better = match &scatter_pick {
            None => true,
            Some((j, _)) => is_preferred(f) && !is_preferred(&files[*j]),
        };
        if better {
            scatter_pick = Some((i, traced));
        }
    }
    let mut scatter = Vec::new();
    let mut scatter_source = None;
    if let Some((i, traced)) = scatter_pick {
        if let Some(first) = traced.first() {
            let view = GraphView::build(
                &model.config,
                first.instance.ids.len(),
                first.instance.mask_pos,
                files[i].settings.granularity,
            )?;
            scatter = entropy_vs_attribution(&view, &traced)?
                .into_iter()
                .map(|(position, entropy, mean_abs_attribution)| ScatterPoint {
                    position,
                    entropy,
                    mean_abs_attribution,
                })
                .collect();
            scatter_source = Some(label(&files[i]));
        }
    }
    let xs: Vec<f64> = scatter.iter().map(|p| p.entropy).collect();
    let ys: Vec<f64> = scatter.iter().map(|p| p.mean_abs_attribution).collect();
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        full_retention_accuracy: rows.first().map_or(f64::NAN, |r| r.original_accuracy),
        rows,
        scatter_source,
        entropy_attribution_spearman: spearman(&xs, &ys),
        scatter,
    })
}

fn is_preferred(f: &TraceFile) -> bool {
    f.settings.method == Method::Gpr && f.settings.granularity == Granularity::Attention
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

pub fn markdown(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| method | n | acc | ablated | repl-skip | conc+ | conc- | path share | align | entropy | skip |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| full | - | {:.3} | {:.3} | - | - | - | - | - | - | - |",
        r.full_retention_accuracy, r.full_retention_accuracy
    );
    for row in &r.rows {
        let align = match (row.alignment_rate, row.alignment_ci95) {
            (Some(a), Some((lo, hi))) => format!("{a:.3} [{lo:.3}, {hi:.3}]"),
            (a, _) => opt(a),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {} | {} | {} | {:.3e} | {} | {:.3} | {} |",
            row.method,
            row.n_instances,
            row.original_accuracy,
            row.ablated_accuracy,
            opt(row.repl_skip_accuracy),
            opt(row.concentration_pos),
            opt(row.concentration_neg),
            row.path_share_value,
            align,
            row.pattern_entropy,
            opt(row.skip_fraction),
        );
    }
    if let Some(src) = &r.scatter_source {
        let _ = writeln!(
            s,
            "\nEntropy vs mean |attribution| ({src}): Spearman {}",
            opt(r.entropy_attribution_spearman)
        );
    }
    s
}

pub fn scatter_csv(r: &Report) -> String {
    let mut s = String::from("position,entropy,mean_abs_attribution\n");
    for p in &r.scatter {
        let _ = writeln!(s, "{},{},{}", p.position, p.entropy, p.mean_abs_attribution);
    }
    s
}
