//! Side-by-side comparison of finished runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::manifest::{PipelineKind, Regime};
use super::run::RunRecord;
use crate::error::{Error, Result};
use crate::label::ClassCode;
use crate::metrics::MetricsReport;

pub fn column_label(pipeline: PipelineKind, finetune: bool) -> String {
    let base = match pipeline {
        PipelineKind::RealOnly => return "REAL".to_string(),
        PipelineKind::SingleStage => "Synth 1",
        PipelineKind::TwoStage => "Synth 2",
        PipelineKind::ThreeStage => "Synth 3",
    };
    if finetune {
        format!("{base} FINETUNE")
    } else {
        base.to_string()
    }
}

fn regime_label(r: Regime) -> String {
    match r {
        Regime::Full => "full".into(),
        Regime::Tiny => "tiny".into(),
        Regime::Custom(f) => format!("custom {f}"),
    }
}

/// Jaccard rows then Dice rows, in percent, best value per row in bold.
pub fn markdown_table(columns: &[(String, MetricsReport)], subset: &[ClassCode]) -> String {
    let mut out = String::from("| Metric | Organ |");
    for (name, _) in columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    let mut row = |metric: &str, organ: &str, values: Vec<f64>| {
        let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&format!("| {metric} | {organ} |"));
        for v in values {
            let cell = format!("{:.1}", 100.0 * v);
            if columns.len() > 1 && v == best {
                out.push_str(&format!(" **{cell}** |"));
            } else {
                out.push_str(&format!(" {cell} |"));
            }
        }
        out.push('\n');
    };
    for (metric, jaccard) in [("J", true), ("DSC", false)] {
        for &code in subset {
            let values =
                columns.iter().map(|(_, r)| if jaccard { r.class(code).jaccard } else { r.class(code).dice }).collect();
            row(metric, code.display_name(), values);
        }
        let values = columns.iter().map(|(_, r)| if jaccard { r.average_jaccard } else { r.average_dice }).collect();
        row(metric, "Average", values);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub regime: String,
    pub columns: Vec<String>,
    pub split_fingerprint: String,
    pub markdown: String,
    pub notes: Vec<String>,
}

/// Tabulates runs that were evaluated on the same real test split.
pub fn compare(records: &[RunRecord]) -> Result<Comparison> {
    let first = records.first().ok_or_else(|| Error::Config("nothing to compare".into()))?;
    let mut seen = BTreeSet::new();
    for r in records {
        if r.evaluation_split != first.evaluation_split {
            return Err(Error::Config(format!(
                "run `{}` was evaluated on a different test split than `{}`",
                r.name, first.name
            )));
        }
        if r.manifest.evaluation.subset != first.manifest.evaluation.subset
            || r.manifest.evaluation.averaging != first.manifest.evaluation.averaging
        {
            return Err(Error::Config(format!("run `{}` uses different evaluation settings", r.name)));
        }
        if !seen.insert((r.pipeline, r.finetune, regime_label(r.regime))) {
            return Err(Error::Config(format!("run `{}` duplicates an earlier pipeline/finetune/regime", r.name)));
        }
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (regime_label(r.regime), r.pipeline, r.finetune));
    let columns: Vec<(String, MetricsReport)> = sorted
        .iter()
        .map(|r| {
            let mut name = r.column();
            if sorted.iter().any(|o| regime_label(o.regime) != regime_label(r.regime)) {
                name = format!("{name} ({})", regime_label(r.regime));
            }
            (name, r.metrics.clone())
        })
        .collect();
    let mut notes = Vec::new();
    if records.iter().any(|r| r.regime == Regime::Full && r.finetune) {
        notes.push(
            "published full-dataset results omit FINETUNE columns; those cells have no published counterpart".into(),
        );
    }
    Ok(Comparison {
        regime: sorted.iter().map(|r| regime_label(r.regime)).collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>().join(", "),
        columns: columns.iter().map(|(n, _)| n.clone()).collect(),
        split_fingerprint: first.evaluation_split.fingerprint.clone(),
        markdown: markdown_table(&columns, &first.manifest.evaluation.subset),
        notes,
    })
}
