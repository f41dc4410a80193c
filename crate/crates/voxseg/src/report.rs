//! Flat-CSV and text renderings of a metrics report.
//!
//! CSV column order: for each of necrotic, edema, enhancing, then the macro
//! average: accuracy, iou, dice, precision, sensitivity, specificity;
//! followed by bce_loss, dice_loss, dsc_accuracy. One header line, one data
//! row.

use voxseg_core::metrics::{ClassMetrics, MetricsReport};

const GROUPS: [&str; 4] = ["necrotic", "edema", "enhancing", "macro"];
const FIELDS: [&str; 6] = [
    "accuracy",
    "iou",
    "dice",
    "precision",
    "sensitivity",
    "specificity",
];

pub fn report_csv_header() -> String {
    let mut cols = Vec::new();
    for group in GROUPS {
        for field in FIELDS {
            cols.push(format!("{field}_{group}"));
        }
    }
    cols.push("bce_loss".into());
    cols.push("dice_loss".into());
    cols.push("dsc_accuracy".into());
    cols.join(",")
}

fn class_values(c: &ClassMetrics) -> [f64; 6] {
    [
        c.accuracy,
        c.iou,
        c.dice,
        c.precision,
        c.sensitivity,
        c.specificity,
    ]
}

pub fn report_csv_row(report: &MetricsReport) -> String {
    let mut vals = Vec::new();
    for c in report
        .per_class
        .iter()
        .chain(std::iter::once(&report.macro_avg))
    {
        vals.extend(class_values(c));
    }
    vals.push(report.bce_loss);
    vals.push(report.dice_loss);
    vals.push(report.dsc_accuracy);
    vals.iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn report_csv(report: &MetricsReport) -> String {
    format!("{}\n{}\n", report_csv_header(), report_csv_row(report))
}

pub fn report_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str("class       accuracy  iou       dice      precision sens.     spec.\n");
    for (name, c) in GROUPS.iter().zip(
        report
            .per_class
            .iter()
            .chain(std::iter::once(&report.macro_avg)),
    ) {
        out.push_str(&format!(
            "{name:<11} {:<9.4} {:<9.4} {:<9.4} {:<9.4} {:<9.4} {:<9.4}\n",
            c.accuracy, c.iou, c.dice, c.precision, c.sensitivity, c.specificity
        ));
    }
    out.push_str(&format!(
        "bce_loss={:.6} dice_loss={:.6} dsc_accuracy={:.6}\n",
        report.bce_loss, report.dice_loss, report.dsc_accuracy
    ));
    out
}

/// Pulls one named column out of a report CSV.
pub fn csv_column(csv: &str, column: &str) -> Option<f64> {
    let mut lines = csv.lines();
    let header = lines.next()?;
    let row = lines.next()?;
    let idx = header.split(',').position(|c| c == column)?;
    row.split(',').nth(idx)?.parse().ok()
}
