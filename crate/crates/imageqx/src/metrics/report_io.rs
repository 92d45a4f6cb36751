//! CSV rendering of reports. Column order is fixed:
//! `name,recall,specificity,f1,support`. Undefined metrics render as empty
//! fields.

use std::fmt::Write;

use super::{AgreementReport, MetricReport, ThresholdRow};

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn metric_report_csv(report: &MetricReport) -> String {
    let mut out = String::from("name,recall,specificity,f1,support\n");
    for row in report.per_class.iter().chain(&report.per_explanation) {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.name,
            opt(row.recall),
            opt(row.specificity),
            opt(row.f1),
            row.support
        )
        .unwrap();
    }
    writeln!(
        out,
        "macro_quality,{},{},{},",
        opt(report.macro_recall),
        opt(report.macro_specificity),
        opt(report.macro_f1)
    )
    .unwrap();
    writeln!(out, "macro_explanations,,,{},", opt(report.explanation_macro_f1)).unwrap();
    out
}

pub fn agreement_report_csv(report: &AgreementReport) -> String {
    let mut out = String::from("name,image_count,pairwise_f1_mean,pairwise_f1_std,pairs\n");
    for e in &report.entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.name,
            e.image_count,
            opt(e.mean_f1),
            opt(e.std_f1),
            e.pairs
        )
        .unwrap();
    }
    out
}

pub fn threshold_table_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("threshold,sensitivity,specificity,f1,recommended\n");
    for r in rows {
        writeln!(
            out,
            "{:.6},{},{},{},{}",
            r.threshold,
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.f1),
            r.recommended
        )
        .unwrap();
    }
    out
}
