//! Renders a [`RunReport`] as a markdown table (one row per sequence tag,
//! one column per variant, cells `mean (lo, hi)`), a per-class breakdown,
//! or machine-readable CSV/JSON at full precision.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::{Aggregate, CiMethod};
use crate::pipeline::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Two-decimal cell text, `mean (lo, hi)`.
pub fn format_cell(mean: f64, lo: f64, hi: f64) -> String {
    format!("{mean:.2} ({lo:.2}, {hi:.2})")
}

pub fn render_report(report: &RunReport, format: ReportFormat) -> Result<String> {
    if report.cells.is_empty() || report.cells.iter().all(|c| c.summary.is_none()) {
        return Err(Error::Evaluation("report has no scored cells".into()));
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    let opts = &report.summary_options;
    let method = match opts.ci_method {
        CiMethod::BootstrapPercentile => format!("bootstrap percentile, seed {}", opts.seed()),
        CiMethod::StudentT => "Student t".to_string(),
    };
    let over = match opts.aggregate {
        Aggregate::ByClass => format!("over {} classes", report.classes.len()),
        Aggregate::Pooled => "over pooled case×class values".to_string(),
    };
    let _ = writeln!(out, "# Mean Dice similarity coefficient (95% CI)\n");
    let _ = writeln!(out, "Mean DSC and 95% confidence interval {over} ({method}).\n");

    let header = |first: &str, out: &mut String| {
        let _ = write!(out, "| {first} |");
        for v in &report.variants {
            let _ = write!(out, " {} |", v.title());
        }
        let _ = write!(out, "\n|---|");
        for _ in &report.variants {
            let _ = write!(out, "---|");
        }
        out.push('\n');
    };

    header("Sequence", &mut out);
    for &tag in &report.sequence_tags {
        let _ = write!(out, "| {tag} |");
        for &v in &report.variants {
            let text = report
                .cell(tag, v)
                .and_then(|c| c.summary.as_ref())
                .map(|s| format_cell(s.stats.mean, s.stats.ci_lo, s.stats.ci_hi))
                .unwrap_or_else(|| "n/a".into());
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }

    for &tag in &report.sequence_tags {
        let _ = writeln!(out, "\n## Per-class mean DSC ({tag})\n");
        header("Class", &mut out);
        for class in &report.classes {
            let _ = write!(out, "| {class} |");
            for &v in &report.variants {
                let text = report
                    .cell(tag, v)
                    .and_then(|c| c.summary.as_ref())
                    .and_then(|s| s.per_class.iter().find(|p| &p.class_name == class))
                    .and_then(|p| p.mean)
                    .map(|m| format!("{m:.2}"))
                    .unwrap_or_else(|| "n/a".into());
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
    }

    if !report.failures.is_empty() {
        let _ = writeln!(out, "\n## Failed units\n");
        for f in &report.failures {
            let _ = writeln!(out, "- {} / {}: {} (log: {})", f.case_id, f.variant, f.message, f.log);
        }
    }
    out
}

/// One aggregate line per cell (empty `class_name`) followed by its
/// per-class means.
fn render_csv(report: &RunReport) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "sequence_tag",
        "variant",
        "class_name",
        "mean",
        "ci_lo",
        "ci_hi",
        "n",
        "method",
    ])?;
    let num = |x: f64| x.to_string();
    for cell in &report.cells {
        let Some(s) = &cell.summary else { continue };
        let method = match s.stats.method {
            CiMethod::BootstrapPercentile => "bootstrap-percentile",
            CiMethod::StudentT => "student-t",
        };
        wtr.write_record([
            cell.sequence_tag.as_str(),
            cell.variant.as_str(),
            "",
            &num(s.stats.mean),
            &num(s.stats.ci_lo),
            &num(s.stats.ci_hi),
            &s.stats.n.to_string(),
            method,
        ])?;
        for p in &s.per_class {
            wtr.write_record([
                cell.sequence_tag.as_str(),
                cell.variant.as_str(),
                &p.class_name,
                &p.mean.map(num).unwrap_or_default(),
                "",
                "",
                &p.n.to_string(),
                "",
            ])?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::io("summary.csv", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{summarize_variant, DiceResult, DiceStatus, SummaryOptions};
    use crate::pipeline::{ReportCell, SequenceTag};
    use crate::preprocess::Mode;

    fn single(dsc: f64) -> RunReport {
        let r = DiceResult {
            case_id: "c".into(),
            class_name: "liver".into(),
            dsc: Some(dsc),
            status: DiceStatus::Ok,
            gt_voxels: 1,
            pred_voxels: 1,
            overlap_voxels: 1,
        };
        let classes = vec!["liver".to_string()];
        let opts = SummaryOptions::default();
        RunReport {
            variants: vec![Mode::None],
            sequence_tags: vec![SequenceTag::T1],
            classes: classes.clone(),
            summary_options: opts,
            cells: vec![ReportCell {
                sequence_tag: SequenceTag::T1,
                variant: Mode::None,
                summary: Some(summarize_variant(&[r], &classes, &opts).unwrap()),
                note: None,
            }],
            failures: vec![],
        }
    }

    #[test]
    fn single_cell_markdown() {
        let md = render_report(&single(0.6), ReportFormat::Markdown).unwrap();
        assert!(md.contains("| T1 | 0.60 (0.60, 0.60) |"), "{md}");
        assert!(md.contains("| Sequence | Unprocessed |"));
        assert!(md.contains("| liver | 0.60 |"));
    }

    #[test]
    fn csv_keeps_full_precision() {
        let csv = render_report(&single(0.123456789012), ReportFormat::Csv).unwrap();
        assert!(csv.contains("T1,none,,0.123456789012,0.123456789012,0.123456789012,1,bootstrap-percentile"));
    }

    #[test]
    fn empty_report_is_rejected() {
        let mut r = single(0.5);
        r.cells[0].summary = None;
        assert!(render_report(&r, ReportFormat::Markdown).is_err());
        r.cells.clear();
        assert!(render_report(&r, ReportFormat::Json).is_err());
    }

    #[test]
    fn format_parsing() {
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
