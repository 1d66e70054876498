//! CSV and aligned-table forms of per-seed results.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "variant,seed,base_acc,novel_acc,hm,agreement,text_forwards_stage2";

/// One (variant, seed) result. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub agreement: f64,
    pub text_forwards_stage2: u64,
}

pub fn write_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant, r.seed, r.base_acc, r.novel_acc, r.hm, r.agreement, r.text_forwards_stage2
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Data("report is missing the expected CSV header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("report line {}: malformed row", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(ReportRow {
            variant: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            base_acc: num(f[2])?,
            novel_acc: num(f[3])?,
            hm: num(f[4])?,
            agreement: num(f[5])?,
            text_forwards_stage2: f[6].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> SeedSummary {
    if values.is_empty() {
        return SeedSummary { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    SeedSummary { mean, std }
}

/// Per-variant means in the order variants first appear.
pub fn variant_means(rows: &[ReportRow]) -> Vec<(String, SeedSummary, SeedSummary, SeedSummary, SeedSummary)> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.variant == v).collect();
            let m = |f: fn(&ReportRow) -> f64| summarize(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            (
                v.to_string(),
                m(|r| r.base_acc),
                m(|r| r.novel_acc),
                m(|r| r.hm),
                m(|r| r.agreement),
            )
        })
        .collect()
}

/// Per-seed rows followed by a mean ± std block, accuracies in percent.
pub fn format_table(rows: &[ReportRow], scoring: &str) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "scoring: {scoring}");
    let _ = writeln!(
        out,
        "{:<width$} {:>5} {:>8} {:>8} {:>8} {:>9} {:>10}",
        "variant", "seed", "base", "novel", "hm", "agreement", "text_s2"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>10}",
            r.variant,
            r.seed,
            100.0 * r.base_acc,
            100.0 * r.novel_acc,
            100.0 * r.hm,
            100.0 * r.agreement,
            r.text_forwards_stage2
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<width$} {:>14} {:>14} {:>14} {:>14}",
        "mean±std", "base", "novel", "hm", "agreement"
    );
    for (v, b, n, h, a) in variant_means(rows) {
        let cell = |s: SeedSummary| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.std);
        let _ = writeln!(
            out,
            "{:<width$} {:>14} {:>14} {:>14} {:>14}",
            v,
            cell(b),
            cell(n),
            cell(h),
            cell(a)
        );
    }
    out
}
