//! Report rows and their CSV/JSON encodings.

use std::io::{self, Write};

use serde::Serialize;
use synthgap_core::BoundReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// One (config point, seed) result. Bound fields are empty when the bound was
/// skipped because a valid region held no synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub fingerprint: String,
    pub point: usize,
    pub axis: Option<String>,
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub test_accuracy: f64,
    pub final_disc: f64,
    pub final_rob: f64,
    /// `ok` or `skipped: <reason>`.
    pub bound_status: String,
    pub disc_term: Option<f64>,
    pub rob_synth_term: Option<f64>,
    pub rob_real_term: Option<f64>,
    pub synth_loss: Option<f64>,
    pub reweight_term: Option<f64>,
    pub concentration: Option<f64>,
    pub bound_total: Option<f64>,
    pub population_loss: Option<f64>,
    pub population_loss_se: Option<f64>,
    pub slack: Option<f64>,
    pub violated: Option<bool>,
    pub n: usize,
    pub g_valid: Option<usize>,
    pub g_total: usize,
    pub k: usize,
    pub empty_regions: Option<usize>,
    pub wall_time_s: Option<f64>,
}

impl ReportRow {
    pub fn set_bound(&mut self, b: &BoundReport) {
        self.bound_status = "ok".into();
        self.disc_term = Some(b.disc_term);
        self.rob_synth_term = Some(b.rob_synth_term);
        self.rob_real_term = Some(b.rob_real_term);
        self.synth_loss = Some(b.synth_loss);
        self.reweight_term = Some(b.reweight_term);
        self.concentration = Some(b.concentration);
        self.bound_total = Some(b.total);
        self.population_loss = Some(b.population_loss_estimate);
        self.population_loss_se = Some(b.population_loss_se);
        self.slack = Some(b.slack());
        self.violated = Some(b.violated());
        self.g_valid = Some(b.g);
        self.empty_regions = Some(b.empty_regions);
    }
}

/// Per-point aggregate of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub point: usize,
    pub axis: String,
    pub axis_value: f64,
    pub trials: usize,
    pub bound_evaluated: usize,
    pub violations: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub final_disc_mean: f64,
    pub final_disc_std: f64,
    pub final_rob_mean: f64,
    pub final_rob_std: f64,
    pub bound_total_mean: Option<f64>,
    pub bound_total_std: Option<f64>,
    pub slack_mean: Option<f64>,
    pub slack_std: Option<f64>,
    /// Mean accuracy minus the previous point's; empty on the first point.
    pub acc_delta_prev: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let point = rows[start].point;
        let end = start + rows[start..].iter().take_while(|r| r.point == point).count();
        let group = &rows[start..end];
        let col = |f: &dyn Fn(&ReportRow) -> Option<f64>| -> Vec<f64> { group.iter().filter_map(f).collect() };
        let acc = mean_std(&col(&|r| Some(r.test_accuracy))).unwrap_or_default();
        let disc = mean_std(&col(&|r| Some(r.final_disc))).unwrap_or_default();
        let rob = mean_std(&col(&|r| Some(r.final_rob))).unwrap_or_default();
        let total = mean_std(&col(&|r| r.bound_total));
        let slack = mean_std(&col(&|r| r.slack));
        out.push(SummaryRow {
            point,
            axis: group[0].axis.clone().unwrap_or_default(),
            axis_value: group[0].axis_value.unwrap_or(f64::NAN),
            trials: group.len(),
            bound_evaluated: group.iter().filter(|r| r.bound_total.is_some()).count(),
            violations: group.iter().filter(|r| r.violated == Some(true)).count(),
            test_accuracy_mean: acc.0,
            test_accuracy_std: acc.1,
            final_disc_mean: disc.0,
            final_disc_std: disc.1,
            final_rob_mean: rob.0,
            final_rob_std: rob.1,
            bound_total_mean: total.map(|t| t.0),
            bound_total_std: total.map(|t| t.1),
            slack_mean: slack.map(|t| t.0),
            slack_std: slack.map(|t| t.1),
            acc_delta_prev: out.last().map(|p| acc.0 - p.test_accuracy_mean),
        });
        start = end;
    }
    out
}

/// Writes `rows` in `format`. CSV has a header row, `.` decimals and LF line
/// endings; missing values are empty fields. JSON is one array of objects.
pub fn write_rows<T: Serialize>(rows: &[T], format: Format, mut w: impl Write) -> io::Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w)
        }
        Format::Csv => {
            let mut header_done = false;
            for row in rows {
                let serde_json::Value::Object(map) = serde_json::to_value(row)? else {
                    return Err(io::Error::other("report row is not a record"));
                };
                if !header_done {
                    let names: Vec<&str> = map.keys().map(String::as_str).collect();
                    writeln!(w, "{}", names.join(","))?;
                    header_done = true;
                }
                let cells: Vec<String> = map.values().map(csv_cell).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
            Ok(())
        }
    }
}

fn csv_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) if s.contains([',', '"', '\n']) => {
            format!("\"{}\"", s.replace('"', "\"\""))
        }
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(point: usize, acc: f64) -> ReportRow {
        ReportRow {
            fingerprint: "f".into(),
            point,
            axis: Some("g".into()),
            axis_value: Some(point as f64),
            seed: 0,
            test_accuracy: acc,
            final_disc: 1.0,
            final_rob: 2.0,
            bound_status: "skipped: x, y".into(),
            disc_term: None,
            rob_synth_term: None,
            rob_real_term: None,
            synth_loss: None,
            reweight_term: None,
            concentration: None,
            bound_total: None,
            population_loss: None,
            population_loss_se: None,
            slack: None,
            violated: None,
            n: 4,
            g_valid: None,
            g_total: 20,
            k: 2,
            empty_regions: None,
            wall_time_s: None,
        }
    }

    #[test]
    fn csv_keeps_field_order_and_quotes() {
        let mut buf = Vec::new();
        write_rows(&[row(0, 0.5)], Format::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("fingerprint,point,axis,axis_value,seed,test_accuracy"));
        let cells = lines.next().unwrap();
        assert!(cells.starts_with("f,0,g,0.0,0,0.5,1.0,2.0,\"skipped: x, y\",,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn summaries_group_by_point() {
        let rows = [row(0, 0.5), row(0, 0.7), row(1, 0.9)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].trials, 2);
        assert!((s[0].test_accuracy_mean - 0.6).abs() < 1e-12);
        assert!((s[0].test_accuracy_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[0].acc_delta_prev, None);
        assert!((s[1].acc_delta_prev.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(s[1].bound_total_mean, None);
    }
}
