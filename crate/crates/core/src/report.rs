//! Run directories: `epochs.csv`, `summary.json` and `curves.svg`.
//!
//! `epochs.csv` prints every real with six decimals and leaves absent values
//! empty. `summary.json` holds
//!
//! - `started_at`: RFC 3339 wall-clock time, only when the caller supplies it
//! - `config`: the full configuration with defaults filled in
//! - `dataset_hash`: SHA-256 over both generated splits
//! - `summary`: final and best accuracies, best epochs, final precision/recall
//! - `epochs`: every epoch log, including per-class thresholds, class
//!   statistics, mined counts and warnings
//!
//! Everything except `started_at` is a pure function of the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::trainer::{EpochLog, RunReport, RunSummary, SummaryPoint};

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CURVES_SVG: &str = "curves.svg";

pub const CSV_COLUMNS: [&str; 13] = [
    "epoch",
    "test_acc_A",
    "test_acc_B",
    "sel_precision",
    "sel_recall",
    "class_balance",
    "loss_dc",
    "loss_dn",
    "loss_dreg",
    "tau_global",
    "tau_local_mean",
    "mu_mean",
    "sigma_mean",
];

/// One row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochRow {
    pub epoch: usize,
    /// The twelve real-valued columns in file order.
    pub values: [Option<f64>; 12],
}

impl EpochRow {
    pub fn test_acc_a(&self) -> f64 {
        self.values[0].unwrap_or(f64::NAN)
    }

    pub fn test_acc_b(&self) -> f64 {
        self.values[1].unwrap_or(f64::NAN)
    }

    pub fn sel_precision(&self) -> Option<f64> {
        self.values[2]
    }

    pub fn sel_recall(&self) -> Option<f64> {
        self.values[3]
    }

    pub fn class_balance(&self) -> Option<f64> {
        self.values[4]
    }
}

impl From<&EpochLog> for EpochRow {
    fn from(e: &EpochLog) -> Self {
        EpochRow {
            epoch: e.epoch,
            values: [
                Some(e.test_acc_a),
                Some(e.test_acc_b),
                e.sel_precision,
                e.sel_recall,
                e.class_balance,
                Some(e.loss_dc),
                Some(e.loss_dn),
                Some(e.loss_dreg),
                e.tau_global,
                e.tau_local_mean,
                e.mu_mean,
                e.sigma_mean,
            ],
        }
    }
}

pub fn epochs_csv(epochs: &[EpochLog]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for e in epochs {
        let row = EpochRow::from(e);
        write!(out, "{}", row.epoch).unwrap();
        for v in row.values {
            out.push(',');
            if let Some(v) = v {
                write!(out, "{v:.6}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_epochs_csv(text: &str, path: &Path) -> Result<Vec<EpochRow>> {
    let format = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| format(1, e.to_string()))?
        .clone();
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(format(1, "unexpected header".to_string()));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| format(line, e.to_string()))?;
        let epoch = record[0]
            .parse()
            .map_err(|_| format(line, format!("bad epoch '{}'", &record[0])))?;
        let mut values = [None; 12];
        for (slot, cell) in values.iter_mut().zip(record.iter().skip(1)) {
            if !cell.is_empty() {
                *slot = Some(
                    cell.parse()
                        .map_err(|_| format(line, format!("bad number '{cell}'")))?,
                );
            }
        }
        rows.push(EpochRow { epoch, values });
    }
    Ok(rows)
}

pub fn summarize_rows(rows: &[EpochRow]) -> RunSummary {
    let points: Vec<SummaryPoint> = rows
        .iter()
        .map(|r| SummaryPoint {
            epoch: r.epoch,
            acc_a: r.test_acc_a(),
            acc_b: r.test_acc_b(),
            precision: r.sel_precision(),
            recall: r.sel_recall(),
        })
        .collect();
    RunSummary::from_points(&points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub summary: RunSummary,
    pub epochs: Vec<EpochLog>,
}

pub fn summary_json(report: &RunReport, started_at: Option<&str>) -> String {
    let file = SummaryFile {
        started_at: started_at.map(str::to_string),
        config: report.config.clone(),
        dataset_hash: report.dataset_hash.clone(),
        summary: report.summary.clone(),
        epochs: report.epochs.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("summary serializes");
    s.push('\n');
    s
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 50.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 40.0;

fn polyline(points: &[(usize, f64)], max_epoch: usize, color: &str, dashed: bool) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let span = (max_epoch.max(2) - 1) as f64;
    let coords: Vec<String> = points
        .iter()
        .map(|&(e, v)| {
            let x = LEFT + plot_w * (e.saturating_sub(1)) as f64 / span;
            let y = TOP + plot_h * (1.0 - v.clamp(0.0, 1.0));
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6,4\"" } else { "" };
    format!(
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
        coords.join(" ")
    )
}

/// Test accuracy of both networks and selection precision against epoch, all on [0, 1].
pub fn curves_svg(rows: &[EpochRow]) -> String {
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(1);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" style=\"font-family:sans-serif;font-size:11px\">"
    )
    .unwrap();
    writeln!(s, "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" style=\"fill:#ffffff\"/>").unwrap();
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = TOP + plot_h * (1.0 - v);
        writeln!(
            s,
            "  <line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" style=\"stroke:#dddddd\"/>",
            LEFT + plot_w
        )
        .unwrap();
        writeln!(s, "  <text x=\"{:.2}\" y=\"{:.2}\" style=\"text-anchor:end\">{v:.1}</text>", LEFT - 6.0, y + 4.0).unwrap();
    }
    writeln!(
        s,
        "  <rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" style=\"fill:none;stroke:#333333\"/>"
    )
    .unwrap();
    writeln!(
        s,
        "  <text x=\"{:.2}\" y=\"{:.2}\" style=\"text-anchor:middle\">epoch (1 to {max_epoch})</text>",
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    )
    .unwrap();

    let series: [(&str, &str, bool, Vec<(usize, f64)>); 3] = [
        (
            "robust test acc",
            "#1f77b4",
            false,
            rows.iter().map(|r| (r.epoch, r.test_acc_a())).collect(),
        ),
        (
            "baseline test acc",
            "#d62728",
            false,
            rows.iter().map(|r| (r.epoch, r.test_acc_b())).collect(),
        ),
        (
            "selection precision",
            "#2ca02c",
            true,
            rows.iter()
                .filter_map(|r| r.sel_precision().map(|p| (r.epoch, p)))
                .collect(),
        ),
    ];
    for (i, (label, color, dashed, points)) in series.iter().enumerate() {
        if !points.is_empty() {
            s.push_str(&polyline(points, max_epoch, color, *dashed));
        }
        let y = TOP + 14.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 10.0;
        writeln!(
            s,
            "  <line x1=\"{x}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" style=\"stroke:{color};stroke-width:2\"/>",
            y - 4.0,
            x + 18.0,
            y - 4.0
        )
        .unwrap();
        writeln!(s, "  <text x=\"{:.2}\" y=\"{y:.2}\">{label}</text>", x + 24.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_run(report: &RunReport, dir: &Path, started_at: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<EpochRow> = report.epochs.iter().map(EpochRow::from).collect();
    write_file(&dir.join(EPOCHS_CSV), &epochs_csv(&report.epochs))?;
    write_file(&dir.join(SUMMARY_JSON), &summary_json(report, started_at))?;
    write_file(&dir.join(CURVES_SVG), &curves_svg(&rows))
}

pub fn read_rows(dir: &Path) -> Result<Vec<EpochRow>> {
    let path = dir.join(EPOCHS_CSV);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_epochs_csv(&text, &path)
}

pub fn read_summary(dir: &Path) -> Result<SummaryFile> {
    let path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

/// Rebuilds `curves.svg` and the `summary` block of `summary.json` from
/// `epochs.csv`. Other fields of an existing summary are kept.
pub fn regenerate(dir: &Path) -> Result<RunSummary> {
    let rows = read_rows(dir)?;
    let summary = summarize_rows(&rows);
    write_file(&dir.join(CURVES_SVG), &curves_svg(&rows))?;
    let mut file = read_summary(dir)?;
    file.summary = summary.clone();
    let mut text = serde_json::to_string_pretty(&file).expect("summary serializes");
    text.push('\n');
    write_file(&dir.join(SUMMARY_JSON), &text)?;
    Ok(summary)
}
