use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{EvalGrid, Method, Scenario};
use super::protocol::EvalRow;
use crate::error::{ensure, Error, Result};

/// One (calibration fraction, repeat) cell. A cell whose pipeline failed
/// keeps its error message and no scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub fraction: f64,
    pub repeat: usize,
    pub seed: u64,
    /// Trials the test-set alignment was fitted on (the calibration trials).
    pub alignment_trials: usize,
    pub calibration_trials: usize,
    pub test_trials: usize,
    pub row: Option<EvalRow>,
    pub error: Option<String>,
}

/// Column means over the successful cells of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Calibration fraction, or `None` for the row over every cell.
    pub fraction: Option<f64>,
    pub n_cells: usize,
    pub n_failed: usize,
    /// Absent when every cell of the group failed.
    pub means: Option<Means>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub benign: f64,
    pub adversarial: f64,
    pub noisy: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub method: Method,
    pub master_seed: u64,
    pub grid: EvalGrid,
    pub cells: Vec<Cell>,
    pub summary: Vec<Summary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "markdown" | "md" => Some(ReportFormat::Markdown),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

fn summarize(fraction: Option<f64>, cells: &[&Cell]) -> Summary {
    let rows: Vec<&EvalRow> = cells.iter().filter_map(|c| c.row.as_ref()).collect();
    let col = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
    let means = (!rows.is_empty()).then(|| {
        let benign = col(&|r| r.benign);
        let adversarial = col(&|r| r.adversarial_mean());
        let noisy = col(&|r| r.noisy_mean());
        Means {
            benign,
            adversarial,
            noisy,
            avg: (benign + adversarial + noisy) / 3.0,
        }
    });
    Summary {
        fraction,
        n_cells: cells.len(),
        n_failed: cells.len() - rows.len(),
        means,
    }
}

impl EvalReport {
    /// Builds the report; summary rows follow the order in which fractions
    /// first appear, then one row over all cells. Failed cells are counted
    /// in `n_failed` and left out of every mean.
    pub fn new(scenario: Scenario, method: Method, master_seed: u64, grid: EvalGrid, cells: Vec<Cell>) -> Self {
        let mut fractions: Vec<f64> = Vec::new();
        for c in &cells {
            if !fractions.iter().any(|f| f.to_bits() == c.fraction.to_bits()) {
                fractions.push(c.fraction);
            }
        }
        let mut summary: Vec<Summary> = fractions
            .iter()
            .map(|&f| {
                let group: Vec<&Cell> = cells.iter().filter(|c| c.fraction.to_bits() == f.to_bits()).collect();
                summarize(Some(f), &group)
            })
            .collect();
        summary.push(summarize(None, &cells.iter().collect::<Vec<_>>()));
        EvalReport {
            scenario,
            method,
            master_seed,
            grid,
            cells,
            summary,
        }
    }

    /// The row over all cells.
    pub fn overall(&self) -> &Summary {
        self.summary.last().expect("a report always carries the overall row")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One line per cell followed by one line per summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,fraction,repeat,seed");
        for e in &self.grid.epsilons {
            let _ = write!(out, ",adv_eps_{e}");
        }
        for e in &self.grid.etas {
            let _ = write!(out, ",noisy_eta_{e}");
        }
        out.push_str(",benign,adversarial,noisy,avg,error\n");
        let blanks = self.grid.epsilons.len() + self.grid.etas.len();
        for c in &self.cells {
            let _ = write!(out, "cell,{},{},{}", c.fraction, c.repeat, c.seed);
            match &c.row {
                Some(r) => {
                    for s in r.adversarial.iter().chain(&r.noisy) {
                        let _ = write!(out, ",{:.4}", s.accuracy);
                    }
                    let _ = writeln!(
                        out,
                        ",{:.4},{:.4},{:.4},{:.4},",
                        r.benign,
                        r.adversarial_mean(),
                        r.noisy_mean(),
                        r.avg()
                    );
                }
                None => {
                    out.push_str(&",".repeat(blanks + 4));
                    let msg = c.error.as_deref().unwrap_or("").replace('"', "'");
                    let _ = writeln!(out, ",\"{msg}\"");
                }
            }
        }
        for s in &self.summary {
            let frac = s.fraction.map(|f| f.to_string()).unwrap_or_else(|| "all".into());
            let cols = match s.means {
                Some(m) => format!("{:.4},{:.4},{:.4},{:.4}", m.benign, m.adversarial, m.noisy, m.avg),
                None => ",,,".into(),
            };
            let note = if s.n_failed > 0 {
                format!("{} failed cells", s.n_failed)
            } else {
                String::new()
            };
            let _ = writeln!(out, "summary,{frac},,{},{cols},{note}", ",".repeat(blanks));
        }
        out
    }

    /// Benign / Adversarial / Noisy / Avg table, one row per summary row.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "### {} / {}\n\n| Fraction | Benign | Adversarial | Noisy | Avg | Cells |\n|---|---:|---:|---:|---:|---:|\n",
            self.scenario.as_str(),
            self.method.as_str()
        );
        for s in &self.summary {
            let frac = s.fraction.map(|f| format!("{f}")).unwrap_or_else(|| "all".into());
            let cells = if s.n_failed > 0 {
                format!("{} ({} failed)", s.n_cells, s.n_failed)
            } else {
                s.n_cells.to_string()
            };
            let cols = match s.means {
                Some(m) => format!("{:.2} | {:.2} | {:.2} | {:.2}", m.benign, m.adversarial, m.noisy, m.avg),
                None => "n/a | n/a | n/a | n/a".into(),
            };
            let _ = writeln!(out, "| {frac} | {cols} | {cells} |");
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        Ok(match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => self.to_markdown(),
        })
    }
}

/// Writes `reports` to `path`; several reports are concatenated (a JSON
/// array for `json`).
pub fn render_report(reports: &[EvalReport], format: ReportFormat, path: &Path) -> Result<()> {
    ensure!(!reports.is_empty(), Validation, "nothing to render");
    let text = match (format, reports) {
        (ReportFormat::Json, [one]) => one.to_json()?,
        (ReportFormat::Json, many) => serde_json::to_string_pretty(many)?,
        (f, many) => {
            let parts = many.iter().map(|r| r.render(f)).collect::<Result<Vec<_>>>()?;
            parts.join("\n")
        }
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads reports written by [`render_report`] in JSON form.
pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        Ok(serde_json::from_str(&text)?)
    } else {
        Ok(vec![EvalReport::from_json(&text)?])
    }
}
