//! Scenario orchestration, the benign / adversarial / noisy evaluation
//! protocol and report rendering.

mod config;
mod protocol;
mod report;
mod scenario;

pub use config::{DataSource, EvalGrid, Method, Scenario, ScenarioConfig};
pub use protocol::{evaluate_model, EvalRow, HeldOut, Score};
pub use report::{read_reports, render_report, Cell, EvalReport, Means, ReportFormat, Summary};
pub use scenario::{load_data, run_methods, run_scenario, ScenarioData};
