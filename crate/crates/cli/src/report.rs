//! The JSON run report and its schema check.

use serde::{Deserialize, Serialize};
use slora_core::alloc::{RankAllocation, Violation};
use slora_core::hessian::HessianDiagonal;
use slora_core::lora::{ComparisonTable, FinetuneResult};
use slora_core::metrics::SensitivityReport;
use slora_core::robustness::{EpochTau, SubsetTau, TauMatrix};
use slora_core::WeightMatrixId;

use crate::config::RunConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "slora";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Probe,
    Allocate,
    Compare,
    Robustness,
    E2e,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Probe => "probe",
            Command::Allocate => "allocate",
            Command::Compare => "compare",
            Command::Robustness => "robustness",
            Command::E2e => "e2e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub matrix_id: WeightMatrixId,
    pub d1: usize,
    pub d2: usize,
    pub trace: f64,
    pub diagonal: HessianDiagonal,
}

impl ProbeRecord {
    pub fn new(diag: HessianDiagonal) -> Self {
        Self {
            matrix_id: diag.matrix_id,
            d1: diag.d1,
            d2: diag.d2,
            trace: diag.trace(),
            diagonal: diag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSection {
    pub allocation: RankAllocation,
    /// Budget audit; empty when the allocation is sound.
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdChecks {
    pub cross_domain: bool,
    pub subset: bool,
    pub epoch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTables {
    pub cross_domain: TauMatrix,
    pub subset: Vec<SubsetTau>,
    pub epoch: Vec<EpochTau>,
    pub negative_control: Option<TauMatrix>,
    pub thresholds_met: ThresholdChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub ms: f64,
}

/// Wall time per stage from a monotonic clock, in pipeline order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<StageTime>,
    pub total_ms: f64,
}

/// Stages that make up the sensitivity analysis itself.
pub const ANALYSIS_STAGES: [&str; 3] = ["probe", "metrics", "allocate"];

impl StageTimings {
    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.ms)
    }

    pub fn analysis_ms(&self) -> f64 {
        ANALYSIS_STAGES.iter().filter_map(|s| self.get(s)).sum()
    }

    /// Probe + metrics + allocate as a fraction of the whole pipeline.
    pub fn overhead_fraction(&self) -> f64 {
        if self.total_ms > 0.0 {
            self.analysis_ms() / self.total_ms
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: Command,
    /// Set when timestamps and timings were stripped.
    pub normalized: bool,
    pub created_unix_ms: Option<u64>,
    pub config: RunConfig,
    pub probe: Option<Vec<ProbeRecord>>,
    pub sensitivity: Option<SensitivityReport>,
    pub allocation: Option<AllocationSection>,
    pub finetune: Option<FinetuneResult>,
    pub comparison: Option<ComparisonTable>,
    pub robustness: Option<RobustnessTables>,
    pub timings_ms: Option<StageTimings>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("report is not valid JSON for this schema: {0}")]
    Parse(String),
    #[error("report schema version {found}, expected {REPORT_SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("report was written by `{0}`")]
    Tool(String),
    #[error("{command} report is missing its `{section}` section")]
    MissingSection { command: &'static str, section: &'static str },
}

impl RunReport {
    pub fn new(command: Command, config: RunConfig) -> Self {
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .ok();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command,
            normalized: false,
            created_unix_ms: created,
            config,
            probe: None,
            sensitivity: None,
            allocation: None,
            finetune: None,
            comparison: None,
            robustness: None,
            timings_ms: None,
        }
    }

    /// Drops everything that legitimately differs between identical runs.
    pub fn normalize(&mut self) {
        self.normalized = true;
        self.created_unix_ms = None;
        self.timings_ms = None;
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Parses and checks a report against the schema.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))?;
        // check the version before the shape, so old reports fail clearly
        if let Some(v) = value.get("schema_version").and_then(|v| v.as_u64()) {
            if v != REPORT_SCHEMA_VERSION as u64 {
                return Err(ReportError::SchemaVersion { found: v as u32 });
            }
        }
        let report: RunReport = serde_json::from_value(value).map_err(|e| ReportError::Parse(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(ReportError::SchemaVersion {
                found: self.schema_version,
            });
        }
        if self.tool != TOOL_NAME {
            return Err(ReportError::Tool(self.tool.clone()));
        }
        let command = self.command.as_str();
        let need = |present: bool, section: &'static str| {
            if present {
                Ok(())
            } else {
                Err(ReportError::MissingSection { command, section })
            }
        };
        match self.command {
            Command::Probe => need(self.probe.is_some(), "probe")?,
            Command::Allocate => {
                need(self.probe.is_some(), "probe")?;
                need(self.sensitivity.is_some(), "sensitivity")?;
                need(self.allocation.is_some(), "allocation")?;
            }
            Command::Compare => need(self.comparison.is_some(), "comparison")?,
            Command::Robustness => need(self.robustness.is_some(), "robustness")?,
            Command::E2e => {
                need(self.probe.is_some(), "probe")?;
                need(self.sensitivity.is_some(), "sensitivity")?;
                need(self.allocation.is_some(), "allocation")?;
                need(self.finetune.is_some(), "finetune")?;
            }
        }
        if !self.normalized {
            need(self.timings_ms.is_some(), "timings_ms")?;
            need(self.created_unix_ms.is_some(), "created_unix_ms")?;
        }
        Ok(())
    }
}
