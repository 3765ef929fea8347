use slora_core::alloc::AllocError;
use slora_core::hessian::ProbeError;
use slora_core::lora::{CompareError, LoraError};
use slora_core::metrics::MetricError;
use slora_core::robustness::RobustnessError;

use crate::config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("infeasible allocation: {0}")]
    Infeasible(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) | CliError::Io(_) => EXIT_RUNTIME,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::InvalidConfig { field, reason } => ConfigError::new(format!("probe.{field}"), reason).into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::InvalidParams { field, reason } => ConfigError::new(format!("metrics.{field}"), reason).into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AllocError> for CliError {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::InfeasibleBudget { .. } => CliError::Infeasible(e.to_string()),
            AllocError::InvalidConfig { field, reason } => {
                ConfigError::new(format!("allocation.{field}"), reason).into()
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<CompareError> for CliError {
    fn from(e: CompareError) -> Self {
        match e {
            CompareError::InvalidRunMatrix(msg) => ConfigError::new("compare", msg).into(),
            CompareError::Probe(e) => e.into(),
            CompareError::Metric(e) => e.into(),
            CompareError::Alloc(e) => e.into(),
            CompareError::Lora(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<RobustnessError> for CliError {
    fn from(e: RobustnessError) -> Self {
        match e {
            RobustnessError::InvalidConfig { field, reason } => {
                ConfigError::new(format!("robustness.protocol.{field}"), reason).into()
            }
            RobustnessError::TooFewDomains(_) => ConfigError::new("robustness.domains", e.to_string()).into(),
            RobustnessError::SubsetTooSmall { .. } => {
                ConfigError::new("robustness.protocol.subset_fractions", e.to_string()).into()
            }
            RobustnessError::Probe(e) => e.into(),
            RobustnessError::Metric(e) => e.into(),
            RobustnessError::Alloc(e) => e.into(),
            RobustnessError::Lora(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_cause() {
        let infeasible: CliError = AllocError::InfeasibleBudget {
            r_total: 99,
            min_total: 1,
            max_total: 2,
        }
        .into();
        assert_eq!(infeasible.exit_code(), EXIT_INFEASIBLE);
        let cfg: CliError = ProbeError::InvalidConfig {
            field: "damping_fraction",
            reason: "must be > 0",
        }
        .into();
        assert_eq!(cfg.exit_code(), EXIT_CONFIG);
        assert!(cfg.to_string().contains("probe.damping_fraction"));
        let wrapped: CliError = CompareError::Alloc(AllocError::InfeasibleBudget {
            r_total: 1,
            min_total: 6,
            max_total: 9,
        })
        .into();
        assert_eq!(wrapped.exit_code(), EXIT_INFEASIBLE);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), EXIT_RUNTIME);
    }
}
