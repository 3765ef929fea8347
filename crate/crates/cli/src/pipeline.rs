//! The stage sequences behind each command. Nothing here touches the disk.

use std::time::Instant;

use slora_core::alloc::{allocate, validate_allocation};
use slora_core::hessian::probe_all;
use slora_core::lora::{attach_lora, compare_allocations, finetune_adapters, CompareContext};
use slora_core::metrics::sensitivity_report;
use slora_core::model::Split;
use slora_core::robustness::{
    cross_domain_tau, epoch_stability_tau, orthogonal_control, subset_size_tau, NamedDataset,
};

use crate::config::{RunConfig, Scope};
use crate::error::CliError;
use crate::report::{
    AllocationSection, Command, ProbeRecord, RobustnessTables, RunReport, StageTime, StageTimings, ThresholdChecks,
};

struct Clock {
    start: Instant,
    mark: Instant,
    timings: StageTimings,
}

impl Clock {
    fn start() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            mark: now,
            timings: StageTimings::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.stages.push(StageTime {
            stage: stage.into(),
            ms: (now - self.mark).as_secs_f64() * 1e3,
        });
        self.mark = now;
    }

    fn finish(mut self) -> StageTimings {
        self.timings.total_ms = self.start.elapsed().as_secs_f64() * 1e3;
        self.timings
    }
}

fn scope(command: Command) -> Scope {
    match command {
        Command::Probe => Scope::Probe,
        Command::Allocate => Scope::Allocate,
        Command::Compare => Scope::Compare,
        Command::Robustness => Scope::Robustness,
        Command::E2e => Scope::EndToEnd,
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<RunReport, CliError> {
    cfg.validate(scope(command))?;
    match command {
        Command::Probe => run_probe(cfg),
        Command::Allocate => run_analysis(Command::Allocate, cfg),
        Command::Compare => run_compare(cfg),
        Command::Robustness => run_robustness(cfg),
        Command::E2e => run_analysis(Command::E2e, cfg),
    }
}

fn run_probe(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let mut clock = Clock::start();
    let data = cfg.materialize()?;
    clock.lap("data");
    let diags = probe_all(data.task.base_model(), &data.calibration, &cfg.probe)?;
    clock.lap("probe");
    let mut report = RunReport::new(Command::Probe, cfg.clone());
    report.probe = Some(diags.into_values().map(ProbeRecord::new).collect());
    report.timings_ms = Some(clock.finish());
    Ok(report)
}

/// Probe → metrics → allocate, then for `e2e` attach → fine-tune → evaluate.
fn run_analysis(command: Command, cfg: &RunConfig) -> Result<RunReport, CliError> {
    let mut clock = Clock::start();
    let data = cfg.materialize()?;
    let model = data.task.base_model();
    clock.lap("data");
    let diags = probe_all(model, &data.calibration, &cfg.probe)?;
    clock.lap("probe");
    let sensitivity = sensitivity_report(&diags, &cfg.metrics)?;
    clock.lap("metrics");
    let alloc = allocate(&sensitivity.theta(), &model.dims(), &cfg.allocation)?;
    let violations = validate_allocation(&alloc, &model.dims(), &cfg.allocation);
    clock.lap("allocate");
    if !violations.is_empty() {
        return Err(CliError::Runtime(format!("allocation failed its budget audit: {violations:?}")));
    }

    let mut report = RunReport::new(command, cfg.clone());
    if command == Command::E2e {
        let mut set = attach_lora(model, &alloc, cfg.seed)?.with_scale(cfg.finetune.lora_scale);
        let result = finetune_adapters(&mut set, &data.train, &data.eval, cfg.finetune.train_params())?;
        clock.lap("finetune");
        report.finetune = Some(result);
    }
    report.probe = Some(diags.into_values().map(ProbeRecord::new).collect());
    report.sensitivity = Some(sensitivity);
    report.allocation = Some(AllocationSection {
        allocation: alloc,
        violations,
    });
    report.timings_ms = Some(clock.finish());
    Ok(report)
}

fn run_compare(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let mut clock = Clock::start();
    let data = cfg.materialize()?;
    clock.lap("data");
    let ctx = CompareContext {
        model: data.task.base_model(),
        train: &data.train,
        calibration: &data.calibration,
        eval: &data.eval,
        probe: cfg.probe,
        metrics: cfg.metrics,
        finetune: cfg.finetune.train_params(),
        lora_scale: cfg.finetune.lora_scale,
    };
    let cfgs: Vec<_> = cfg
        .compare
        .strategies
        .iter()
        .map(|s| cfg.allocation.with_strategy(*s))
        .collect();
    let table = compare_allocations(&ctx, &cfgs, &cfg.compare.seeds)?;
    clock.lap("compare");
    let mut report = RunReport::new(Command::Compare, cfg.clone());
    report.comparison = Some(table);
    report.timings_ms = Some(clock.finish());
    Ok(report)
}

fn run_robustness(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let mut clock = Clock::start();
    let data = cfg.materialize()?;
    let model = data.task.base_model();
    let settings = cfg.ordering_settings();
    let r = &cfg.robustness;
    let domains: Vec<NamedDataset> = r
        .domains
        .iter()
        .map(|d| NamedDataset {
            name: d.name().to_string(),
            data: data.task.dataset_from(r.domain_size, r.domain_seed, Split::Calibration, *d),
        })
        .collect();
    clock.lap("data");

    let cross_domain = cross_domain_tau(model, &domains, &settings)?;
    clock.lap("cross_domain");
    let subset = subset_size_tau(model, &data.calibration, &r.protocol, &settings)?;
    clock.lap("subset");
    let epoch = epoch_stability_tau(
        model,
        &data.train,
        &data.calibration,
        &r.protocol,
        cfg.finetune.train_params(),
        &settings,
    )?;
    clock.lap("epoch");
    let negative_control = if r.negative_control {
        let (control, halves) = orthogonal_control(r.domain_size, r.domain_seed)?;
        let m = cross_domain_tau(&control, &halves, &settings)?;
        clock.lap("negative_control");
        Some(m)
    } else {
        None
    };

    let p = &r.protocol;
    let thresholds_met = ThresholdChecks {
        cross_domain: cross_domain.min_off_diagonal() >= p.cross_domain_threshold,
        subset: subset.iter().all(|s| s.tau >= p.subset_threshold),
        epoch: epoch.iter().all(|e| e.tau >= p.epoch_threshold),
    };
    let mut report = RunReport::new(Command::Robustness, cfg.clone());
    report.robustness = Some(RobustnessTables {
        cross_domain,
        subset,
        epoch,
        negative_control,
        thresholds_met,
    });
    report.timings_ms = Some(clock.finish());
    Ok(report)
}
