//! Run directories and the CSV / JSON artifacts written into them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use slora_core::alloc::RankAllocation;
use slora_core::hessian::Estimator;
use slora_core::lora::ComparisonTable;
use slora_core::metrics::SensitivityReport;
use slora_core::robustness::{EpochTau, SubsetTau, TauMatrix};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{Command, ProbeRecord, RunReport};

const HASH_PREFIX: usize = 12;

/// Content address of a run: the command plus the effective config.
pub fn run_hash(command: Command, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_str().as_bytes());
    h.update(b"\n");
    h.update(cfg.to_toml_string().as_bytes());
    hex::encode(h.finalize())[..HASH_PREFIX].to_string()
}

/// Creates a fresh `<root>/<command>-<hash>` directory, suffixing `-1`,
/// `-2`, ... rather than touching an earlier run.
pub fn create_run_dir(root: &Path, command: Command, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root)?;
    let base = format!("{}-{}", command.as_str(), run_hash(command, cfg));
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn estimator_name(e: Estimator) -> &'static str {
    match e {
        Estimator::ExactFd => "exact_fd",
        Estimator::ActivationSurrogate => "activation_surrogate",
    }
}

fn finish(mut w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    w.flush()?;
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn probe_csv(records: &[ProbeRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["matrix_id", "d1", "d2", "estimator", "trace", "damping", "damping_escalations"])?;
    for r in records {
        w.write_record([
            r.matrix_id.to_string(),
            r.d1.to_string(),
            r.d2.to_string(),
            estimator_name(r.diagonal.estimator).to_string(),
            r.trace.to_string(),
            r.diagonal.damping.to_string(),
            r.diagonal.damping_escalations.to_string(),
        ])?;
    }
    finish(w)
}

/// One row per matrix, most sensitive first.
pub fn allocation_csv(sens: &SensitivityReport, alloc: &RankAllocation) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "matrix_id",
        "d1",
        "d2",
        "s_global",
        "s_topk",
        "s_effrank",
        "s_local",
        "theta",
        "raw_share",
        "rank",
        "clamped",
    ])?;
    for id in sens.ordering().items() {
        let m = &sens.matrices[id];
        w.write_record([
            id.to_string(),
            m.d1.to_string(),
            m.d2.to_string(),
            m.s_global.to_string(),
            m.s_topk.to_string(),
            m.s_effrank.to_string(),
            m.s_local.to_string(),
            m.theta.to_string(),
            alloc.raw_shares.get(id).map(f64::to_string).unwrap_or_default(),
            alloc.ranks[id].to_string(),
            alloc.is_clamped(id).to_string(),
        ])?;
    }
    finish(w)
}

/// Per-seed `result` rows followed by one `summary` row per strategy.
pub fn comparison_csv(t: &ComparisonTable) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_type", "strategy", "seed", "r_total", "train_loss", "eval_loss", "eval_loss_std"])?;
    for r in &t.rows {
        w.write_record([
            "result".to_string(),
            r.strategy.to_string(),
            r.seed.to_string(),
            r.r_total.to_string(),
            r.train_loss.to_string(),
            r.eval_loss.to_string(),
            String::new(),
        ])?;
    }
    for s in &t.summaries {
        w.write_record([
            "summary".to_string(),
            s.strategy.to_string(),
            String::new(),
            t.r_total.to_string(),
            s.mean_train_loss.to_string(),
            s.mean_eval_loss.to_string(),
            s.std_eval_loss.to_string(),
        ])?;
    }
    finish(w)
}

pub fn tau_matrix_csv(m: &TauMatrix) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["domain".to_string()];
    header.extend(m.names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.names.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn subset_csv(rows: &[SubsetTau]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fraction", "tau"])?;
    for r in rows {
        w.write_record([r.fraction.to_string(), r.tau.to_string()])?;
    }
    finish(w)
}

pub fn epoch_csv(rows: &[EpochTau]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "tau"])?;
    for r in rows {
        w.write_record([r.epoch.to_string(), r.tau.to_string()])?;
    }
    finish(w)
}

pub fn loss_curve_csv(curve: &[f64]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss"])?;
    for (i, l) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    finish(w)
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::File::create_new(dir.join(name))?;
    f.write_all(bytes)?;
    Ok(())
}

/// Writes every artifact the report supports, plus `report.json`.
/// Returns the file names written, in order.
pub fn write_artifacts(dir: &Path, report: &RunReport) -> Result<Vec<String>, CliError> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    if let Some(p) = &report.probe {
        files.push(("probe.csv".into(), probe_csv(p)?));
    }
    if let (Some(s), Some(a)) = (&report.sensitivity, &report.allocation) {
        files.push(("allocation.csv".into(), allocation_csv(s, &a.allocation)?));
    }
    if let Some(f) = &report.finetune {
        files.push(("loss_curve.csv".into(), loss_curve_csv(&f.loss_curve)?));
    }
    if let Some(t) = &report.comparison {
        files.push(("comparison.csv".into(), comparison_csv(t)?));
        for a in &t.allocations {
            files.push((format!("allocation_{}.csv", a.strategy_used), allocation_csv(&t.sensitivity, a)?));
        }
    }
    if let Some(r) = &report.robustness {
        files.push(("tau_cross_domain.csv".into(), tau_matrix_csv(&r.cross_domain)?));
        files.push(("tau_subset.csv".into(), subset_csv(&r.subset)?));
        files.push(("tau_epoch.csv".into(), epoch_csv(&r.epoch)?));
        if let Some(m) = &r.negative_control {
            files.push(("tau_negative_control.csv".into(), tau_matrix_csv(m)?));
        }
    }
    files.push(("report.json".into(), report.to_json().into_bytes()));
    for (name, bytes) in &files {
        put(dir, name, bytes)?;
    }
    Ok(files.into_iter().map(|(n, _)| n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let a = create_run_dir(tmp.path(), Command::Probe, &cfg).unwrap();
        let b = create_run_dir(tmp.path(), Command::Probe, &cfg).unwrap();
        let c = create_run_dir(tmp.path(), Command::Allocate, &cfg).unwrap();
        let name = |p: &PathBuf| p.file_name().unwrap().to_str().unwrap().to_string();
        let hash = run_hash(Command::Probe, &cfg);
        assert_eq!(name(&a), format!("probe-{hash}"));
        assert_eq!(name(&b), format!("probe-{hash}-1"));
        assert!(name(&c).starts_with("allocate-"));
        assert_eq!(hash.len(), HASH_PREFIX);

        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(run_hash(Command::Probe, &other), hash);
    }

    #[test]
    fn csv_fields_are_quoted_only_when_needed() {
        let m = TauMatrix {
            names: vec!["a,b".into(), "c".into()],
            values: vec![vec![1.0, -0.5], vec![-0.5, 1.0]],
        };
        let text = String::from_utf8(tau_matrix_csv(&m).unwrap()).unwrap();
        assert_eq!(text, "domain,\"a,b\",c\n\"a,b\",1,-0.5\nc,-0.5,1\n");
        let curve = String::from_utf8(loss_curve_csv(&[0.5, 0.25]).unwrap()).unwrap();
        assert_eq!(curve, "epoch,train_loss\n1,0.5\n2,0.25\n");
    }
}
