use slora_core::alloc::{allocate, validate_allocation, AllocationConfig, Strategy};
use slora_core::hessian::{probe_all, ProbeConfig};
use slora_core::lora::{attach_lora, compare_allocations, finetune_adapters, CompareContext, CompareError};
use slora_core::metrics::{sensitivity_report, MetricParams};
use slora_core::model::{Activation, ModelSpec, Objective, Split, SynthKind, SynthTask, TrainParams};

fn desk_task(seed: u64) -> SynthTask {
    let spec = ModelSpec {
        input_dim: 8,
        hidden_dims: vec![16; 5],
        attention_blocks: 0,
        seq_len: 1,
        output_dim: 4,
        activation: Activation::Relu,
        task: Objective::RegressionMse,
        seed,
    };
    SynthTask::new(SynthKind::HeterogeneousTeacher, spec, seed).unwrap()
}

#[test]
fn sensitivity_pipeline_favours_shifted_matrices() {
    let task = desk_task(0);
    let calib = task.dataset(512, 2, Split::Calibration);
    let diags = probe_all(task.base_model(), &calib, &ProbeConfig::default()).unwrap();
    let report = sensitivity_report(&diags, &MetricParams::default()).unwrap();
    let cfg = AllocationConfig::default();
    let alloc = allocate(&report.theta(), &report.dims(), &cfg).unwrap();
    assert!(validate_allocation(&alloc, &task.base_model().dims(), &cfg).is_empty());
    let shifted = task.shifted_ids();
    let min_shifted = shifted.iter().map(|id| alloc.ranks[id]).min().unwrap();
    for (id, r) in &alloc.ranks {
        if !shifted.contains(id) {
            assert!(*r <= min_shifted, "{id} got {r}");
        }
    }
}

#[test]
fn teacher_correction_is_learnable_with_enough_rank() {
    let task = desk_task(3);
    let train = task.dataset(512, 1, Split::Train);
    let eval = task.dataset(256, 3, Split::Eval);
    let calib = task.dataset(256, 2, Split::Calibration);
    let diags = probe_all(task.base_model(), &calib, &ProbeConfig::default()).unwrap();
    let report = sensitivity_report(&diags, &MetricParams::default()).unwrap();
    let cfg = AllocationConfig {
        avg_rank: 6,
        ..Default::default()
    };
    let alloc = allocate(&report.theta(), &report.dims(), &cfg).unwrap();
    assert!(task.shifted_ids().iter().all(|id| alloc.ranks[id] >= 8), "{alloc:?}");
    let mut set = attach_lora(task.base_model(), &alloc, 0).unwrap();
    let p = TrainParams {
        epochs: 20,
        lr: 2e-3,
        batch_size: 32,
    };
    let r = finetune_adapters(&mut set, &train, &eval, p).unwrap();
    assert!(r.final_train_loss < 0.5 * r.initial_train_loss, "{:?}", r.loss_curve);
    assert_eq!(set.base(), task.base_model());
}

#[test]
fn comparison_is_deterministic_and_budget_matched() {
    let task = desk_task(1);
    let train = task.dataset(512, 1, Split::Train);
    let calib = task.dataset(256, 2, Split::Calibration);
    let eval = task.dataset(256, 3, Split::Eval);
    let ctx = CompareContext {
        model: task.base_model(),
        train: &train,
        calibration: &calib,
        eval: &eval,
        probe: ProbeConfig::default(),
        metrics: MetricParams::default(),
        finetune: TrainParams {
            epochs: 3,
            ..Default::default()
        },
        lora_scale: 1.0,
    };
    let base = AllocationConfig::default();
    let cfgs = [base.with_strategy(Strategy::Uniform), base.with_strategy(Strategy::Sra)];
    let a = compare_allocations(&ctx, &cfgs, &[0, 1, 2]).unwrap();
    let b = compare_allocations(&ctx, &cfgs, &[0, 1, 2]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 6);
    assert_eq!(a.summaries.len(), 2);
    assert!(a.rows.iter().all(|r| r.r_total == a.r_total));
    assert!(a.allocations.iter().all(|al| al.ranks.values().sum::<usize>() == 24));
    let params = |s| a.rows.iter().find(|r| r.strategy == s).unwrap().trainable_params;
    assert!(params(Strategy::Uniform) > 0 && params(Strategy::Sra) > 0);

    let mismatched = [base.with_strategy(Strategy::Uniform), AllocationConfig { avg_rank: 3, ..base }];
    assert!(matches!(
        compare_allocations(&ctx, &mismatched, &[0, 1, 2]),
        Err(CompareError::InvalidRunMatrix(_))
    ));
    assert!(compare_allocations(&ctx, &cfgs, &[0, 1]).is_err());
}

#[test]
fn sra_beats_uniform_at_equal_budget() {
    let task = desk_task(0);
    let train = task.dataset(2048, 1, Split::Train);
    let calib = task.dataset(512, 2, Split::Calibration);
    let eval = task.dataset(1024, 3, Split::Eval);
    let ctx = CompareContext {
        model: task.base_model(),
        train: &train,
        calibration: &calib,
        eval: &eval,
        probe: ProbeConfig::default(),
        metrics: MetricParams::default(),
        finetune: TrainParams::default(),
        lora_scale: 1.0,
    };
    let base = AllocationConfig::default();
    let seeds = [0, 1, 2, 3, 4];
    let t = compare_allocations(
        &ctx,
        &[base.with_strategy(Strategy::Uniform), base.with_strategy(Strategy::Sra)],
        &seeds,
    )
    .unwrap();
    let wins = seeds
        .iter()
        .filter(|s| t.row(Strategy::Sra, **s).unwrap().eval_loss <= t.row(Strategy::Uniform, **s).unwrap().eval_loss)
        .count();
    assert!(wins >= 4, "{t:?}");
    assert!(t.summary(Strategy::Sra).unwrap().mean_eval_loss <= t.summary(Strategy::Uniform).unwrap().mean_eval_loss);
}
