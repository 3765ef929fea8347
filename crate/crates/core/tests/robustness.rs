use slora_core::model::{Activation, ModelSpec, Objective, Split, SynthKind, SynthTask, TrainParams};
use slora_core::numerics::kendall_tau;
use slora_core::robustness::{
    cross_domain_tau, epoch_stability_tau, orthogonal_control, related_domains, subset_size_tau, theta_ordering,
    NamedDataset, OrderingSettings, RobustnessConfig, RobustnessError,
};

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
fn same_domain_twice_is_perfectly_correlated() {
    let task = desk_task(0);
    let calib = task.dataset(256, 1, Split::Calibration);
    let d = NamedDataset {
        name: "calib".into(),
        data: calib,
    };
    let m = cross_domain_tau(task.base_model(), &[d.clone(), d], &OrderingSettings::default()).unwrap();
    assert_eq!(m.values, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    assert!(matches!(
        cross_domain_tau(task.base_model(), &[], &OrderingSettings::default()),
        Err(RobustnessError::TooFewDomains(0))
    ));
}

#[test]
fn related_input_laws_agree() {
    let task = desk_task(2);
    let domains = related_domains(&task, 512, 7);
    let m = cross_domain_tau(task.base_model(), &domains, &OrderingSettings::default()).unwrap();
    assert_eq!(m.names, ["gaussian", "uniform", "laplace"]);
    for i in 0..3 {
        assert_eq!(m.values[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(m.values[i][j], m.values[j][i]);
        }
    }
    assert!(m.min_off_diagonal() >= 0.9, "{m:?}");
}

#[test]
fn orthogonal_domains_can_disagree() {
    let (model, domains) = orthogonal_control(512, 0).unwrap();
    let m = cross_domain_tau(&model, &domains, &OrderingSettings::default()).unwrap();
    assert!(m.min_off_diagonal() < 0.5, "{m:?}");
}

#[test]
fn subsets_are_deterministic_and_full_set_is_exact() {
    let task = desk_task(1);
    let calib = task.dataset(512, 1, Split::Calibration);
    let cfg = RobustnessConfig::default();
    let s = OrderingSettings::default();
    let a = subset_size_tau(task.base_model(), &calib, &cfg, &s).unwrap();
    assert_eq!(a, subset_size_tau(task.base_model(), &calib, &cfg, &s).unwrap());
    assert_eq!(a.iter().map(|r| r.samples).collect::<Vec<_>>(), [51, 102, 256, 512]);
    assert_eq!(a.last().unwrap().tau, 1.0);
    assert!(a[0].tau >= 0.95, "{a:?}");

    let tiny = task.dataset(50, 1, Split::Calibration);
    assert!(matches!(
        subset_size_tau(task.base_model(), &tiny, &cfg, &s),
        Err(RobustnessError::SubsetTooSmall { .. })
    ));
}

#[test]
fn frozen_training_keeps_the_ordering() {
    let task = desk_task(4);
    let train = task.dataset(256, 1, Split::Train);
    let calib = task.dataset(256, 2, Split::Calibration);
    let frozen = TrainParams {
        lr: 0.0,
        ..Default::default()
    };
    let cfg = RobustnessConfig {
        epoch_checkpoints: vec![0, 1, 3],
        ..Default::default()
    };
    let rows = epoch_stability_tau(task.base_model(), &train, &calib, &cfg, frozen, &OrderingSettings::default()).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 3]);
    assert!(rows.iter().all(|r| r.tau == 1.0));
}

#[test]
fn ordering_survives_fine_tuning() {
    let task = desk_task(0);
    let train = task.dataset(2048, 1, Split::Train);
    let calib = task.dataset(512, 2, Split::Calibration);
    let rows = epoch_stability_tau(
        task.base_model(),
        &train,
        &calib,
        &RobustnessConfig::default(),
        TrainParams::default(),
        &OrderingSettings::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].tau, 1.0);
    assert!(rows.iter().all(|r| r.tau >= 0.9), "{rows:?}");
}

#[test]
fn ordering_is_a_permutation_of_all_matrices() {
    let task = desk_task(3);
    let calib = task.dataset(128, 1, Split::Calibration);
    let o = theta_ordering(task.base_model(), &calib, &OrderingSettings::default()).unwrap();
    assert_eq!(o.len(), 6);
    assert_eq!(kendall_tau(&o, &o).unwrap(), 1.0);
    assert_eq!(kendall_tau(&o, &o.reversed()).unwrap(), -1.0);
}
