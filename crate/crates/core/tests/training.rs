//! Trainers, checkpoints and resumption on a miniature dataset.

use xmd_core::config::Provenance;
use xmd_core::distill::{
    prepare_scenes, pretrain_2d, train_fskd, train_pseudolabel_baseline, train_udakd, DistillConfig, RunOptions,
    SceneView,
};
use xmd_core::eval::{finetune, zero_shot_eval};
use xmd_core::models::{
    load_checkpoint, save_checkpoint, swap_classifier, Module, ModelConfig, Network2D, Network3D, SharedClassifier,
};
use xmd_core::scenegen::{generate_dataset, CountRange, SceneSpec};
use xmd_core::Error;

fn tiny_spec() -> SceneSpec {
    SceneSpec {
        image_height: 64,
        image_width: 96,
        lidar_azimuth_steps: 120,
        lidar_elevation_steps: 8,
        buildings: CountRange::new(1, 2),
        vehicles: CountRange::new(1, 3),
        poles: CountRange::new(1, 2),
        vegetation: CountRange::new(1, 2),
        barriers: CountRange::new(1, 2),
        pedestrians: CountRange::new(1, 3),
        clutter: CountRange::new(1, 2),
        ..SceneSpec::default()
    }
}

fn tiny_cfg() -> DistillConfig {
    DistillConfig {
        epochs_pretrain: 2,
        epochs_udakd: 2,
        epochs_fskd: 4,
        epochs_finetune: 2,
        batch_pretrain: 2,
        batch_udakd: 2,
        batch_fskd: 2,
        batch_finetune: 2,
        pixels_per_image: 128,
        superpixels: 12,
        slic_iters: 2,
        ..DistillConfig::default()
    }
}

fn fixture() -> (Vec<SceneView>, Vec<SceneView>, ModelConfig) {
    let model = ModelConfig::default();
    let (tr, va) = generate_dataset(&tiny_spec(), 3, 4, 2).unwrap();
    let cfg = tiny_cfg();
    (
        prepare_scenes(&tr, &model, cfg.crop_margin).unwrap(),
        prepare_scenes(&va, &model, cfg.crop_margin).unwrap(),
        model,
    )
}

fn prov() -> Provenance {
    Provenance::new("test", 0)
}

fn bits(net: &Network3D<f32>) -> Vec<(String, Vec<u32>)> {
    net.parameters()
        .into_iter()
        .map(|p| (p.name.clone(), p.value().data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn pretraining_is_deterministic() {
    let (train, _, model) = fixture();
    let cfg = tiny_cfg();
    let run = RunOptions::in_memory(prov());
    let (a, ra) = pretrain_2d(&train, &model, &cfg, &run).unwrap();
    let (b, rb) = pretrain_2d(&train, &model, &cfg, &run).unwrap();
    assert_eq!(ra, rb);
    for (p, q) in a.parameters().into_iter().zip(b.parameters()) {
        assert_eq!(p.value().data(), q.value().data(), "{}", p.name);
    }
    assert_eq!(ra.epochs.len(), 2);
    assert_eq!(ra.steps, 4);
}

#[test]
fn resumed_fskd_equals_uninterrupted_run() {
    let (train, _, model) = fixture();
    let cfg = tiny_cfg();
    let teacher = Network2D::<f32>::new(&model, 0);
    let (whole, whole_report) = train_fskd(&train, &teacher, &model, &cfg, &RunOptions::in_memory(prov())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut run = RunOptions::in_dir(dir.path(), prov());
    run.stop_after = Some(2);
    let (_, partial) = train_fskd(&train, &teacher, &model, &cfg, &run).unwrap();
    assert_eq!(partial.epochs.len(), 2);
    assert!(dir.path().join("checkpoint/manifest.json").exists());

    run.stop_after = None;
    run.resume = true;
    let (resumed, resumed_report) = train_fskd(&train, &teacher, &model, &cfg, &run).unwrap();
    assert_eq!(resumed_report, whole_report);
    assert_eq!(bits(&resumed), bits(&whole));

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), whole_report.steps);
}

#[test]
fn resume_rejects_other_kind_or_config() {
    let (train, _, model) = fixture();
    let cfg = tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunOptions::in_dir(dir.path(), prov());
    run.stop_after = Some(1);
    pretrain_2d(&train, &model, &cfg, &run).unwrap();

    run.resume = true;
    let teacher = Network2D::<f32>::new(&model, 0);
    let err = train_fskd(&train, &teacher, &model, &cfg, &run).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    run.provenance = Provenance::new("other", 0);
    let err = pretrain_2d(&train, &model, &cfg, &run).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (_, val, model) = fixture();
    let d = SharedClassifier::new(model.c_img, model.hidden, model.c_cls, 4, "d");
    let net = Network3D::<f32>::new(&model, 4, true, d.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), "fskd", &prov(), net.parameters(), false).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.manifest.kind, "fskd");

    let mut other = Network3D::<f32>::new(&model, 99, true, SharedClassifier::new(model.c_img, model.hidden, model.c_cls, 99, "d")).unwrap();
    assert_ne!(bits(&other), bits(&net));
    let n = ck.assign(other.parameters_mut(), true).unwrap();
    assert_eq!(n, net.parameters().len());
    assert_eq!(bits(&other), bits(&net));
    assert_eq!(net.predict(&val[0].full).unwrap(), other.predict(&val[0].full).unwrap());

    let mut direct = Network3D::<f32>::direct(&model, 0, 8);
    assert!(matches!(ck.assign(direct.parameters_mut(), true), Err(Error::Data(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(empty.path()), Err(Error::MissingArtifact { .. })));
}

#[test]
fn classifier_swap_touches_only_the_head() {
    let (_, val, model) = fixture();
    let d = SharedClassifier::new(model.c_img, model.hidden, model.c_cls, 1, "d");
    let net = Network3D::<f32>::new(&model, 1, true, d.clone()).unwrap();
    let same = swap_classifier(&net, d).unwrap();
    assert_eq!(net.infer(&val[0].full).unwrap().data(), same.infer(&val[0].full).unwrap().data());

    let mut wide = SharedClassifier::new(model.c_img, model.hidden, 10, 2, "d_refined");
    wide.zero_output_layer();
    let swapped = swap_classifier(&net, wide).unwrap();
    let probs = swapped.infer(&val[0].full).unwrap();
    assert_eq!(probs.shape()[1], 10);
    assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-6));
    assert_eq!(bits(&swapped)[..bits(&net).len() - 6], bits(&net)[..bits(&net).len() - 6]);

    let narrow = SharedClassifier::new(16, model.hidden, 10, 2, "d_refined");
    assert!(swap_classifier(&net, narrow).is_err());
}

#[test]
fn fskd_updates_only_student_parameters() {
    let (train, _, model) = fixture();
    let mut cfg = tiny_cfg();
    cfg.epochs_fskd = 1;
    let teacher = Network2D::<f32>::new(&model, 0);
    let (net, report) = train_fskd(&train, &teacher, &model, &cfg, &RunOptions::in_memory(prov())).unwrap();
    assert!(report.final_component("feat").is_some() && report.final_component("sem").is_some());
    for (p, q) in net.d.parameters().into_iter().zip(teacher.d.parameters()) {
        assert_eq!(p.value().data(), q.value().data(), "{} moved", p.name);
    }
    let fresh = Network3D::<f32>::new(&model, cfg.seed, true, teacher.d.clone()).unwrap();
    assert_ne!(bits(&net), bits(&fresh));
}

#[test]
fn ablation_switches_drop_loss_terms() {
    let (train, _, model) = fixture();
    let teacher = Network2D::<f32>::new(&model, 0);
    let run = RunOptions::in_memory(prov());
    let mut cfg = tiny_cfg();
    cfg.epochs_fskd = 1;
    cfg.use_feat_kd = false;
    let (_, r) = train_fskd(&train, &teacher, &model, &cfg, &run).unwrap();
    assert!(r.final_component("feat").is_none() && r.final_component("sem").is_some());
    cfg.use_feat_kd = true;
    cfg.use_sem_kd = false;
    let (_, r) = train_fskd(&train, &teacher, &model, &cfg, &run).unwrap();
    assert!(r.final_component("sem").is_none() && r.final_component("feat").is_some());
    cfg.use_feat_kd = false;
    assert!(train_fskd(&train, &teacher, &model, &cfg, &run).is_err());
}

#[test]
fn udakd_and_finetune_run_end_to_end() {
    let (train, val, model) = fixture();
    let cfg = tiny_cfg();
    let run = RunOptions::in_memory(prov());
    for sp in [true, false] {
        let mut c = cfg.clone();
        c.use_superpixels = sp;
        let (m, r) = train_udakd(&train, &model, &c, &run).unwrap();
        let l = r.final_component("infonce").unwrap();
        assert!(l.is_finite() && l > 0.0);
        let (_, score, ft) = finetune(Some(&m.h), &train, &val, 0.5, &model, &cfg, &run).unwrap();
        assert!((0.0..=1.0).contains(&score.miou));
        assert_eq!(ft.steps, 2);
    }
    let teacher = Network2D::<f32>::new(&model, 0);
    let (base, _) = train_pseudolabel_baseline(&train, &teacher, &model, &cfg, &run).unwrap();
    assert!(base.m.is_none());
    let z = zero_shot_eval(&base, &val).unwrap();
    assert_eq!(z.points, val.iter().map(|s| s.point_labels.len()).sum::<usize>() as u64);
}
