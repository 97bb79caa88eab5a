mod common;

use feds_core::codec_networks::{ImageBuffer, NetworkConfig, Role};
use feds_core::feds_distillation::{stage_plan, Stage};
use feds_core::training_pipeline::{Checkpoint, DatasetSpec, PatchStream, TrainConfig, Trainer};
use feds_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_config(role: Role, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::preset(role);
    c.network = NetworkConfig::toy(role);
    c.data.crop_size = 64;
    c.optimizer.batch_size = 2;
    c.optimizer.base_lr = 1e-3;
    c.seed = seed;
    c.scale = 0.001;
    c
}

fn stream(images: &[ImageBuffer]) -> PatchStream {
    let mut spec = DatasetSpec::new(vec![]);
    spec.crop_size = 64;
    PatchStream::from_images(spec, images.to_vec(), ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn images() -> Vec<ImageBuffer> {
    common::corpus(6, 80, 72, 5)
}

fn finished_teacher(imgs: &[ImageBuffer]) -> Checkpoint<f32> {
    let mut c = toy_config(Role::Teacher, 1);
    c.scale = 1e-5;
    Trainer::<f32>::teacher_stage(c, stream(imgs)).unwrap().run().unwrap()
}

#[test]
fn stage_order_is_enforced() {
    let imgs = images();
    let mut t = Trainer::<f32>::teacher_stage(toy_config(Role::Teacher, 0), stream(&imgs)).unwrap();
    t.run_for(1).unwrap();
    let partial = t.checkpoint();
    assert!(!partial.completed);
    let student = toy_config(Role::Student, 0);
    assert!(matches!(
        Trainer::distill_stage(student.clone(), &partial, stream(&imgs)),
        Err(Error::StageOrder(_))
    ));
    let teacher = finished_teacher(&imgs);
    assert!(matches!(
        Trainer::finetune_stage(student.clone(), &teacher, stream(&imgs)),
        Err(Error::StageOrder(_))
    ));
    assert!(Trainer::<f32>::teacher_stage(student, stream(&imgs)).is_err());
}

#[test]
fn scaled_teacher_stage_length() {
    assert_eq!(stage_plan(Stage::Teacher).scaled(0.001).unwrap().total_iterations, 180);
    let t = Trainer::<f32>::teacher_stage(toy_config(Role::Teacher, 0), stream(&images())).unwrap();
    assert_eq!(t.plan().total_iterations, 180);
}

#[test]
fn runs_are_deterministic() {
    let imgs = images();
    let run = || {
        let mut t = Trainer::<f64>::teacher_stage(toy_config(Role::Teacher, 9), stream(&imgs)).unwrap();
        t.run_for(4).unwrap();
        t.history().iter().map(|b| b.total).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let imgs = images();
    let teacher = finished_teacher(&imgs);
    let cfg = toy_config(Role::Student, 4);

    let mut straight = Trainer::<f32>::distill_stage(cfg.clone(), &teacher, stream(&imgs)).unwrap();
    straight.run_for(6).unwrap();

    let mut first = Trainer::<f32>::distill_stage(cfg, &teacher, stream(&imgs)).unwrap();
    first.run_for(3).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    assert!(matches!(Trainer::resume(&ck, None, stream(&imgs)), Err(Error::StageOrder(_))));
    let mut resumed = Trainer::resume(&ck, Some(&teacher), stream(&imgs)).unwrap();
    resumed.run_for(3).unwrap();

    let tail: Vec<f64> = straight.history()[3..].iter().map(|b| b.total).collect();
    let got: Vec<f64> = resumed.history().iter().map(|b| b.total).collect();
    assert_eq!(tail, got);
    assert_eq!(straight.model().params.checksum(), resumed.model().params.checksum());
}

#[test]
fn saved_model_forward_is_identical() {
    let imgs = images();
    let mut t = Trainer::<f32>::teacher_stage(toy_config(Role::Teacher, 2), stream(&imgs)).unwrap();
    t.run_for(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.checkpoint().save(&path).unwrap();
    let model = Checkpoint::<f32>::load(&path).unwrap().model(None).unwrap();
    let x = feds_core::codec_networks::pad_image(&imgs[0]);
    assert_eq!(
        model.evaluate(&x).unwrap().x_hat.value(),
        t.model().evaluate(&x).unwrap().x_hat.value()
    );
    let student = NetworkConfig::toy(Role::Student);
    assert!(matches!(
        Checkpoint::<f32>::load(&path).unwrap().model(Some(&student)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn zero_distillation_weights_reproduce_direct_training() {
    let imgs = images();
    let teacher = finished_teacher(&imgs);
    let mut cfg = toy_config(Role::Student, 7);
    cfg.feds.alpha = 0.0;
    cfg.feds.beta = 0.0;
    cfg.feds.gamma = 0.0;
    let mut kd = Trainer::<f32>::distill_stage(cfg.clone(), &teacher, stream(&imgs)).unwrap();
    let mut direct = Trainer::<f32>::direct_stage(cfg, stream(&imgs)).unwrap();
    kd.run_for(3).unwrap();
    direct.run_for(3).unwrap();
    for (a, b) in kd.history().iter().zip(direct.history()) {
        assert_eq!((a.d, a.r_y, a.r_z, a.total), (b.d, b.r_y, b.r_z, b.total));
        assert!(a.l_out > 0.0 && a.l_feat > 0.0);
    }
    assert_eq!(kd.model().params.checksum(), direct.model().params.checksum());
    // The teacher was never written.
    assert_eq!(
        teacher.model(None).unwrap().params.checksum(),
        Checkpoint::<f32>::from_bytes(&teacher.to_bytes()).unwrap().model(None).unwrap().params.checksum()
    );
}

#[test]
fn diverging_run_aborts_with_breakdown() {
    let imgs = images();
    let mut cfg = toy_config(Role::Student, 0);
    cfg.optimizer.base_lr = 1e30;
    let mut t = Trainer::<f32>::direct_stage(cfg, stream(&imgs)).unwrap();
    let err = t.run_for(20).unwrap_err();
    match err {
        Error::NonFiniteLoss { breakdown, .. } => assert!(breakdown.contains("total")),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn toy_loss_decreases() {
    let imgs = common::corpus(20, 64, 64, 8);
    let mut drops: Vec<f64> = (0..5)
        .map(|seed| {
            let mut cfg = toy_config(Role::Student, seed);
            cfg.optimizer.batch_size = 4;
            let mut t = Trainer::<f32>::direct_stage(cfg, stream(&imgs)).unwrap();
            t.run_for(100).unwrap();
            let h = t.history();
            let mean = |s: &[feds_core::feds_distillation::LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
            mean(&h[..10]) - mean(&h[90..])
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median drop {drops:?}");
}
