mod common;

use std::fs;

use hyperinr::checkpoint::{load_coordnet, load_hyperinr};
use hyperinr::config::{StorageMode, Task};
use hyperinr::fields::io::{load_field, read_ppm};
use hyperinr::pipeline::{self, Layout};
use hyperinr::training::DistillationSet;

#[test]
fn tsr_pipeline_writes_every_artifact() {
    let cfg = common::tsr_config();
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    let rows = pipeline::run_all(&cfg, &out).unwrap();
    assert_eq!(rows.len(), cfg.eval.thetas.len());
    for r in &rows {
        assert!(r.psnr_hyper.is_finite() && r.psnr_lerp.is_finite());
        assert!(r.ssim_hyper <= 1.0 && r.ssim_lerp <= 1.0);
    }
    for p in ["teacher.hinr", "hyperinr.hinr", "metrics.tsv", "metrics.json", "teacher_log.jsonl", "distill_log.jsonl"] {
        assert!(dir.path().join(p).exists(), "{p} missing");
    }
    let log = fs::read_to_string(dir.path().join("teacher_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.teacher.epochs);

    let data = DistillationSet::open_dir(&out.data()).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.thetas(), &[vec![0.0], vec![0.5], vec![1.0]]);
    let distill = DistillationSet::open_dir(&out.distill()).unwrap();
    assert_eq!(distill.len(), 5);

    let (model, embedded) = load_hyperinr(&out.hyperinr()).unwrap();
    assert_eq!(model.atlas.len(), 4);
    assert_eq!(embedded.as_ref(), Some(&cfg));
    let (teacher, space, _) = load_coordnet(&out.teacher()).unwrap();
    assert_eq!(space, cfg.space());
    assert_eq!(teacher.config, cfg.teacher_config());

    let table = fs::read_to_string(out.metrics()).unwrap();
    assert!(table.starts_with("theta\tpsnr_hyper\tssim_hyper\tpsnr_lerp\tssim_lerp\n"));
    assert_eq!(table.lines().count(), 1 + rows.len());
}

#[test]
fn gen_data_is_reproducible() {
    let cfg = common::dgs_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::gen_data(&cfg, &Layout::new(a.path())).unwrap();
    pipeline::gen_data(&cfg, &Layout::new(b.path())).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path().join("data")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 4 + 1);
    for n in names {
        let x = fs::read(a.path().join("data").join(&n)).unwrap();
        let y = fs::read(b.path().join("data").join(&n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
}

#[test]
fn disk_and_memory_distillation_give_identical_checkpoints() {
    let mut cfg = common::nvs_config();
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    pipeline::gen_data(&cfg, &out).unwrap();
    pipeline::train_teacher_step(&cfg, &out).unwrap();
    pipeline::build_distill_step(&cfg, &out).unwrap();
    pipeline::distill_step(&cfg, &out).unwrap();
    let memory = fs::read(out.hyperinr()).unwrap();
    cfg.hyper.storage = StorageMode::Disk;
    pipeline::distill_step(&cfg, &out).unwrap();
    let disk = fs::read(out.hyperinr()).unwrap();
    // the embedded config differs only in the storage flag
    let (a, _) = load_hyperinr(&out.hyperinr()).unwrap();
    fs::write(dir.path().join("m.hinr"), &memory).unwrap();
    let (b, _) = load_hyperinr(&dir.path().join("m.hinr")).unwrap();
    assert_ne!(memory, disk);
    assert_eq!(a.mlp.params.as_slice(), b.mlp.params.as_slice());
    for (x, y) in a.atlas.encoders().iter().zip(b.atlas.encoders()) {
        assert_eq!(x.params(), y.params());
    }
}

#[test]
fn render_and_bake_commands_write_files() {
    let cfg = common::dgs_config();
    let dir = tempfile::tempdir().unwrap();
    let shadow = dir.path().join("shadow.raw");
    pipeline::bake_shadows(&cfg, 30.0, 90.0, &shadow).unwrap();
    let (field, meta) = load_field(&shadow).unwrap();
    assert_eq!(meta.theta, Some(vec![30.0, 90.0]));
    assert_eq!(field.shape().dims, vec![8, 8, 8]);
    let image = dir.path().join("view.ppm");
    pipeline::render_field_file(&cfg, &shadow, None, &image).unwrap();
    let img = read_ppm(&image).unwrap();
    assert_eq!((img.width(), img.height()), (cfg.scene.size, cfg.scene.size));

    let out = Layout::new(dir.path());
    pipeline::gen_data(&cfg, &out).unwrap();
    let lerp = dir.path().join("lerp.png");
    pipeline::render_engine(&cfg, &out, hyperinr::tasks::Engine::Lerp, &[30.0, 90.0], &lerp).unwrap();
    assert!(fs::read(&lerp).unwrap().starts_with(b"\x89PNG"));
    assert!(pipeline::render_engine(&cfg, &out, hyperinr::tasks::Engine::Lerp, &[95.0, 0.0], &lerp).is_err());
    assert_eq!(cfg.task, Task::Dgs);
}
