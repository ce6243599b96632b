//! End-to-end steps driven by the CLI. Every step reads and writes inside one
//! output directory:
//!
//! ```text
//! data/            training fields + manifest
//! teacher.hinr     teacher_report.json  teacher_log.jsonl
//! distill/         teacher fields at the distillation parameters
//! hyperinr.hinr    distill_report.json  distill_log.jsonl
//! metrics.tsv      metrics.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_coordnet, load_hyperinr, save_coordnet, save_hyperinr};
use crate::config::{ExperimentConfig, StorageMode};
use crate::error::{Error, Result};
use crate::fields::io::{load_field, save_field, write_image, write_json};
use crate::fields::FieldShape;
use crate::hash_encoding::HashEncoder;
use crate::hypernet::{EncoderAtlas, HyperInrModel};
use crate::networks::{init_hash_encoder, init_siren, CoordNet, SynthesisMlp};
use crate::numerics::Rng;
use crate::renderer::DirectionalLight;
use crate::sampling::compose_plan;
use crate::tasks::{
    format_metrics_table, metrics_row, reference_field, render_view, task_shape, Engine, Engines, View,
    MetricsRow,
};
use crate::training::{
    build_distillation_set, distill_hyperinr, train_teacher, DistillationSet, LerpBaseline, Sample, TrainReport,
    TrainingSet,
};

/// RNG streams forked from the experiment seed.
mod stream {
    pub const TEACHER_INIT: u64 = 11;
    pub const TEACHER_TRAIN: u64 = 12;
    pub const ENCODER_INIT: u64 = 21;
    pub const MLP_INIT: u64 = 22;
    pub const DISTILL: u64 = 23;
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.hinr")
    }
    pub fn distill(&self) -> PathBuf {
        self.root.join("distill")
    }
    pub fn hyperinr(&self) -> PathBuf {
        self.root.join("hyperinr.hinr")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.tsv")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn field_shape(cfg: &ExperimentConfig) -> FieldShape {
    task_shape(cfg.task, &cfg.dataset.dims)
}

fn training_positions(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    compose_plan(&cfg.dataset.training, cfg.space().dim(), &[])
}

/// Training parameters in native units.
pub fn training_params(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let space = cfg.space();
    Ok(training_positions(cfg)?.iter().map(|t| space.denormalize(t)).collect())
}

pub fn distillation_params(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let space = cfg.space();
    let pts = compose_plan(&cfg.distillation, space.dim(), &training_positions(cfg)?)?;
    Ok(pts.iter().map(|t| space.denormalize(t)).collect())
}

/// Normalized encoder positions.
pub fn encoder_positions(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    compose_plan(&cfg.encoders, cfg.space().dim(), &training_positions(cfg)?)
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Layout) -> Result<DistillationSet> {
    ensure_dir(&out.root)?;
    let params = training_params(cfg)?;
    let fields = params
        .iter()
        .map(|t| reference_field(cfg.task, t, &cfg.dataset.dims, &cfg.scene.settings))
        .collect::<Result<Vec<_>>>()?;
    DistillationSet::in_memory(params, fields)?.write_to_dir(&out.data())
}

pub fn load_training_set(dir: &Path) -> Result<TrainingSet> {
    let set = DistillationSet::open_dir(dir)?;
    let items = (0..set.len())
        .map(|i| {
            Ok(Sample {
                theta: set.thetas()[i].clone(),
                field: set.field(i)?.into_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(items)
}

pub fn train_teacher_step(cfg: &ExperimentConfig, out: &Layout) -> Result<TrainReport> {
    let data = load_training_set(&out.data())?;
    let space = cfg.space();
    let base = Rng::new(cfg.seed);
    let mut net = CoordNet::zeros(cfg.teacher_config())?;
    init_siren(&mut net, &mut base.fork(stream::TEACHER_INIT));
    let mut opts = cfg.teacher_options();
    opts.log_path = Some(out.root.join("teacher_log.jsonl"));
    let report = train_teacher(&mut net, &data, &space, &opts, &mut base.fork(stream::TEACHER_TRAIN))?;
    save_coordnet(&out.teacher(), &net, &space, Some(cfg))?;
    write_json(&out.root.join("teacher_report.json"), &report)?;
    Ok(report)
}

pub fn build_distill_step(cfg: &ExperimentConfig, out: &Layout) -> Result<DistillationSet> {
    let (teacher, space, _) = load_coordnet(&out.teacher())?;
    let params = distillation_params(cfg)?;
    build_distillation_set(&teacher, &space, &params, &field_shape(cfg))?.write_to_dir(&out.distill())
}

/// Freshly initialized model per the configuration.
pub fn init_model(cfg: &ExperimentConfig) -> Result<HyperInrModel> {
    let base = Rng::new(cfg.seed);
    let positions = encoder_positions(cfg)?;
    let mut rng = base.fork(stream::ENCODER_INIT);
    let encoders = positions
        .iter()
        .map(|_| {
            let mut e = HashEncoder::zeros(cfg.encoder)?;
            init_hash_encoder(&mut e, &mut rng);
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let atlas = EncoderAtlas::new(cfg.space(), positions, encoders)?;
    let mut mlp = SynthesisMlp::zeros(cfg.mlp_config())?;
    mlp.init_he(&mut base.fork(stream::MLP_INIT));
    HyperInrModel::new(atlas, mlp, cfg.hyper.k)
}

pub fn distill_step(cfg: &ExperimentConfig, out: &Layout) -> Result<TrainReport> {
    let mut dset = DistillationSet::open_dir(&out.distill())?;
    if cfg.hyper.storage == StorageMode::Memory {
        dset = dset.load_all()?;
    }
    let mut model = init_model(cfg)?;
    let mut opts = cfg.distill_options();
    opts.log_path = Some(out.root.join("distill_log.jsonl"));
    let report = distill_hyperinr(&mut model, &dset, &opts, &mut Rng::new(cfg.seed).fork(stream::DISTILL))?;
    save_hyperinr(&out.hyperinr(), &model, Some(cfg))?;
    write_json(&out.root.join("distill_report.json"), &report)?;
    Ok(report)
}

/// Field metrics of HyperINR and LERP against ground truth; writes
/// `metrics.tsv` and `metrics.json`.
pub fn eval_step(cfg: &ExperimentConfig, out: &Layout, thetas: &[Vec<f64>]) -> Result<Vec<MetricsRow>> {
    let (model, _) = load_hyperinr(&out.hyperinr())?;
    let space = cfg.space();
    let data = load_training_set(&out.data())?;
    let baseline = LerpBaseline::new(space.clone(), &data.items)?;
    let engines = Engines {
        task: cfg.task,
        space: &space,
        model: Some(&model),
        baseline: Some(&baseline),
        settings: cfg.scene.settings,
    };
    let shape = field_shape(cfg);
    let rows = thetas
        .iter()
        .map(|t| metrics_row(&engines, t, &shape, [Engine::Hyperinr, Engine::Lerp]))
        .collect::<Result<Vec<_>>>()?;
    fs::write(out.metrics(), format_metrics_table(&rows)).map_err(|e| Error::io(out.metrics(), e))?;
    write_json(&out.root.join("metrics.json"), &rows)?;
    Ok(rows)
}

/// Renders a stored field file to an image. `theta` is required for the
/// shadow task (the light direction).
pub fn render_field_file(cfg: &ExperimentConfig, field: &Path, theta: Option<&[f64]>, image: &Path) -> Result<()> {
    let (f, meta) = load_field(field)?;
    let theta = theta.map(<[f64]>::to_vec).or(meta.theta).unwrap_or_default();
    let view = View::from_scene(cfg.task, &cfg.scene, &theta, cfg.scene.size)?;
    let img = render_view(cfg.task, &f, &view)?;
    write_image(image, &img)
}

/// Renders one engine at native `theta`.
pub fn render_engine(cfg: &ExperimentConfig, out: &Layout, engine: Engine, theta: &[f64], image: &Path) -> Result<()> {
    let space = cfg.space();
    let model = match engine {
        Engine::Hyperinr => Some(load_hyperinr(&out.hyperinr())?.0),
        _ => None,
    };
    let baseline = match engine {
        Engine::Lerp => Some(LerpBaseline::new(space.clone(), &load_training_set(&out.data())?.items)?),
        _ => None,
    };
    let engines = Engines {
        task: cfg.task,
        space: &space,
        model: model.as_ref(),
        baseline: baseline.as_ref(),
        settings: cfg.scene.settings,
    };
    let field = engines.field(engine, theta, &field_shape(cfg))?.field;
    let view = View::from_scene(cfg.task, &cfg.scene, theta, cfg.scene.size)?;
    write_image(image, &render_view(cfg.task, &field, &view)?)
}

/// Bakes the shadow volume of the fixed occluder scene for one light.
pub fn bake_shadows(cfg: &ExperimentConfig, light_polar: f64, light_azimuth: f64, path: &Path) -> Result<()> {
    let light = DirectionalLight::from_angles(light_polar, light_azimuth, 1.0);
    light.validate()?;
    let theta = [light_polar, light_azimuth];
    let field = reference_field(crate::config::Task::Dgs, &theta, &cfg.dataset.dims, &cfg.scene.settings)?;
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    save_field(path, &field, Some(&theta))
}

/// gen-data → train-teacher → build-distill → distill → eval.
pub fn run_all(cfg: &ExperimentConfig, out: &Layout) -> Result<Vec<MetricsRow>> {
    gen_data(cfg, out)?;
    train_teacher_step(cfg, out)?;
    build_distill_step(cfg, out)?;
    distill_step(cfg, out)?;
    eval_step(cfg, out, &cfg.eval.thetas)
}
