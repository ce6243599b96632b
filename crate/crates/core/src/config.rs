//! Experiment configuration (TOML).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_encoding::HashEncoderConfig;
use crate::hypernet::{ParamDim, ParamSpace};
use crate::networks::{CoordNetConfig, MlpConfig};
use crate::renderer::{RenderSettings, TransferFunction};
use crate::sampling::SamplingPlan;
use crate::training::{DistillOptions, LossKind, TeacherOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tsr,
    Nvs,
    Dgs,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Tsr => "tsr",
            Task::Nvs => "nvs",
            Task::Dgs => "dgs",
        }
    }

    /// Spatial dimensionality of the represented field.
    pub fn coord_dim(self) -> usize {
        match self {
            Task::Nvs => 2,
            Task::Tsr | Task::Dgs => 3,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Task::Nvs => 3,
            Task::Tsr | Task::Dgs => 1,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Task::Nvs => LossKind::L2,
            Task::Tsr | Task::Dgs => LossKind::L1,
        }
    }

    pub fn default_space(self) -> ParamSpace {
        let d = |name: &str, lower, upper| ParamDim {
            name: name.into(),
            lower,
            upper,
        };
        let dims = match self {
            Task::Tsr => vec![d("t", 0.0, 1.0)],
            Task::Nvs => vec![d("polar", 20.0, 80.0), d("azimuth", 0.0, 360.0)],
            Task::Dgs => vec![d("light_polar", 10.0, 80.0), d("light_azimuth", 0.0, 360.0)],
        };
        ParamSpace { dims }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Volume dims for tsr/dgs, `[width, height]` for nvs.
    pub dims: Vec<usize>,
    /// Normalized training parameters.
    pub training: SamplingPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for MlpSection {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub width: usize,
    pub encoder_blocks: usize,
    pub trunk_blocks: usize,
    pub decoder_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default = "teacher_lr")]
    pub lr: f32,
    #[serde(default = "teacher_wd")]
    pub weight_decay: f32,
    #[serde(default)]
    pub probe_every: usize,
}

fn teacher_lr() -> f32 {
    1e-5
}

fn teacher_wd() -> f32 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageMode {
    #[default]
    Memory,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    #[serde(default)]
    pub k: Option<usize>,
    pub epochs: usize,
    #[serde(default = "hyper_batch")]
    pub batch_size: usize,
    #[serde(default = "hyper_lr")]
    pub lr: f32,
    #[serde(default)]
    pub freeze_mlp: bool,
    #[serde(default)]
    pub storage: StorageMode,
    #[serde(default)]
    pub probe_every: usize,
}

fn hyper_batch() -> usize {
    4096
}

fn hyper_lr() -> f32 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Native units.
    #[serde(default)]
    pub thetas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    #[serde(default = "default_tf")]
    pub tf: String,
    #[serde(default = "default_cam_polar")]
    pub camera_polar: f64,
    #[serde(default = "default_cam_azimuth")]
    pub camera_azimuth: f64,
    #[serde(default = "default_cam_distance")]
    pub camera_distance: f64,
    #[serde(default = "default_fov")]
    pub fov: f64,
    /// Fixed light for tsr; dgs takes the light from θ.
    #[serde(default = "default_light_polar")]
    pub light_polar: f64,
    #[serde(default)]
    pub light_azimuth: f64,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub settings: RenderSettings,
}

fn default_tf() -> String {
    "default".into()
}
fn default_cam_polar() -> f64 {
    60.0
}
fn default_cam_azimuth() -> f64 {
    30.0
}
fn default_cam_distance() -> f64 {
    2.2
}
fn default_fov() -> f64 {
    40.0
}
fn default_light_polar() -> f64 {
    45.0
}
fn default_size() -> usize {
    128
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            tf: default_tf(),
            camera_polar: default_cam_polar(),
            camera_azimuth: default_cam_azimuth(),
            camera_distance: default_cam_distance(),
            fov: default_fov(),
            light_polar: default_light_polar(),
            light_azimuth: 0.0,
            size: default_size(),
            settings: RenderSettings::default(),
        }
    }
}

impl SceneSection {
    pub fn transfer_function(&self) -> Result<TransferFunction> {
        TransferFunction::preset(&self.tf).ok_or_else(|| Error::Config(format!("unknown transfer function {:?}", self.tf)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the task's standard space.
    #[serde(default)]
    pub space: Option<ParamSpace>,
    pub dataset: DatasetConfig,
    /// Normalized encoder positions.
    pub encoders: SamplingPlan,
    /// Normalized distillation parameters.
    pub distillation: SamplingPlan,
    pub encoder: HashEncoderConfig,
    #[serde(default)]
    pub mlp: MlpSection,
    pub teacher: TeacherSection,
    pub hyper: HyperSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub scene: SceneSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn space(&self) -> ParamSpace {
        self.space.clone().unwrap_or_else(|| self.task.default_space())
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            hidden_width: self.mlp.hidden_width,
            hidden_layers: self.mlp.hidden_layers,
            ..MlpConfig::synthesis(self.encoder.output_dim(), self.task.channels())
        }
    }

    pub fn teacher_config(&self) -> CoordNetConfig {
        CoordNetConfig {
            width: self.teacher.width,
            encoder_blocks: self.teacher.encoder_blocks,
            trunk_blocks: self.teacher.trunk_blocks,
            decoder_blocks: self.teacher.decoder_blocks,
            ..CoordNetConfig::full(self.task.coord_dim() + self.space().dim(), self.task.channels())
        }
    }

    pub fn teacher_options(&self) -> TeacherOptions {
        let t = &self.teacher;
        TeacherOptions {
            steps_per_epoch: t.steps_per_epoch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            probe_every: t.probe_every,
            config_hash: self.hash(),
            ..TeacherOptions::new(t.epochs, t.batch_size, self.task.loss())
        }
    }

    pub fn distill_options(&self) -> DistillOptions {
        let h = &self.hyper;
        DistillOptions {
            batch_size: h.batch_size,
            lr: h.lr,
            freeze_mlp: h.freeze_mlp,
            probe_every: h.probe_every,
            config_hash: self.hash(),
            ..DistillOptions::new(h.epochs, self.task.loss())
        }
    }

    pub fn hash(&self) -> String {
        crate::training::config_hash(&self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        let space = self.space();
        space.validate()?;
        self.encoder.validate()?;
        self.mlp_config().validate()?;
        self.teacher_config().validate()?;
        let dims = &self.dataset.dims;
        let want = self.task.coord_dim();
        if dims.len() != want || dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("{} dataset needs {want} non-zero dims, got {dims:?}", self.task.name())));
        }
        if self.encoder.dim != want {
            return Err(Error::Config(format!("encoder dim {} but {} fields are {want}-D", self.encoder.dim, self.task.name())));
        }
        if self.task == Task::Tsr && space.dim() != 1 {
            return Err(Error::Config("tsr space must have exactly one dimension".into()));
        }
        if matches!(self.task, Task::Nvs | Task::Dgs) && space.dim() != 2 {
            return Err(Error::Config(format!("{} space must be (polar, azimuth)", self.task.name())));
        }
        if self.teacher.batch_size == 0 || self.hyper.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.hyper.k == Some(0) {
            return Err(Error::Config("hyper.k must be positive".into()));
        }
        for theta in &self.eval.thetas {
            if !space.contains(theta) {
                return Err(Error::Config(format!("eval parameter {theta:?} outside the space")));
            }
        }
        self.scene.transfer_function()?;
        self.scene.settings.validate()?;
        if self.scene.size == 0 || self.scene.size > 1024 {
            return Err(Error::Config(format!("scene size {} outside 1..=1024", self.scene.size)));
        }
        Ok(())
    }
}
