//! Per-task ground truth, engines and scene rendering.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{SceneSection, Task};
use crate::error::{Error, Result};
use crate::fields::metrics::{psnr, ssim};
use crate::fields::synth::{synth_nvs, synth_tsr};
use crate::fields::{Field, FieldKind, FieldShape, ImageRgb, ScalarField};
use crate::hypernet::{HyperInrModel, ParamSpace};
use crate::renderer::{
    bake_shadow_volume, raymarch, Camera, DirectionalLight, FnSampler, RenderSettings, ShadowMode, TransferFunction,
};
use crate::training::LerpBaseline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Hyperinr,
    Lerp,
    Reference,
}

impl Engine {
    pub const ALL: [Engine; 3] = [Engine::Hyperinr, Engine::Lerp, Engine::Reference];
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Fixed occluder scene for the shadow task: a floor slab, a sphere and a
/// column, all with soft edges.
pub fn dgs_density(p: [f32; 3]) -> f32 {
    let [x, y, z] = p;
    let floor = 0.8 * (1.0 - smoothstep(0.10, 0.14, z));
    let (dx, dy, dz) = (x - 0.45, y - 0.5, z - 0.45);
    let r = (dx * dx + dy * dy + dz * dz).sqrt();
    let sphere = 1.0 - smoothstep(0.17, 0.21, r);
    let (cx, cy) = (x - 0.74, y - 0.3);
    let rc = (cx * cx + cy * cy).sqrt();
    let column = 0.9 * (1.0 - smoothstep(0.05, 0.08, rc)) * (1.0 - smoothstep(0.62, 0.66, z));
    floor.max(sphere).max(column)
}

pub fn dgs_transfer_function() -> TransferFunction {
    TransferFunction::preset("dense").expect("dense preset exists")
}

/// Shape of one field of `task` at `dims`.
pub fn task_shape(task: Task, dims: &[usize]) -> FieldShape {
    FieldShape {
        kind: if task == Task::Nvs { FieldKind::Rgb } else { FieldKind::Scalar },
        dims: dims.to_vec(),
    }
}

/// Analytic ground truth at native `theta`.
pub fn reference_field(task: Task, theta: &[f64], dims: &[usize], settings: &RenderSettings) -> Result<Field> {
    let want = if task == Task::Tsr { 1 } else { 2 };
    if theta.len() != want {
        return Err(Error::shape(want, theta.len()));
    }
    match task {
        Task::Tsr => Ok(Field::Scalar(synth_tsr(theta[0], dims)?)),
        Task::Nvs => {
            if dims.len() != 2 || dims[0] != dims[1] {
                return Err(Error::shape("square image dims", format!("{dims:?}")));
            }
            Ok(Field::Rgb(synth_nvs(theta[0], theta[1], dims[0])?))
        }
        Task::Dgs => {
            let light = DirectionalLight::from_angles(theta[0], theta[1], 1.0);
            let vol = bake_shadow_volume(&FnSampler(dgs_density), &dgs_transfer_function(), &light, dims, settings.step)?;
            Ok(Field::Scalar(vol))
        }
    }
}

/// Cell-centered bilinear resampling.
pub fn resample_image(img: &ImageRgb, width: usize, height: usize) -> Result<ImageRgb> {
    if img.width() == width && img.height() == height {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(3 * width * height);
    let (w, h) = (img.width() as f32, img.height() as f32);
    for y in 0..height {
        let fy = ((y as f32 + 0.5) / height as f32 * h - 0.5).clamp(0.0, h - 1.0);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(img.height() - 1);
        for x in 0..width {
            let fx = ((x as f32 + 0.5) / width as f32 * w - 0.5).clamp(0.0, w - 1.0);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(img.width() - 1);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                data.push(top + (bottom - top) * ty);
            }
        }
    }
    ImageRgb::new(width, height, data)
}

/// Everything an engine needs to produce fields.
pub struct Engines<'a> {
    pub task: Task,
    pub space: &'a ParamSpace,
    pub model: Option<&'a HyperInrModel>,
    pub baseline: Option<&'a LerpBaseline>,
    pub settings: RenderSettings,
}

#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub field: Field,
    pub assemble_ms: f64,
}

impl Engines<'_> {
    /// Field of `engine` at native `theta` on `shape`. Lerp results are
    /// resampled when the stored resolution differs (images only).
    pub fn field(&self, engine: Engine, theta: &[f64], shape: &FieldShape) -> Result<EngineOutput> {
        if !self.space.contains(theta) {
            return Err(Error::OutOfRange {
                what: "theta",
                detail: format!("{theta:?}"),
            });
        }
        match engine {
            Engine::Hyperinr => {
                let model = self.model.ok_or_else(|| Error::Config("no HyperINR model loaded".into()))?;
                let t0 = Instant::now();
                let inst = model.assemble_inr(theta)?;
                let assemble_ms = t0.elapsed().as_secs_f64() * 1e3;
                let field = shape.field_from_values(inst.eval_batch(&shape.lattice()))?;
                Ok(EngineOutput { field, assemble_ms })
            }
            Engine::Lerp => {
                let base = self.baseline.ok_or_else(|| Error::Config("no dataset loaded for lerp".into()))?;
                let mut field = base.query(theta)?;
                if field.shape() != *shape {
                    field = match (&field, shape.kind) {
                        (Field::Rgb(img), FieldKind::Rgb) => Field::Rgb(resample_image(img, shape.dims[0], shape.dims[1])?),
                        _ => return Err(Error::shape(format!("{shape:?}"), format!("{:?}", field.shape()))),
                    };
                }
                Ok(EngineOutput { field, assemble_ms: 0.0 })
            }
            Engine::Reference => Ok(EngineOutput {
                field: reference_field(self.task, theta, &shape.dims, &self.settings)?,
                assemble_ms: 0.0,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShadowChoice {
    None,
    SecondaryRays,
    /// Coefficients from the engine's own field (shadow task only).
    #[default]
    Field,
}

/// Everything besides the field that determines an image.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub tf: TransferFunction,
    pub light: DirectionalLight,
    pub shadow: ShadowChoice,
    pub settings: RenderSettings,
}

impl View {
    /// Scene defaults; the shadow task takes its light from `theta`.
    pub fn from_scene(task: Task, scene: &SceneSection, theta: &[f64], size: usize) -> Result<Self> {
        let camera = scene_camera(scene, size)?;
        let (tf, light, shadow) = match task {
            Task::Dgs => {
                if theta.len() != 2 {
                    return Err(Error::shape(2, theta.len()));
                }
                (
                    dgs_transfer_function(),
                    DirectionalLight::from_angles(theta[0], theta[1], 1.0),
                    ShadowChoice::Field,
                )
            }
            Task::Tsr | Task::Nvs => (
                scene.transfer_function()?,
                DirectionalLight::from_angles(scene.light_polar, scene.light_azimuth, 1.0),
                ShadowChoice::None,
            ),
        };
        Ok(Self {
            camera,
            tf,
            light,
            shadow,
            settings: scene.settings,
        })
    }
}

/// Turns one engine field into the displayed image. Images are only
/// resampled to the camera size.
pub fn render_view(task: Task, field: &Field, view: &View) -> Result<ImageRgb> {
    fn mode<'a>(choice: ShadowChoice, shadow: Option<&'a ScalarField>) -> Result<ShadowMode<'a>> {
        match (choice, shadow) {
            (ShadowChoice::None, _) => Ok(ShadowMode::None),
            (ShadowChoice::SecondaryRays, _) => Ok(ShadowMode::SecondaryRays),
            (ShadowChoice::Field, Some(f)) => Ok(ShadowMode::Lookup(f)),
            (ShadowChoice::Field, None) => Err(Error::Config("field shadows only apply to the dgs task".into())),
        }
    }
    match (task, field) {
        (Task::Nvs, Field::Rgb(img)) => resample_image(img, view.camera.width, view.camera.height),
        (Task::Tsr, Field::Scalar(vol)) => raymarch(vol, &view.camera, &view.tf, &view.light, mode(view.shadow, None)?, &view.settings),
        (Task::Dgs, Field::Scalar(shadow)) => raymarch(
            &FnSampler(dgs_density),
            &view.camera,
            &view.tf,
            &view.light,
            mode(view.shadow, Some(shadow))?,
            &view.settings,
        ),
        _ => Err(Error::Config(format!("field kind does not match task {}", task.name()))),
    }
}

pub fn scene_camera(scene: &SceneSection, size: usize) -> Result<Camera> {
    Camera::orbit(
        [0.5; 3],
        scene.camera_distance,
        scene.camera_polar,
        scene.camera_azimuth,
        scene.fov,
        size,
        size,
    )
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub hyper: ImageRgb,
    pub lerp: ImageRgb,
    pub reference: ImageRgb,
    pub psnr_hyper: f64,
    pub psnr_lerp: f64,
}

/// Renders the HyperINR, LERP and reference views of `theta` with image PSNR.
pub fn render_compare(engines: &Engines<'_>, theta: &[f64], shape: &FieldShape, scene: &SceneSection) -> Result<Comparison> {
    let view = View::from_scene(engines.task, scene, theta, scene.size)?;
    let render = |e| -> Result<ImageRgb> { render_view(engines.task, &engines.field(e, theta, shape)?.field, &view) };
    let hyper = render(Engine::Hyperinr)?;
    let lerp = render(Engine::Lerp)?;
    let reference = render(Engine::Reference)?;
    let psnr_hyper = psnr(&Field::Rgb(hyper.clone()), &Field::Rgb(reference.clone()))?;
    let psnr_lerp = psnr(&Field::Rgb(lerp.clone()), &Field::Rgb(reference.clone()))?;
    Ok(Comparison {
        hyper,
        lerp,
        reference,
        psnr_hyper,
        psnr_lerp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub theta: Vec<f64>,
    pub psnr_hyper: f64,
    pub ssim_hyper: f64,
    pub psnr_lerp: f64,
    pub ssim_lerp: f64,
}

/// Field-level PSNR/SSIM of two engines against the reference.
pub fn metrics_row(engines: &Engines<'_>, theta: &[f64], shape: &FieldShape, pair: [Engine; 2]) -> Result<MetricsRow> {
    let reference = engines.field(Engine::Reference, theta, shape)?.field;
    let score = |e| -> Result<(f64, f64)> {
        let f = engines.field(e, theta, shape)?.field;
        Ok((psnr(&f, &reference)?, ssim(&f, &reference)?))
    };
    let (psnr_hyper, ssim_hyper) = score(pair[0])?;
    let (psnr_lerp, ssim_lerp) = score(pair[1])?;
    Ok(MetricsRow {
        theta: theta.to_vec(),
        psnr_hyper,
        ssim_hyper,
        psnr_lerp,
        ssim_lerp,
    })
}

/// Tab-separated table with a header line.
pub fn format_metrics_table(rows: &[MetricsRow]) -> String {
    let mut s = String::from("theta\tpsnr_hyper\tssim_hyper\tpsnr_lerp\tssim_lerp\n");
    for r in rows {
        let theta: Vec<String> = r.theta.iter().map(|v| format!("{v}")).collect();
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            theta.join(","),
            r.psnr_hyper,
            r.ssim_hyper,
            r.psnr_lerp,
            r.ssim_lerp
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Sample;

    #[test]
    fn dgs_reference_is_lit_above_and_shadowed_below() {
        let f = reference_field(Task::Dgs, &[10.0, 0.0], &[16, 16, 16], &RenderSettings::default()).unwrap();
        let vol = f.as_scalar().unwrap();
        // top corner sees the light; floor under the sphere does not
        assert!(vol.sample([0.1, 0.1, 0.95]) > 0.99);
        assert!(vol.sample([0.45, 0.5, 0.12]) < 0.1);
    }

    #[test]
    fn resample_identity_and_constant() {
        let img = ImageRgb::new(2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.0, 0.1, 0.2]).unwrap();
        assert_eq!(resample_image(&img, 2, 2).unwrap(), img);
        let c = ImageRgb::new(3, 3, vec![0.25; 27]).unwrap();
        let up = resample_image(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn identical_samplers_give_identical_comparisons() {
        let space = Task::Tsr.default_space();
        let dims = [10, 10, 10];
        let items: Vec<Sample> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&t| Sample {
                theta: vec![t],
                field: Field::Scalar(synth_tsr(t, &dims).unwrap()),
            })
            .collect();
        let base = LerpBaseline::new(space.clone(), &items).unwrap();
        let engines = Engines {
            task: Task::Tsr,
            space: &space,
            model: None,
            baseline: Some(&base),
            settings: RenderSettings::default(),
        };
        let shape = task_shape(Task::Tsr, &dims);
        // at a stored θ lerp returns the reference exactly
        let row = metrics_row(&engines, &[0.5], &shape, [Engine::Lerp, Engine::Lerp]).unwrap();
        assert_eq!(row.psnr_lerp, f64::INFINITY);
        assert!((row.ssim_lerp - 1.0).abs() < 1e-12);
        let scene = SceneSection {
            size: 16,
            ..SceneSection::default()
        };
        let view = View::from_scene(Task::Tsr, &scene, &[0.5], 16).unwrap();
        let a = render_view(Task::Tsr, &engines.field(Engine::Lerp, &[0.5], &shape).unwrap().field, &view).unwrap();
        let b = render_view(Task::Tsr, &engines.field(Engine::Reference, &[0.5], &shape).unwrap().field, &view).unwrap();
        assert_eq!(a, b);
        assert!(engines.field(Engine::Hyperinr, &[0.5], &shape).is_err());
        assert!(engines.field(Engine::Lerp, &[1.5], &shape).is_err());
    }
}
