//! Reference renders stored under `tests/fixtures`. Set `HYPERINR_BLESS=1`
//! to regenerate them after an intended renderer change.

mod common;

use std::path::PathBuf;

use hyperinr::config::{SceneSection, Task};
use hyperinr::fields::io::{load_field, save_field, write_png};
use hyperinr::fields::{Field, ImageRgb};
use hyperinr::renderer::{raymarch, DirectionalLight, FnSampler, RenderSettings, ShadowMode};
use hyperinr::tasks::{dgs_density, dgs_transfer_function, reference_field, render_view, scene_camera, View};

const SIZE: usize = 48;
const TOLERANCE: f64 = 1e-3;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.raw"))
}

fn compare_or_bless(name: &str, img: ImageRgb) {
    let path = fixture(name);
    if std::env::var_os("HYPERINR_BLESS").is_some() {
        save_field(&path, &Field::Rgb(img.clone()), None).unwrap();
        write_png(&path.with_extension("png"), &img).unwrap();
        return;
    }
    let (golden, _) = load_field(&path).unwrap_or_else(|e| panic!("{e}; run with HYPERINR_BLESS=1 to create it"));
    let golden = golden.as_rgb().expect("golden is an image").clone();
    assert_eq!((golden.width(), golden.height()), (img.width(), img.height()));
    let diff = common::mean_abs_diff(golden.data(), img.data());
    assert!(diff <= TOLERANCE, "{name}: mean abs diff {diff}");
}

fn scene() -> SceneSection {
    SceneSection::default()
}

#[test]
fn tsr_volume_matches_golden() {
    let settings = RenderSettings::default();
    let field = reference_field(Task::Tsr, &[0.3], &[32, 32, 32], &settings).unwrap();
    let view = View::from_scene(Task::Tsr, &scene(), &[0.3], SIZE).unwrap();
    compare_or_bless("tsr_t030", render_view(Task::Tsr, &field, &view).unwrap());
}

#[test]
fn dgs_field_shadows_match_golden() {
    let theta = [45.0, 120.0];
    let field = reference_field(Task::Dgs, &theta, &[32, 32, 32], &RenderSettings::default()).unwrap();
    let view = View::from_scene(Task::Dgs, &scene(), &theta, SIZE).unwrap();
    compare_or_bless("dgs_p45_a120", render_view(Task::Dgs, &field, &view).unwrap());
}

#[test]
fn dgs_secondary_rays_match_golden() {
    let camera = scene_camera(&scene(), SIZE).unwrap();
    let light = DirectionalLight::from_angles(30.0, 200.0, 1.0);
    let img = raymarch(
        &FnSampler(dgs_density),
        &camera,
        &dgs_transfer_function(),
        &light,
        ShadowMode::SecondaryRays,
        &RenderSettings::default(),
    )
    .unwrap();
    compare_or_bless("dgs_rays_p30_a200", img);
}

#[test]
fn nvs_reference_matches_golden() {
    let field = reference_field(Task::Nvs, &[40.0, 75.0], &[SIZE, SIZE], &RenderSettings::default()).unwrap();
    let view = View::from_scene(Task::Nvs, &scene(), &[40.0, 75.0], SIZE).unwrap();
    compare_or_bless("nvs_p40_a75", render_view(Task::Nvs, &field, &view).unwrap());
}
