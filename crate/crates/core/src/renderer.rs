//! Single-scattering CPU volume ray marcher over the unit cube.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ImageRgb, ScalarField};
use crate::hypernet::InrInstance;

pub type Vec3 = [f64; 3];

pub const STEP_REF: f64 = 1.0 / 256.0;
pub const EARLY_EXIT: f64 = 1e-3;
const CHUNK: usize = 64;

pub mod vec3 {
    use super::Vec3;

    pub fn add(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn scale(a: Vec3, s: f64) -> Vec3 {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    }

    pub fn norm2(a: Vec3) -> f64 {
        dot(a, a)
    }

    pub fn normalize(a: Vec3) -> Vec3 {
        scale(a, 1.0 / norm2(a).sqrt())
    }

    /// Unit vector from polar (from +z) and azimuth (from +x) in degrees.
    pub fn from_angles(polar_deg: f64, azimuth_deg: f64) -> Vec3 {
        let (p, a) = (polar_deg.to_radians(), azimuth_deg.to_radians());
        [p.sin() * a.cos(), p.sin() * a.sin(), p.cos()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(eye: Vec3, look_at: Vec3, up: Vec3, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            eye,
            look_at,
            up,
            fov_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around `target`, `+z` up.
    pub fn orbit(
        target: Vec3,
        distance: f64,
        polar_deg: f64,
        azimuth_deg: f64,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = vec3::add(target, vec3::scale(vec3::from_angles(polar_deg, azimuth_deg), distance));
        Self::new(eye, target, [0.0, 0.0, 1.0], fov_deg, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if vec3::norm2(vec3::sub(self.eye, self.look_at)) == 0.0 {
            return Err(Error::Config("camera eye equals look-at".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov {} outside (0, 180)", self.fov_deg)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty image".into()));
        }
        if vec3::norm2(self.up) == 0.0 {
            return Err(Error::Config("zero up vector".into()));
        }
        Ok(())
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = vec3::normalize(vec3::sub(self.look_at, self.eye));
        let mut right = vec3::cross(forward, self.up);
        if vec3::norm2(right) < 1e-12 {
            right = vec3::cross(forward, [0.0, 1.0, 0.0]);
        }
        let right = vec3::normalize(right);
        let up = vec3::cross(right, forward);
        (forward, right, up)
    }

    /// Origin and unit direction through the center of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> (Vec3, Vec3) {
        let (f, r, u) = self.basis();
        let h = (self.fov_deg.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * (x as f64 + 0.5) / self.width as f64 - 1.0) * h * aspect;
        let sy = (1.0 - 2.0 * (y as f64 + 0.5) / self.height as f64) * h;
        let d = vec3::add(f, vec3::add(vec3::scale(r, sx), vec3::scale(u, sy)));
        (self.eye, vec3::normalize(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfPoint {
    pub scalar: f32,
    pub rgba: [f32; 4],
}

/// Piecewise-linear scalar to RGBA map. Alpha is per reference step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TfPoint>", into = "Vec<TfPoint>")]
pub struct TransferFunction {
    points: Vec<TfPoint>,
}

impl TryFrom<Vec<TfPoint>> for TransferFunction {
    type Error = Error;

    fn try_from(points: Vec<TfPoint>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TransferFunction> for Vec<TfPoint> {
    fn from(tf: TransferFunction) -> Self {
        tf.points
    }
}

impl TransferFunction {
    pub fn new(points: Vec<TfPoint>) -> Result<Self> {
        let bad = |why: String| Err(Error::Config(format!("transfer function: {why}")));
        if points.len() < 2 {
            return bad("needs at least two control points".into());
        }
        if points[0].scalar != 0.0 || points[points.len() - 1].scalar != 1.0 {
            return bad("control points must span exactly [0, 1]".into());
        }
        if points.windows(2).any(|w| w[1].scalar <= w[0].scalar) {
            return bad("scalars must be strictly increasing".into());
        }
        if points.iter().any(|p| p.rgba.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return bad("colors and alpha must lie in [0, 1]".into());
        }
        Ok(Self { points })
    }

    pub fn constant(rgba: [f32; 4]) -> Self {
        Self {
            points: vec![TfPoint { scalar: 0.0, rgba }, TfPoint { scalar: 1.0, rgba }],
        }
    }

    pub fn points(&self) -> &[TfPoint] {
        &self.points
    }

    pub fn classify(&self, s: f32) -> [f32; 4] {
        let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) };
        let i = self.points.partition_point(|p| p.scalar <= s).clamp(1, self.points.len() - 1);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let t = ((s - a.scalar) / (b.scalar - a.scalar)).clamp(0.0, 1.0);
        let mut out = [0.0; 4];
        for c in 0..4 {
            out[c] = a.rgba[c] + (b.rgba[c] - a.rgba[c]) * t;
        }
        out
    }

    /// Named presets: `default`, `warm`, `dense`.
    pub fn preset(name: &str) -> Option<Self> {
        let p = |scalar, rgba| TfPoint { scalar, rgba };
        let points = match name {
            "default" => vec![
                p(0.0, [0.0, 0.0, 0.0, 0.0]),
                p(0.15, [0.1, 0.2, 0.8, 0.0]),
                p(0.5, [0.2, 0.8, 0.6, 0.02]),
                p(1.0, [1.0, 0.9, 0.4, 0.08]),
            ],
            "warm" => vec![
                p(0.0, [0.0, 0.0, 0.0, 0.0]),
                p(0.2, [0.6, 0.1, 0.05, 0.0]),
                p(1.0, [1.0, 0.8, 0.3, 0.1]),
            ],
            "dense" => vec![
                p(0.0, [0.0, 0.0, 0.0, 0.0]),
                p(0.3, [0.8, 0.8, 0.8, 0.0]),
                p(0.6, [0.9, 0.9, 0.9, 0.25]),
                p(1.0, [1.0, 1.0, 1.0, 0.5]),
            ],
            _ => return None,
        };
        Some(Self { points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionalLight {
    /// Unit vector pointing toward the light.
    pub direction: Vec3,
    pub intensity: f64,
}

impl DirectionalLight {
    pub fn from_angles(polar_deg: f64, azimuth_deg: f64, intensity: f64) -> Self {
        Self {
            direction: vec3::from_angles(polar_deg, azimuth_deg),
            intensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (vec3::norm2(self.direction) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("light direction must be a unit vector".into()));
        }
        Ok(())
    }
}

/// Scalar function on the unit cube, evaluated in batches.
pub trait VolumeSampler: Sync {
    /// `points` is `n × 3`; writes `n` values.
    fn sample_batch(&self, points: &[f32], out: &mut [f32]);
}

impl VolumeSampler for ScalarField {
    fn sample_batch(&self, points: &[f32], out: &mut [f32]) {
        for (p, o) in points.chunks_exact(3).zip(out.iter_mut()) {
            *o = self.sample([p[0], p[1], p[2]]);
        }
    }
}

/// Uses output channel 0.
impl VolumeSampler for InrInstance {
    fn sample_batch(&self, points: &[f32], out: &mut [f32]) {
        let values = self.eval_batch(points);
        let c = self.output_dim();
        for (o, v) in out.iter_mut().zip(values.chunks_exact(c)) {
            *o = v[0];
        }
    }
}

pub struct FnSampler<F>(pub F);

impl<F: Fn([f32; 3]) -> f32 + Sync> VolumeSampler for FnSampler<F> {
    fn sample_batch(&self, points: &[f32], out: &mut [f32]) {
        for (p, o) in points.chunks_exact(3).zip(out.iter_mut()) {
            *o = (self.0)([p[0], p[1], p[2]]);
        }
    }
}

/// Where the per-sample shadow coefficient comes from.
#[derive(Clone, Copy)]
pub enum ShadowMode<'a> {
    None,
    SecondaryRays,
    /// Precomputed coefficients, from a shadow INR or a baked volume.
    Lookup(&'a dyn VolumeSampler),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub step: f64,
    pub ambient: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            step: STEP_REF,
            ambient: 0.25,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 0.1) {
            return Err(Error::Config(format!("step {} outside (0, 0.1]", self.step)));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        Ok(())
    }
}

/// Parametric interval of the ray inside `[0,1]³`.
pub fn intersect_unit_cube(o: Vec3, d: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < 0.0 || o[a] > 1.0 {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((0.0 - o[a]) / d[a], (1.0 - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Opacity of a segment of length `seg` given alpha per reference step.
pub fn corrected_alpha(alpha: f32, seg: f64) -> f64 {
    1.0 - (1.0 - alpha.clamp(0.0, 1.0) as f64).powf(seg / STEP_REF)
}

/// Segments of equal length covering `[t0, t1]` with midpoint samples.
fn segments(t0: f64, t1: f64, step: f64) -> (usize, f64) {
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    (n, (t1 - t0) / n as f64)
}

/// Transmittance from `p` toward the light until the domain boundary.
pub fn light_transmittance(sampler: &dyn VolumeSampler, tf: &TransferFunction, p: Vec3, dir: Vec3, step: f64) -> f64 {
    let Some((_, t1)) = intersect_unit_cube(p, dir) else {
        return 1.0;
    };
    let (n, seg) = segments(0.0, t1, step);
    let mut trans = 1.0;
    let mut pts = Vec::with_capacity(3 * CHUNK);
    let mut vals = vec![0.0f32; CHUNK];
    let mut i = 0;
    while i < n {
        let m = CHUNK.min(n - i);
        pts.clear();
        for s in i..i + m {
            let q = vec3::add(p, vec3::scale(dir, (s as f64 + 0.5) * seg));
            pts.extend(q.iter().map(|&c| c as f32));
        }
        sampler.sample_batch(&pts, &mut vals[..m]);
        for &v in &vals[..m] {
            trans *= 1.0 - corrected_alpha(tf.classify(v)[3], seg);
        }
        i += m;
    }
    trans
}

/// Front-to-back compositing along one ray: `(rgb, transmittance)`.
pub fn march_ray(
    sampler: &dyn VolumeSampler,
    tf: &TransferFunction,
    light: &DirectionalLight,
    mode: ShadowMode<'_>,
    settings: &RenderSettings,
    origin: Vec3,
    dir: Vec3,
) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    let Some((t0, t1)) = intersect_unit_cube(origin, dir) else {
        return (color, trans);
    };
    let (n, seg) = segments(t0, t1, settings.step);
    let mut pts = Vec::with_capacity(3 * CHUNK);
    let mut vals = vec![0.0f32; CHUNK];
    let mut shadow = vec![1.0f32; CHUNK];
    let mut i = 0;
    while i < n {
        let m = CHUNK.min(n - i);
        pts.clear();
        for s in i..i + m {
            let q = vec3::add(origin, vec3::scale(dir, t0 + (s as f64 + 0.5) * seg));
            pts.extend(q.iter().map(|&c| c as f32));
        }
        sampler.sample_batch(&pts, &mut vals[..m]);
        if let ShadowMode::Lookup(s) = mode {
            s.sample_batch(&pts, &mut shadow[..m]);
        }
        for j in 0..m {
            let rgba = tf.classify(vals[j]);
            let a = corrected_alpha(rgba[3], seg);
            if a <= 0.0 {
                continue;
            }
            let s = match mode {
                ShadowMode::None => 1.0,
                ShadowMode::SecondaryRays => {
                    let q = [pts[3 * j] as f64, pts[3 * j + 1] as f64, pts[3 * j + 2] as f64];
                    light_transmittance(sampler, tf, q, light.direction, settings.step)
                }
                ShadowMode::Lookup(_) => shadow[j].clamp(0.0, 1.0) as f64,
            };
            let shade = settings.ambient + (1.0 - settings.ambient) * light.intensity * s;
            for c in 0..3 {
                color[c] += trans * a * rgba[c] as f64 * shade;
            }
            trans *= 1.0 - a;
            if trans < EARLY_EXIT {
                return (color, trans);
            }
        }
        i += m;
    }
    (color, trans)
}

pub fn raymarch(
    sampler: &dyn VolumeSampler,
    camera: &Camera,
    tf: &TransferFunction,
    light: &DirectionalLight,
    mode: ShadowMode<'_>,
    settings: &RenderSettings,
) -> Result<ImageRgb> {
    camera.validate()?;
    light.validate()?;
    settings.validate()?;
    let w = camera.width;
    let mut data = vec![0.0f32; 3 * w * camera.height];
    data.par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let (o, d) = camera.ray(x, y);
            let (rgb, _) = march_ray(sampler, tf, light, mode, settings, o, d);
            for c in 0..3 {
                row[3 * x + c] = rgb[c] as f32;
            }
        }
    });
    ImageRgb::new(w, camera.height, data)
}

/// Transmittance toward the light at every voxel center.
pub fn bake_shadow_volume(
    sampler: &dyn VolumeSampler,
    tf: &TransferFunction,
    light: &DirectionalLight,
    dims: &[usize],
    step: f64,
) -> Result<ScalarField> {
    light.validate()?;
    if dims.len() != 3 {
        return Err(Error::shape("3 dims", dims.len()));
    }
    let plane = dims[0] * dims[1];
    let mut data = vec![0.0f32; plane * dims[2]];
    data.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [
                    (i as f64 + 0.5) / dims[0] as f64,
                    (j as f64 + 0.5) / dims[1] as f64,
                    (k as f64 + 0.5) / dims[2] as f64,
                ];
                slab[j * dims[0] + i] = light_transmittance(sampler, tf, p, light.direction, step) as f32;
            }
        }
    });
    ScalarField::new(dims.to_vec(), data)
}
