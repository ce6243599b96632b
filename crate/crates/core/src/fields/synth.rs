//! Analytic datasets: ground truth is available at any parameter.

use std::f64::consts::{PI, TAU};

use super::{ImageRgb, ScalarField};
use crate::error::{Error, Result};
use crate::renderer::{vec3, Camera, Vec3};

pub const TSR_ORBIT_RADIUS: f64 = 0.3;
pub const TSR_SIGMA: f64 = 0.15;
pub const TSR_AMPLITUDES: [f64; 2] = [1.0, 0.6];
pub const TSR_MAX_DIM: usize = 64;

/// Unnormalized two-blob density at time `t` (period 1).
pub fn tsr_density(t: f64, p: Vec3) -> f64 {
    let phase = TAU * t.rem_euclid(1.0);
    let mut v = 0.0;
    for (b, amp) in TSR_AMPLITUDES.iter().enumerate() {
        let a = phase + PI * b as f64;
        let c = [0.5 + TSR_ORBIT_RADIUS * a.cos(), 0.5 + TSR_ORBIT_RADIUS * a.sin(), 0.5];
        let d2 = vec3::norm2(vec3::sub(p, c));
        v += amp * (-d2 / (2.0 * TSR_SIGMA * TSR_SIGMA)).exp();
    }
    v
}

/// Two Gaussian blobs orbiting the domain center, normalized to max 1.
pub fn synth_tsr(t: f64, dims: &[usize]) -> Result<ScalarField> {
    if !(2..=3).contains(&dims.len()) || dims.iter().any(|&d| d == 0 || d > TSR_MAX_DIM) {
        return Err(Error::OutOfRange {
            what: "tsr dims",
            detail: format!("{dims:?} (each axis 1..={TSR_MAX_DIM})"),
        });
    }
    let raw = ScalarField::from_fn(dims.to_vec(), |_| 0.0)?;
    let nz = raw.depth();
    let mut data = Vec::with_capacity(raw.len());
    for k in 0..nz {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let z = if dims.len() == 3 { (k as f64 + 0.5) / nz as f64 } else { 0.5 };
                let p = [(i as f64 + 0.5) / dims[0] as f64, (j as f64 + 0.5) / dims[1] as f64, z];
                data.push(tsr_density(t, p));
            }
        }
    }
    let max = data.iter().cloned().fold(f64::MIN, f64::max);
    ScalarField::new(dims.to_vec(), data.iter().map(|v| (v / max) as f32).collect())
}

pub const NVS_SPHERE_CENTER: Vec3 = [0.0, 0.0, 0.0];
pub const NVS_SPHERE_RADIUS: f64 = 0.7;
pub const NVS_FLOOR_Z: f64 = -0.7;
pub const NVS_FLOOR_RADIUS: f64 = 2.5;
pub const NVS_CAMERA_DISTANCE: f64 = 3.5;
pub const NVS_FOV_DEG: f64 = 40.0;
pub const NVS_LIGHT_POLAR_DEG: f64 = 50.0;
pub const NVS_LIGHT_AZIMUTH_DEG: f64 = 0.0;
const NVS_AMBIENT: f64 = 0.15;
const SPHERE_ALBEDO: Vec3 = [0.85, 0.35, 0.2];
const FLOOR_ALBEDO: Vec3 = [0.35, 0.55, 0.8];

fn hit_sphere(o: Vec3, d: Vec3) -> Option<f64> {
    let oc = vec3::sub(o, NVS_SPHERE_CENTER);
    let b = vec3::dot(oc, d);
    let c = vec3::norm2(oc) - NVS_SPHERE_RADIUS * NVS_SPHERE_RADIUS;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 1e-9).then_some(t)
}

fn hit_floor(o: Vec3, d: Vec3) -> Option<f64> {
    if d[2].abs() < 1e-12 {
        return None;
    }
    let t = (NVS_FLOOR_Z - o[2]) / d[2];
    if t <= 1e-9 {
        return None;
    }
    let p = vec3::add(o, vec3::scale(d, t));
    (p[0] * p[0] + p[1] * p[1] <= NVS_FLOOR_RADIUS * NVS_FLOOR_RADIUS).then_some(t)
}

fn shade_nvs(o: Vec3, d: Vec3, light: Vec3) -> Vec3 {
    let sphere = hit_sphere(o, d);
    let floor = hit_floor(o, d);
    let (t, normal, albedo, on_floor) = match (sphere, floor) {
        (Some(ts), Some(tf)) if tf < ts => (tf, [0.0, 0.0, 1.0], FLOOR_ALBEDO, true),
        (Some(ts), _) => {
            let p = vec3::add(o, vec3::scale(d, ts));
            (ts, vec3::normalize(vec3::sub(p, NVS_SPHERE_CENTER)), SPHERE_ALBEDO, false)
        }
        (None, Some(tf)) => (tf, [0.0, 0.0, 1.0], FLOOR_ALBEDO, true),
        (None, None) => return [0.0; 3],
    };
    let p = vec3::add(o, vec3::scale(d, t));
    let lit = vec3::dot(normal, light).max(0.0);
    let visible = if on_floor && hit_sphere(p, light).is_some() { 0.0 } else { 1.0 };
    vec3::scale(albedo, NVS_AMBIENT + (1.0 - NVS_AMBIENT) * lit * visible)
}

/// Lambertian sphere on a floor disk, seen from `(polar, azimuth)` in degrees.
pub fn synth_nvs(polar_deg: f64, azimuth_deg: f64, size: usize) -> Result<ImageRgb> {
    if !(0.0..=180.0).contains(&polar_deg) || !azimuth_deg.is_finite() {
        return Err(Error::OutOfRange {
            what: "view angles",
            detail: format!("polar {polar_deg}, azimuth {azimuth_deg}"),
        });
    }
    let cam = Camera::orbit(NVS_SPHERE_CENTER, NVS_CAMERA_DISTANCE, polar_deg, azimuth_deg, NVS_FOV_DEG, size, size)?;
    let light = vec3::from_angles(NVS_LIGHT_POLAR_DEG, NVS_LIGHT_AZIMUTH_DEG);
    let mut data = Vec::with_capacity(3 * size * size);
    for y in 0..size {
        for x in 0..size {
            let (o, d) = cam.ray(x, y);
            data.extend(shade_nvs(o, d, light).iter().map(|&v| v as f32));
        }
    }
    ImageRgb::new(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsr_is_periodic_and_normalized() {
        let a = synth_tsr(0.0, &[12, 12, 12]).unwrap();
        let b = synth_tsr(1.0, &[12, 12, 12]).unwrap();
        assert_eq!(a, b);
        let max = a.data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        assert!(synth_tsr(0.0, &[65, 4, 4]).is_err());
    }

    #[test]
    fn tsr_half_period_is_a_half_turn() {
        let n = 10;
        let a = synth_tsr(0.0, &[n, n, n]).unwrap();
        let b = synth_tsr(0.5, &[n, n, n]).unwrap();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let rotated = a.get(n - 1 - i, n - 1 - j, k);
                    assert!((b.get(i, j, k) - rotated).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn nvs_is_pure_and_periodic_in_azimuth() {
        let a = synth_nvs(60.0, 30.0, 24).unwrap();
        assert_eq!(a, synth_nvs(60.0, 30.0, 24).unwrap());
        let b = synth_nvs(60.0, 390.0, 24).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5);
    }

    #[test]
    fn nvs_front_lit_brighter_than_back_lit() {
        let mean = |img: &ImageRgb| img.luma().iter().map(|&v| v as f64).sum::<f64>() / (img.width() * img.height()) as f64;
        let front = synth_nvs(60.0, NVS_LIGHT_AZIMUTH_DEG, 32).unwrap();
        let back = synth_nvs(60.0, NVS_LIGHT_AZIMUTH_DEG + 180.0, 32).unwrap();
        assert!(mean(&front) > mean(&back));
    }
}
