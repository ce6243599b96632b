//! Multiresolution hash encoding.
//!
//! Each level `l` (1-based) is a virtual grid of resolution `R_l = R_1·2^(l-1)`
//! with `R_l + 1` vertices per axis. Coordinates are scaled as
//! `x·R_l + 0.5` and the `2^d` surrounding vertices are blended d-linearly.
//! Levels whose vertex count fits in `T` are stored densely (row-major,
//! slowest axis first); larger levels are hashed into `T` slots.
//!
//! Parameters live in one flat buffer, level-major, entry-major,
//! feature-minor. Two encoders with equal configs are therefore
//! element-wise aligned, which is what weight interpolation relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis hashing primes.
pub const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Most corners a level touches (`2^3`).
const MAX_CORNERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashEncoderConfig {
    /// Coordinate dimension (1, 2 or 3).
    pub dim: usize,
    pub levels: usize,
    /// Maximum entries per level; a power of two.
    pub table_size: usize,
    pub features: usize,
    pub base_resolution: u32,
}

impl HashEncoderConfig {
    /// `L = 8`, `T = 2^15`, `F = 4` with the given base resolution.
    pub fn standard(dim: usize, base_resolution: u32) -> Self {
        Self {
            dim,
            levels: 8,
            table_size: 1 << 15,
            features: 4,
            base_resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::Config(format!("encoder dim must be 1..=3, got {}", self.dim)));
        }
        if self.levels == 0 || self.features == 0 || self.base_resolution == 0 {
            return Err(Error::Config(
                "encoder levels, features and base resolution must be >= 1".into(),
            ));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "table size must be a power of two, got {}",
                self.table_size
            )));
        }
        let top = self.base_resolution as u64 * (1u64 << (self.levels - 1));
        if top > u32::MAX as u64 / 2 {
            return Err(Error::Config(format!("finest resolution {top} is too large")));
        }
        Ok(())
    }

    /// Length of the encoded feature vector, `L·F`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// `R_l` for a 1-based level index.
    pub fn level_resolution(&self, level: usize) -> Result<u32> {
        if level == 0 || level > self.levels {
            return Err(Error::OutOfRange {
                what: "level",
                detail: format!("{level} not in 1..={}", self.levels),
            });
        }
        Ok(self.base_resolution << (level - 1))
    }

    /// Number of table entries at a 1-based level.
    pub fn level_entries(&self, level: usize) -> Result<usize> {
        let r = self.level_resolution(level)?;
        Ok(match vertex_count(r, self.dim) {
            Some(n) if n <= self.table_size as u64 => n as usize,
            _ => self.table_size,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|l| l.entries * self.features).sum()
    }

    pub(crate) fn layout(&self) -> Vec<LevelLayout> {
        let mut offset = 0;
        (1..=self.levels)
            .map(|l| {
                let resolution = self.base_resolution << (l - 1);
                let dense = matches!(vertex_count(resolution, self.dim), Some(n) if n <= self.table_size as u64);
                let entries = if dense {
                    (resolution as usize + 1).pow(self.dim as u32)
                } else {
                    self.table_size
                };
                let lvl = LevelLayout {
                    resolution,
                    entries,
                    offset,
                };
                offset += entries * self.features;
                lvl
            })
            .collect()
    }
}

fn vertex_count(resolution: u32, dim: usize) -> Option<u64> {
    (resolution as u64 + 1).checked_pow(dim as u32)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LevelLayout {
    pub resolution: u32,
    pub entries: usize,
    /// Offset of the level's first float in the flat buffer.
    pub offset: usize,
}

/// Table slot of a lattice vertex. Dense levels use row-major order with the
/// first axis slowest; hashed levels XOR the per-axis products (32-bit
/// wrapping) and keep the low bits.
pub fn vertex_index(cell: &[u32], resolution: u32, table_size: usize, dim: usize) -> usize {
    debug_assert_eq!(cell.len(), dim);
    let dense = matches!(vertex_count(resolution, dim), Some(n) if n <= table_size as u64);
    if dense {
        let stride = resolution as usize + 1;
        cell.iter().fold(0usize, |acc, &c| acc * stride + c as usize)
    } else {
        let h = cell
            .iter()
            .zip(PRIMES)
            .fold(0u32, |acc, (&c, p)| acc ^ c.wrapping_mul(p));
        h as usize & (table_size - 1)
    }
}

/// Corner slots (as float offsets into the whole buffer) and d-linear weights
/// for one coordinate at one level.
#[inline]
fn level_corners(
    level: &LevelLayout,
    dim: usize,
    features: usize,
    table_size: usize,
    x: &[f32],
    slots: &mut [usize; MAX_CORNERS],
    weights: &mut [f32; MAX_CORNERS],
) -> usize {
    let r = level.resolution;
    let mut base = [0u32; 3];
    let mut frac = [0f32; 3];
    for i in 0..dim {
        let pos = x[i].clamp(0.0, 1.0) * r as f32 + 0.5;
        let b = pos.floor();
        base[i] = b as u32;
        frac[i] = pos - b;
    }
    let n = 1 << dim;
    let mut cell = [0u32; 3];
    for corner in 0..n {
        let mut w = 1.0f32;
        for i in 0..dim {
            if corner & (1 << (dim - 1 - i)) != 0 {
                // the upper vertex past the last lattice point folds back onto it
                cell[i] = (base[i] + 1).min(r);
                w *= frac[i];
            } else {
                cell[i] = base[i].min(r);
                w *= 1.0 - frac[i];
            }
        }
        let idx = vertex_index(&cell[..dim], r, table_size, dim);
        slots[corner] = level.offset + idx * features;
        weights[corner] = w;
    }
    n
}

/// Encodes a batch of coordinates (`n × dim`, row-major) with an external
/// parameter buffer into `out` (`n × L·F`).
pub fn encode_batch(config: &HashEncoderConfig, params: &[f32], coords: &[f32], out: &mut [f32]) {
    let layout = config.layout();
    let (dim, feats) = (config.dim, config.features);
    let width = config.output_dim();
    debug_assert_eq!(params.len(), config.param_count());
    debug_assert_eq!(coords.len() / dim * width, out.len());
    let mut slots = [0usize; MAX_CORNERS];
    let mut weights = [0f32; MAX_CORNERS];
    for (x, row) in coords.chunks_exact(dim).zip(out.chunks_exact_mut(width)) {
        for (lvl, dst) in layout.iter().zip(row.chunks_exact_mut(feats)) {
            let n = level_corners(lvl, dim, feats, config.table_size, x, &mut slots, &mut weights);
            dst.fill(0.0);
            for c in 0..n {
                let src = &params[slots[c]..slots[c] + feats];
                let w = weights[c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Accumulates the gradient of a batch encode into a dense buffer shaped
/// like the parameters. Hash collisions add up.
pub fn encode_backward_batch(
    config: &HashEncoderConfig,
    coords: &[f32],
    upstream: &[f32],
    grad: &mut [f32],
) {
    let layout = config.layout();
    let (dim, feats) = (config.dim, config.features);
    let width = config.output_dim();
    debug_assert_eq!(grad.len(), config.param_count());
    let mut slots = [0usize; MAX_CORNERS];
    let mut weights = [0f32; MAX_CORNERS];
    for (x, up) in coords.chunks_exact(dim).zip(upstream.chunks_exact(width)) {
        for (lvl, g) in layout.iter().zip(up.chunks_exact(feats)) {
            let n = level_corners(lvl, dim, feats, config.table_size, x, &mut slots, &mut weights);
            for c in 0..n {
                let w = weights[c];
                for (dst, u) in grad[slots[c]..slots[c] + feats].iter_mut().zip(g) {
                    *dst += w * u;
                }
            }
        }
    }
}

/// One multiresolution hash encoding unit.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoder {
    config: HashEncoderConfig,
    params: Vec<f32>,
}

impl HashEncoder {
    pub fn zeros(config: HashEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: vec![0.0; config.param_count()],
            config,
        })
    }

    pub fn from_params(config: HashEncoderConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::shape(
                format!("{} encoder parameters", config.param_count()),
                params.len(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HashEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f32> {
        self.params
    }

    /// Feature vector of length `L·F` at `x` (clamped to the unit cube).
    pub fn encode(&self, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.config.dim, "coordinate dimension");
        let mut out = vec![0.0; self.config.output_dim()];
        encode_batch(&self.config, &self.params, x, &mut out);
        out
    }

    /// Sparse gradient `(param index, value)` of `upstream · encode(x)` with
    /// respect to the table entries. Colliding corners are merged.
    pub fn encode_backward(&self, x: &[f32], upstream: &[f32]) -> Vec<(usize, f32)> {
        assert_eq!(x.len(), self.config.dim, "coordinate dimension");
        assert_eq!(upstream.len(), self.config.output_dim(), "upstream length");
        let layout = self.config.layout();
        let feats = self.config.features;
        let mut slots = [0usize; MAX_CORNERS];
        let mut weights = [0f32; MAX_CORNERS];
        let mut out: Vec<(usize, f32)> = Vec::new();
        for (lvl, g) in layout.iter().zip(upstream.chunks_exact(feats)) {
            let n = level_corners(lvl, self.config.dim, feats, self.config.table_size, x, &mut slots, &mut weights);
            for c in 0..n {
                for (f, u) in g.iter().enumerate() {
                    out.push((slots[c] + f, weights[c] * u));
                }
            }
        }
        out.sort_by_key(|&(i, _)| i);
        out.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        out
    }

    /// The `2^d` interpolation weights used at one level (1-based).
    pub fn interpolation_weights(&self, x: &[f32], level: usize) -> Result<Vec<f32>> {
        self.config.level_resolution(level)?;
        let layout = self.config.layout();
        let mut slots = [0usize; MAX_CORNERS];
        let mut weights = [0f32; MAX_CORNERS];
        let n = level_corners(
            &layout[level - 1],
            self.config.dim,
            self.config.features,
            self.config.table_size,
            x,
            &mut slots,
            &mut weights,
        );
        Ok(weights[..n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng};

    fn small(dim: usize) -> HashEncoderConfig {
        HashEncoderConfig {
            dim,
            levels: 3,
            table_size: 1 << 6,
            features: 2,
            base_resolution: 2,
        }
    }

    #[test]
    fn level_resolution_schedule() {
        let c = HashEncoderConfig::standard(3, 4);
        assert_eq!(c.level_resolution(1).unwrap(), 4);
        assert_eq!(c.level_resolution(3).unwrap(), 16);
        assert!(c.level_resolution(0).is_err());
        assert!(c.level_resolution(9).is_err());
        let nvs = HashEncoderConfig::standard(2, 8);
        assert_eq!(nvs.level_resolution(2).unwrap(), 16);
    }

    #[test]
    fn level_entries_dense_then_hashed() {
        let c = HashEncoderConfig::standard(3, 4);
        let entries: Vec<usize> = (1..=8).map(|l| c.level_entries(l).unwrap()).collect();
        assert_eq!(&entries[..3], &[125, 729, 4913]);
        assert!(entries[3..].iter().all(|&e| e == 1 << 15));
        assert_eq!(c.param_count(), (125 + 729 + 4913 + 5 * 32768) * 4);
    }

    #[test]
    fn config_validation() {
        let mut c = small(2);
        c.table_size = 100;
        assert!(c.validate().is_err());
        let mut c = small(2);
        c.dim = 4;
        assert!(c.validate().is_err());
        let mut c = small(2);
        c.levels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn vertex_index_fixtures() {
        let t = 1 << 15;
        // R = 64 → 65³ > 2^15, hashed
        assert_eq!(vertex_index(&[0, 0, 0], 64, t, 3), 0);
        assert_eq!(vertex_index(&[0, 1, 0], 64, t, 3), 31_153);
        assert_eq!(vertex_index(&[2, 3], 4, t, 2), 13);
    }

    #[test]
    fn dense_levels_are_injective() {
        let (r, t) = (6u32, 1 << 9);
        let mut seen = std::collections::HashSet::new();
        for a in 0..=r {
            for b in 0..=r {
                for c in 0..=r {
                    assert!(seen.insert(vertex_index(&[a, b, c], r, t, 3)));
                }
            }
        }
        assert!(seen.iter().all(|&i| i < 343));
    }

    #[test]
    fn zero_and_constant_tables() {
        let enc = HashEncoder::zeros(small(3)).unwrap();
        assert!(enc.encode(&[0.3, 0.2, 0.9]).iter().all(|&v| v == 0.0));

        let cfg = HashEncoderConfig { levels: 1, ..small(3) };
        let enc = HashEncoder::from_params(cfg, vec![0.75; cfg.param_count()]).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let x: Vec<f32> = (0..3).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
            for v in enc.encode(&x) {
                assert!((v - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_dimensional_midpoint() {
        let cfg = HashEncoderConfig {
            dim: 1,
            levels: 1,
            table_size: 4,
            features: 1,
            base_resolution: 1,
        };
        let enc = HashEncoder::from_params(cfg, vec![0.0, 1.0]).unwrap();
        // x = 0 scales to 0.5: halfway between the two vertices
        assert_eq!(enc.encode(&[0.0]), vec![0.5]);
        assert_eq!(enc.encode(&[1.0]), vec![1.0]);
        assert!((enc.encode(&[0.25])[0] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn out_of_domain_coordinates_clamp() {
        let mut rng = Rng::new(5);
        let cfg = small(2);
        let params: Vec<f32> = (0..cfg.param_count()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let enc = HashEncoder::from_params(cfg, params).unwrap();
        assert_eq!(enc.encode(&[-0.5, 1.5]), enc.encode(&[0.0, 1.0]));
    }

    #[test]
    fn weights_form_partition_of_unity() {
        let mut rng = Rng::new(9);
        for dim in 1..=3 {
            let enc = HashEncoder::zeros(small(dim)).unwrap();
            for _ in 0..200 {
                let x: Vec<f32> = (0..dim).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
                for l in 1..=3 {
                    let w = enc.interpolation_weights(&x, l).unwrap();
                    assert_eq!(w.len(), 1 << dim);
                    assert!(w.iter().all(|&v| v >= 0.0));
                    assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut rng = Rng::new(11);
        let cfg = small(3);
        let params: Vec<f32> = (0..cfg.param_count()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let enc = HashEncoder::from_params(cfg, params).unwrap();
        let x = [0.31, 0.77, 0.05];
        let zero = enc.encode_backward(&x, &vec![0.0; cfg.output_dim()]);
        assert!(zero.iter().all(|&(_, g)| g == 0.0));

        // per level and feature the corner coefficients sum to the upstream value
        let upstream: Vec<f32> = (0..cfg.output_dim()).map(|i| 0.5 + i as f32).collect();
        let grad = enc.encode_backward(&x, &upstream);
        let layout = cfg.layout();
        for (l, lvl) in layout.iter().enumerate() {
            for f in 0..cfg.features {
                let s: f32 = grad
                    .iter()
                    .filter(|&&(i, _)| i >= lvl.offset && i < lvl.offset + lvl.entries * cfg.features && (i - lvl.offset) % cfg.features == f)
                    .map(|&(_, g)| g)
                    .sum();
                assert!((s - upstream[l * cfg.features + f]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let cfg = small(2);
        let params: Vec<f32> = (0..cfg.param_count()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let enc = HashEncoder::from_params(cfg, params.clone()).unwrap();
        let upstream: Vec<f32> = (0..cfg.output_dim()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        for _ in 0..20 {
            let x = [rng.uniform(0.0, 1.0) as f32, rng.uniform(0.0, 1.0) as f32];
            let grad = enc.encode_backward(&x, &upstream);
            for &(idx, g) in grad.iter().filter(|(_, g)| g.abs() > 1e-4).take(6) {
                let base: Vec<f64> = params.iter().map(|&v| v as f64).collect();
                let f = |p: &[f64]| {
                    let mut q = base.clone();
                    q[idx] = p[0];
                    let e = HashEncoder::from_params(cfg, q.iter().map(|&v| v as f32).collect()).unwrap();
                    e.encode(&x).iter().zip(&upstream).map(|(a, b)| *a as f64 * *b as f64).sum()
                };
                let fd = finite_diff_grad(f, &[base[idx]], 1e-2)[0];
                assert!(relative_error(g as f64, fd) < 1e-3, "{g} vs {fd}");
            }
        }
    }
}
